"""Compound estimation: Stein-type shrinkage, scalar empirical Bayes and
the Strawderman change of coordinates.

Rules act on the last axis, so a batch of Monte Carlo draws of shape
``(n_rep, B)`` is processed in one call.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.optimize


@dataclass(frozen=True)
class CompoundProblem:
    """Direct observation ``Y = alpha + E`` with ``E ~ N(0, sigma2 I)``."""

    Y: np.ndarray
    sigma2: float
    truth: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if Y.size < 1:
            raise ValueError("need B >= 1")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        object.__setattr__(self, "Y", Y)
        if self.weights is not None:
            W = np.asarray(self.weights, dtype=float)
            if W.ndim == 1:
                W = np.diag(W)
            if W.shape != (Y.size, Y.size) or np.linalg.eigvalsh(0.5 * (W + W.T))[0] < -1e-10 * max(1.0, np.abs(W).max()):
                raise ValueError("weights must be a B x B PSD matrix")
            object.__setattr__(self, "weights", W)

    @property
    def B(self) -> int:
        return self.Y.size


def np_sign_rule(Y):
    """Componentwise sign with ``sign(0) = +1``; returns ``(signs, zero_flag)``."""
    Y = np.asarray(Y, dtype=float)
    return np.where(Y >= 0, 1.0, -1.0), bool(np.any(Y == 0))


def _sqnorm(Y):
    return np.sum(np.asarray(Y, dtype=float) ** 2, axis=-1, keepdims=True)


def james_stein(Y, sigma2: float):
    """``(1 - (B-2) sigma2 / |Y|^2) Y``; defined for B >= 3 and Y != 0."""
    Y = np.asarray(Y, dtype=float)
    B = Y.shape[-1]
    if B < 3:
        raise ValueError("James-Stein needs B >= 3")
    s = _sqnorm(Y)
    if np.any(s == 0):
        raise ValueError("James-Stein is undefined at Y = 0")
    return (1.0 - (B - 2) * sigma2 / s) * Y


def _positive_part(Y, sigma2, numerator):
    Y = np.asarray(Y, dtype=float)
    s = _sqnorm(Y)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(s > 0, 1.0 - numerator * sigma2 / np.where(s > 0, s, 1.0), 0.0)
    return np.maximum(factor, 0.0) * Y


def positive_part_js(Y, sigma2: float):
    return _positive_part(Y, sigma2, np.shape(Y)[-1] - 2)


def scalar_ml_lambda(Y, sigma2: float):
    """Marginal-likelihood prior variance ``max(|Y|^2/B - sigma2, 0)``."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    Y = np.asarray(Y, dtype=float)
    return np.maximum(np.mean(Y ** 2, axis=-1) - sigma2, 0.0)


def bayes_shrinkage(Y, lam, sigma2: float):
    """Posterior mean ``lam / (lam + sigma2) Y`` under ``alpha ~ N(0, lam I)``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("lam must be nonnegative")
    factor = lam / (lam + sigma2)
    return np.expand_dims(factor, -1) * np.asarray(Y, dtype=float)


def eb_shrinkage(Y, sigma2: float):
    """Empirical Bayes rule ``(1 - B sigma2 / |Y|^2)^+ Y``: the Bayes rule at the ML variance."""
    return bayes_shrinkage(Y, scalar_ml_lambda(Y, sigma2), sigma2)


def least_squares_rule(Y, sigma2: float = 1.0):
    return np.asarray(Y, dtype=float).copy()


RULES: dict = {
    "ls": least_squares_rule,
    "js": james_stein,
    "js+": positive_part_js,
    "eb": eb_shrinkage,
}


# --- losses ----------------------------------------------------------------

def compound_loss(alpha, delta):
    """``(1/B) sum (alpha_i - delta_i)^2`` along the last axis."""
    diff = np.asarray(alpha, dtype=float) - np.asarray(delta, dtype=float)
    return np.mean(diff ** 2, axis=-1)


def weighted_loss(beta_bar, delta, D):
    """``(delta - beta_bar)^T D (delta - beta_bar)`` for diagonal (vector) or full D."""
    diff = np.asarray(delta, dtype=float) - np.asarray(beta_bar, dtype=float)
    D = np.asarray(D, dtype=float)
    if D.ndim == 1:
        return np.sum(D * diff ** 2, axis=-1)
    return np.einsum("...i,ij,...j->...", diff, D, diff)


def output_weighted_loss(g, g_hat, Phi, K):
    """``e^T (Phi^T Phi K Phi^T Phi) e`` with ``e = g - g_hat``."""
    Phi = np.asarray(Phi, dtype=float)
    K = np.asarray(K, dtype=float)
    e = Phi @ (np.asarray(g, dtype=float) - np.asarray(g_hat, dtype=float))
    return float(e @ Phi @ K @ Phi.T @ e)


# --- Strawderman coordinates ---------------------------------------------

@dataclass
class CoordinateChange:
    """``beta_bar = A g`` with ``A K A^T = D`` and ``A (Phi^T Phi)^{-1} A^T = I``.

    ``D`` holds the squared singular values of ``Phi Psi``; ``Z = Q^T Y``.
    """

    A: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    V: np.ndarray
    Z: Optional[np.ndarray] = None
    residuals: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def to_impulse(self, beta_bar) -> np.ndarray:
        """Map coordinates back: solve ``A g = beta_bar``."""
        return np.linalg.lstsq(self.A, np.asarray(beta_bar, dtype=float), rcond=None)[0]

    def to_coordinates(self, g) -> np.ndarray:
        return self.A @ np.asarray(g, dtype=float)


def _rel(err: np.ndarray, ref: np.ndarray) -> float:
    den = max(np.linalg.norm(ref), np.finfo(float).tiny)
    return float(np.linalg.norm(err) / den)


def strawderman_transform(Phi, Psi, K=None, Y=None, rank_rtol: float = 1e-10) -> CoordinateChange:
    """SVD-based change of coordinates diagonalizing both prior and design.

    With ``Phi Psi = Q D^{1/2} V^T`` (thin SVD) the map is ``A = Q^T Phi``.
    Singular vectors are sign-normalized so the largest-magnitude entry of
    every right singular vector is positive.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
    if K is None:
        K = Psi @ Psi.T
    K = np.asarray(K, dtype=float)
    if np.abs(Psi @ Psi.T - K).max() > 1e-8 * max(np.abs(K).max(), 1.0):
        raise ValueError("K is not consistent with Psi Psi^T")
    Q, s, Vt = np.linalg.svd(Phi @ Psi, full_matrices=False)
    V = Vt.T
    flip = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])])
    flip[flip == 0] = 1.0
    V = V * flip
    Q = Q * flip
    D = s ** 2
    A = Q.T @ Phi
    cc = CoordinateChange(A, D, Q, V, None if Y is None else Q.T @ np.asarray(Y, dtype=float))
    sv = np.linalg.svd(Phi, compute_uv=False)
    rank = int(np.sum(sv > rank_rtol * sv[0])) if sv.size else 0
    cc.flags["rank_deficient"] = rank < Phi.shape[1]
    cc.residuals["AKA_minus_D"] = _rel(A @ K @ A.T - np.diag(D), np.diag(D))
    if not cc.flags["rank_deficient"]:
        GinvAt = scipy.linalg.solve(Phi.T @ Phi, A.T, assume_a="pos")
        cc.residuals["AGinvA_minus_I"] = _rel(A @ GinvAt - np.eye(A.shape[0]), np.eye(A.shape[0]))
    return cc


def shrinkage_in_coordinates(Z, D, lam: float, sigma2: float):
    """Componentwise ``(1 - (sigma2/d_i) / (lam + sigma2/d_i)) Z_i``; zero where ``d_i = 0``."""
    Z = np.asarray(Z, dtype=float)
    D = np.asarray(D, dtype=float)
    out = np.zeros_like(Z)
    pos = D > 0
    # equivalent form lam d / (lam d + sigma2) avoids 0/0 at lam = 0
    out[..., pos] = (lam * D[pos] / (lam * D[pos] + sigma2)) * Z[..., pos]
    return out


def lambda_star(g, K, B: Optional[int] = None, rtol: float = 1e-8) -> float:
    """``g^T K^+ g / B``; raises when g leaves the range of K."""
    g = np.asarray(g, dtype=float)
    K = np.asarray(K, dtype=float)
    w, V = np.linalg.eigh(0.5 * (K + K.T))
    keep = w > 1e-12 * max(w[-1], 0.0)
    coef = V.T @ g
    outside = np.linalg.norm(coef[~keep])
    if outside > rtol * max(np.linalg.norm(g), np.finfo(float).tiny):
        raise ValueError("g has a component outside the range of K")
    B = int(np.sum(keep)) if B is None else int(B)
    return float(np.sum(coef[keep] ** 2 / w[keep]) / B)


def eb_strawderman(Z, D, sigma2: float):
    """Shrinkage with ``lam = Z^T D^{-1} Z / B`` over the coordinates with ``d_i > 0``.

    Returns ``(beta_bar_hat, lam, flags)``.
    """
    Z = np.asarray(Z, dtype=float)
    D = np.asarray(D, dtype=float)
    pos = D > 0
    B = int(pos.sum())
    if B == 0:
        return np.zeros_like(Z), 0.0, {"excluded": int((~pos).sum())}
    lam = float(np.sum(Z[pos] ** 2 / D[pos]) / B)
    return shrinkage_in_coordinates(Z, D, lam, sigma2), lam, {"excluded": int((~pos).sum())}


def ml_lambda_in_coordinates(Z, D, sigma2: float) -> float:
    """Exact evidence maximizer over ``lam`` in Strawderman coordinates.

    ``Z_i ~ N(0, lam d_i + sigma2)`` independently; the stationary point is
    found by root finding on the derivative, with ``lam = 0`` when the
    derivative at zero is nonpositive.
    """
    Z = np.asarray(Z, dtype=float)
    D = np.asarray(D, dtype=float)
    pos = D > 0
    z2, d = Z[pos] ** 2, D[pos]

    def dlogp(lam):
        v = lam * d + sigma2
        return 0.5 * np.sum(d * (z2 - v) / v ** 2)

    if dlogp(0.0) <= 0:
        return 0.0
    hi = max(np.max(z2 / d), 1.0)
    while dlogp(hi) > 0:
        hi *= 2.0
    return float(scipy.optimize.brentq(dlogp, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=1000))


# --- Monte Carlo risk -------------------------------------------------------

@dataclass(frozen=True)
class RiskResult:
    risk: float
    stderr: float
    n_used: int
    n_failed: int


def risk_monte_carlo(rule: Callable, alpha, sigma2: float, n_rep: int, seed: int,
                     loss: Callable = compound_loss, chunk: int = 20000) -> RiskResult:
    """Average ``loss(alpha, rule(alpha + E))`` over seeded Gaussian draws.

    ``rule(Y, sigma2)`` must accept a batch ``(n, B)``. Draws on which the
    rule fails (raises or returns non-finite values) are dropped and counted.
    """
    if n_rep < 100:
        raise ValueError("n_rep must be >= 100")
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    rng = np.random.default_rng(seed)
    losses = []
    failed = 0
    done = 0
    while done < n_rep:
        n = min(chunk, n_rep - done)
        Y = alpha + np.sqrt(sigma2) * rng.standard_normal((n, alpha.size))
        try:
            est = rule(Y, sigma2)
            ok = np.all(np.isfinite(est), axis=-1)
        except (ValueError, FloatingPointError, ZeroDivisionError):
            est = np.empty_like(Y)
            ok = np.zeros(n, dtype=bool)
            for i in range(n):
                try:
                    est[i] = rule(Y[i:i + 1], sigma2)[0]
                    ok[i] = np.all(np.isfinite(est[i]))
                except (ValueError, FloatingPointError, ZeroDivisionError):
                    pass
        losses.append(loss(alpha, est[ok]))
        failed += int((~ok).sum())
        done += n
    L = np.concatenate(losses)
    if L.size == 0:
        raise RuntimeError("the rule failed on every draw")
    se = float(L.std(ddof=1) / np.sqrt(L.size)) if L.size > 1 else float("nan")
    return RiskResult(float(L.mean()), se, int(L.size), failed)
