"""Structure-inducing estimators: block Hankel operators, nuclear-norm
regularization, the stable-Hankel Gaussian prior and ARD channel selection.

The block Hankel matrix of an impulse response ``g_1, ..., g_T`` (each
``p x m``) has block ``(i, j)`` equal to ``g_{i+j-1}`` for ``i = 1..r`` and
``j = 1..c``. Its vectorization (row-major) is a linear map of the
channel-major vector ``g``; every coefficient appears in the matrix once per
anti-diagonal position, so ``H^T H`` is diagonal.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.linalg
import scipy.optimize

from .bayes import (EVIDENCE_FAILURE, Estimate, EvidenceFailure, EvidenceProblem, OptimizerConfig, Sigma2Policy,
                    empirical_bayes)
from .kernels import (BlockDiagFamily, Family, KernelMatrix, KernelSpec, TCFamily, ar1_precision, family_from_name,
                      make_kernel)
from .model import FirRegression, Handling, IODataset, ImpulseResponse, build_fir_regression, devectorize, vectorize

log = logging.getLogger(__name__)

_LOG2PI = np.log(2.0 * np.pi)


# --- Hankel operator -----------------------------------------------------

def default_hankel_shape(T: int) -> tuple:
    """Near-square block shape using every coefficient: ``r = ceil((T+1)/2)``, ``c = T + 1 - r``."""
    r = (T + 2) // 2
    return r, T + 1 - r


@dataclass(frozen=True)
class HankelMap:
    """Linear map ``g -> H(g)`` from a channel-major d-vector to an ``rp x cm`` matrix."""

    r: int
    c: int
    T: int
    p: int = 1
    m: int = 1

    def __post_init__(self):
        if min(self.r, self.c, self.T, self.p, self.m) < 1:
            raise ValueError("Hankel dimensions must be positive")
        if self.r + self.c - 1 > self.T:
            raise ValueError(f"r + c - 1 = {self.r + self.c - 1} exceeds T = {self.T}")

    @classmethod
    def default(cls, T: int, p: int = 1, m: int = 1) -> "HankelMap":
        return cls(*default_hankel_shape(T), T, p, m)

    @property
    def d(self) -> int:
        return self.T * self.p * self.m

    @property
    def shape(self) -> tuple:
        return self.r * self.p, self.c * self.m

    @property
    def _lag(self) -> np.ndarray:
        return np.add.outer(np.arange(self.r), np.arange(self.c))

    def apply(self, g) -> np.ndarray:
        coeffs = devectorize(np.asarray(g, dtype=float), self.T, self.p, self.m)
        blocks = coeffs[self._lag]  # r x c x p x m
        return blocks.transpose(0, 2, 1, 3).reshape(self.shape)

    def adjoint(self, M) -> np.ndarray:
        M = np.asarray(M, dtype=float)
        if M.shape != self.shape:
            raise ValueError(f"expected a {self.shape} matrix, got {M.shape}")
        blocks = M.reshape(self.r, self.p, self.c, self.m).transpose(0, 2, 1, 3)
        coeffs = np.zeros((self.T, self.p, self.m))
        np.add.at(coeffs, self._lag, blocks)
        return vectorize(coeffs)

    def matrix(self) -> np.ndarray:
        """Explicit operator: ``H(g).ravel() == matrix() @ g``."""
        return np.column_stack([self.apply(e).ravel() for e in np.eye(self.d)])

    def gram_diagonal(self) -> np.ndarray:
        """Diagonal of ``H^T H``: the number of times each coefficient appears."""
        return self.adjoint(np.ones(self.shape))


def hankel(g, r: Optional[int] = None, c: Optional[int] = None, p: int = 1, m: int = 1) -> np.ndarray:
    """Block Hankel matrix of ``g`` (an :class:`ImpulseResponse` or a channel-major vector)."""
    if isinstance(g, ImpulseResponse):
        T, p, m = g.T, g.p, g.m
        g = g.vectorize()
    else:
        g = np.asarray(g, dtype=float).reshape(-1)
        T = g.size // (p * m)
    if r is None or c is None:
        r, c = default_hankel_shape(T)
    return HankelMap(r, c, T, p, m).apply(g)


def hankel_adjoint(M, r: int, c: int, T: Optional[int] = None, p: int = 1, m: int = 1) -> np.ndarray:
    """Adjoint of :func:`hankel`: accumulates every block into its lag."""
    return HankelMap(r, c, T if T is not None else r + c - 1, p, m).adjoint(M)


def numerical_rank(M, rtol: float = 1e-6) -> int:
    s = np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)
    return int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0


# --- nuclear-norm regularization -------------------------------------------

def _project_spectral_ball(W: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    return (U * np.minimum(s, 1.0)) @ Vt


def _hankel_prox(v, s, hm: HankelMap, W0, counts_max, n_iter, tol):
    """``argmin_g 1/2 |g - v|^2 + s |H(g)|_*`` by accelerated projected gradient on the dual.

    The dual variable ``W`` lives in the unit spectral-norm ball and
    ``g = v - s H^T(W)``. Returns ``(g, W)`` so the dual can be warm-started.
    """
    if s == 0:
        return v.copy(), W0
    # W = H(D^-1 v) / s satisfies H^T W = v / s; inside the ball it certifies a zero prox
    W_ls = hm.apply(v / hm.gram_diagonal()) / s
    if np.linalg.norm(W_ls, 2) <= 1.0:
        return np.zeros_like(v), W_ls
    Hv = hm.apply(v) / s
    W, Wy, th = W0, W0, 1.0
    step = 1.0 / counts_max
    for _ in range(n_iter):
        W_new = _project_spectral_ball(Wy + step * (Hv - hm.apply(hm.adjoint(Wy))))
        th_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * th * th))
        Wy = W_new + ((th - 1.0) / th_new) * (W_new - W)
        delta = np.linalg.norm(W_new - W)
        W, th = W_new, th_new
        if delta <= tol * max(1.0, np.linalg.norm(W)):
            break
    return v - s * hm.adjoint(W), W


def nuclear_norm_objective(problem: FirRegression, g, eta: float, hm: HankelMap) -> float:
    res = problem.Y - problem.Phi @ g
    return float(res @ res + eta * np.linalg.svd(hm.apply(g), compute_uv=False).sum())


def nuclear_norm_identify(problem: FirRegression, eta: float, r: Optional[int] = None, c: Optional[int] = None,
                          max_iter: int = 5000, tol: float = 1e-8, xtol: float = 1e-9, init: str = "ls",
                          inner_iter: int = 200, inner_tol: float = 1e-10) -> ImpulseResponse:
    """Minimize ``|Y - Phi g|^2 + eta |H(g)|_*`` by monotone accelerated proximal gradient.

    The smooth term uses the exact step ``1 / (2 |Phi|_2^2)``; the prox of
    the Hankel nuclear norm is computed inexactly on the dual. A candidate
    iterate is accepted only if it does not increase the objective, so the
    recorded objective sequence is nonincreasing. Stops when the relative
    objective change is below ``tol`` and the relative step below ``xtol``;
    ``meta["converged"]`` is False when ``max_iter`` is hit first.
    """
    if not eta >= 0:
        raise ValueError("eta must be nonnegative")
    T, p, m = problem.T, problem.p, problem.m
    if r is None or c is None:
        r, c = default_hankel_shape(T)
    hm = HankelMap(r, c, T, p, m)
    Phi, Y = problem.Phi, problem.Y
    Lip = 2.0 * np.linalg.norm(Phi, 2) ** 2
    if Lip == 0:
        return ImpulseResponse.from_vector(np.zeros(problem.d), T, p, m, {"converged": True, "iterations": 0,
                                                                           "objective": [float(Y @ Y)]})
    step = 1.0 / Lip
    counts_max = float(hm.gram_diagonal().max())
    if init == "ls":
        x = np.linalg.lstsq(Phi, Y, rcond=None)[0]
    elif init == "zero":
        x = np.zeros(problem.d)
    else:
        raise ValueError(f"unknown init {init!r}")
    F = lambda g: nuclear_norm_objective(problem, g, eta, hm)
    Fx = F(x)
    history = [Fx]
    y, x_prev, th = x.copy(), x.copy(), 1.0
    W = np.zeros(hm.shape)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        v = y - step * 2.0 * (Phi.T @ (Phi @ y - Y))
        z, W = _hankel_prox(v, step * eta, hm, W, counts_max, inner_iter, inner_tol)
        Fz = F(z)
        x_new, F_new = (z, Fz) if Fz <= Fx else (x, Fx)
        th_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * th * th))
        y = x_new + (th / th_new) * (z - x_new) + ((th - 1.0) / th_new) * (x_new - x)
        x_prev, x, th = x, x_new, th_new
        dF = Fx - F_new
        Fx = F_new
        history.append(Fx)
        # a rejected candidate leaves x unchanged, so the candidate step is tested too
        xscale = max(np.linalg.norm(x), 1.0)
        if (dF <= tol * max(abs(Fx), 1e-300) and np.linalg.norm(x - x_prev) <= xtol * xscale
                and np.linalg.norm(z - x) <= xtol * xscale):
            converged = True
            break
    if not converged:
        log.warning("nuclear-norm solver hit the iteration cap (%d)", max_iter)
    meta = {"converged": converged, "iterations": it, "objective": history, "eta": eta, "hankel_shape": [r, c]}
    return ImpulseResponse.from_vector(x, T, p, m, meta)


# --- stable-Hankel prior ---------------------------------------------------

@dataclass
class StableHankelSpec:
    """Quadratic prior ``lam_s g^T Ks^{-1} g + lam1 tr(Pi H H^T) + lam2 tr(Pi_perp H H^T)``.

    ``Pi`` projects onto the columns of ``U_n`` (an ``rp x n`` matrix with
    orthonormal columns). ``Ks_precision`` may be supplied when the inverse
    of ``K_s`` is known in closed form.
    """

    K_s: np.ndarray
    U_n: np.ndarray
    lam_s: float
    lam1: float
    lam2: float
    hankel: HankelMap
    Ks_precision: Optional[np.ndarray] = None
    base_spec: Optional[KernelSpec] = None

    def __post_init__(self):
        self.K_s = np.asarray(self.K_s, dtype=float)
        self.U_n = np.atleast_2d(np.asarray(self.U_n, dtype=float))
        if self.U_n.shape[0] != self.hankel.shape[0]:
            if self.U_n.shape[1] == self.hankel.shape[0]:
                self.U_n = self.U_n.T
            else:
                raise ValueError(f"U_n needs {self.hankel.shape[0]} rows")
        n = self.U_n.shape[1]
        if np.abs(self.U_n.T @ self.U_n - np.eye(n)).max() > 1e-10:
            raise ValueError("U_n must have orthonormal columns")
        for nm in ("lam_s", "lam1", "lam2"):
            if not getattr(self, nm) > 0:
                raise ValueError(f"{nm} must be positive")
        if self.K_s.shape != (self.hankel.d, self.hankel.d):
            raise ValueError("K_s does not match the Hankel map dimension")

    @property
    def n(self) -> int:
        return self.U_n.shape[1]

    def base_precision(self) -> np.ndarray:
        if self.Ks_precision is not None:
            return self.Ks_precision
        return _safe_inverse(self.K_s)

    def to_kernel_spec(self) -> KernelSpec:
        shape = {"U": self.U_n.tolist(), "lam_s": self.lam_s, "lam1": self.lam1, "lam2": self.lam2,
                 "rows": self.hankel.r, "cols": self.hankel.c}
        shape["base"] = self.base_spec.to_dict() if self.base_spec is not None else self.K_s.tolist()
        return KernelSpec(Family.STABLE_HANKEL, 1.0, shape, (self.hankel.T, self.hankel.p, self.hankel.m))

    @classmethod
    def from_kernel_spec(cls, spec: KernelSpec) -> "StableHankelSpec":
        sh = spec.shape
        T, p, m = spec.dims
        base = sh["base"]
        Kprec = None
        if isinstance(base, dict):
            base_spec = KernelSpec.from_dict(base)
            K_s = make_kernel(base_spec).K
            Kprec = _closed_form_precision(base_spec)
        else:
            base_spec = None
            K_s = np.asarray(base, dtype=float)
        hm = HankelMap(int(sh["rows"]), int(sh["cols"]), T, p, m)
        return cls(K_s, np.asarray(sh["U"], dtype=float), float(sh["lam_s"]), float(sh["lam1"]),
                   float(sh["lam2"]), hm, Kprec, base_spec)


def _safe_inverse(K: np.ndarray, cond_max: float = 1e14) -> np.ndarray:
    w = np.linalg.eigvalsh(0.5 * (K + K.T))
    if w[0] <= w[-1] / cond_max:
        raise ValueError("K_s is singular to working precision")
    C = scipy.linalg.cho_factor(K, lower=True)
    P = scipy.linalg.cho_solve(C, np.eye(K.shape[0]))
    return 0.5 * (P + P.T)


def _closed_form_precision(spec: KernelSpec) -> Optional[np.ndarray]:
    """Banded precision of a SISO TC kernel (equal to an AR(1) covariance)."""
    if spec.family is not Family.TC or spec.dims[1] * spec.dims[2] != 1 or not float(spec.scale) > 0:
        return None
    Tc = spec.shape.get("Tc", 1.0)
    return ar1_precision(spec.T, float(spec.scale), float(np.exp(-spec.shape["beta"] * Tc)))


def _hankel_quadratics(hm: HankelMap, U: np.ndarray, Hmat: Optional[np.ndarray] = None):
    """``(A1, A2)`` with ``g^T A1 g = tr(Pi H H^T)`` and ``g^T A2 g = tr(Pi_perp H H^T)``."""
    if Hmat is None:
        Hmat = hm.matrix()
    H3 = Hmat.reshape(hm.shape[0], hm.shape[1], hm.d)
    UtH = np.einsum("ak,acd->kcd", U, H3)
    A1 = np.einsum("kcd,kce->de", UtH, UtH)
    A2 = np.diag(hm.gram_diagonal()) - A1
    return 0.5 * (A1 + A1.T), 0.5 * (A2 + A2.T)


def stable_hankel_precision(spec: StableHankelSpec) -> np.ndarray:
    """Precision ``P`` of the stable-Hankel prior, so that the penalty is ``g^T P g``."""
    A1, A2 = _hankel_quadratics(spec.hankel, spec.U_n)
    P = spec.lam_s * spec.base_precision() + spec.lam1 * A1 + spec.lam2 * A2
    return 0.5 * (P + P.T)


def stable_hankel_penalty(g, spec: StableHankelSpec) -> float:
    """Direct evaluation of the stable-Hankel penalty (no precision assembly)."""
    g = g.vectorize() if isinstance(g, ImpulseResponse) else np.asarray(g, dtype=float)
    H = spec.hankel.apply(g)
    UtH = spec.U_n.T @ H
    on = float(np.sum(UtH ** 2))
    total = float(np.sum(H ** 2))
    quad = float(g @ np.linalg.lstsq(spec.K_s, g, rcond=None)[0]) if spec.Ks_precision is None \
        else float(g @ spec.Ks_precision @ g)
    return spec.lam_s * quad + spec.lam1 * on + spec.lam2 * (total - on)


# --- evidence in precision form -------------------------------------------

@dataclass
class _PrecisionTerms:
    log_evidence: float
    g: np.ndarray
    S_inv: np.ndarray
    P_inv: np.ndarray


def precision_evidence(G, cvec, yy: float, n: int, P: np.ndarray, sigma2: float) -> _PrecisionTerms:
    """Log evidence of ``Y ~ N(0, Phi P^{-1} Phi^T + sigma2 I)`` from sufficient statistics."""
    S = P + G / sigma2
    try:
        CS = scipy.linalg.cho_factor(0.5 * (S + S.T), lower=True)
        CP = scipy.linalg.cho_factor(0.5 * (P + P.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise EvidenceFailure("precision factorization failed") from exc
    eye = np.eye(P.shape[0])
    S_inv = scipy.linalg.cho_solve(CS, eye)
    P_inv = scipy.linalg.cho_solve(CP, eye)
    g = S_inv @ cvec / sigma2
    logdet = n * np.log(sigma2) + 2.0 * np.sum(np.log(np.diag(CS[0]))) - 2.0 * np.sum(np.log(np.diag(CP[0])))
    quad = yy / sigma2 - cvec @ g / sigma2
    return _PrecisionTerms(float(-0.5 * (quad + logdet + n * _LOG2PI)), g, S_inv, P_inv)


class _SHTuner:
    """Evidence over ``(lam_s, lam1, lam2)`` for fixed ``U_n``, in log space."""

    def __init__(self, G, cvec, yy, n, sigma2, P_s, A1, A2, bounds, tie: bool):
        self.G, self.c, self.yy, self.n, self.sigma2 = G, cvec, yy, n, sigma2
        self.mats = [P_s, A1, A2]
        self.bounds = bounds
        self.tie = tie

    def expand(self, z):
        lam = np.exp(z)
        return np.array([lam[0], lam[1], lam[1]]) if self.tie else lam

    def precision(self, lam):
        return sum(l * A for l, A in zip(lam, self.mats))

    def objective(self, z):
        lam = self.expand(z)
        try:
            t = precision_evidence(self.G, self.c, self.yy, self.n, self.precision(lam), self.sigma2)
        except EvidenceFailure:
            return -EVIDENCE_FAILURE, np.zeros(len(z))
        # d logp / d log lam_i = 1/2 lam_i [tr(P^-1 A_i) - tr(S^-1 A_i) - g^T A_i g]
        grad = np.array([0.5 * l * (np.sum((t.P_inv - t.S_inv) * A) - t.g @ A @ t.g)
                         for l, A in zip(lam, self.mats)])
        if self.tie:
            grad = np.array([grad[0], grad[1] + grad[2]])
        return -t.log_evidence, -grad

    def tune(self, starts):
        best = None
        lb = [(np.log(lo), np.log(hi)) for lo, hi in self.bounds]
        for z0 in starts:
            res = scipy.optimize.minimize(self.objective, z0, jac=True, method="L-BFGS-B", bounds=lb,
                                          options={"ftol": 1e-14, "gtol": 1e-9, "maxiter": 1000})
            if np.isfinite(res.fun) and res.fun < -EVIDENCE_FAILURE and (best is None or res.fun < best.fun):
                best = res
        if best is None:
            raise EvidenceFailure("stable-Hankel tuning failed at every start")
        return best


def _top_left_singular(hm: HankelMap, g, n: int) -> np.ndarray:
    U, _, _ = np.linalg.svd(hm.apply(g), full_matrices=False)
    U = U[:, :n]
    # deterministic sign: largest-magnitude entry of each column positive
    s = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return U * s


def stable_hankel_identify(problem: FirRegression, K_s: Optional[Union[KernelMatrix, np.ndarray]] = None,
                           r: Optional[int] = None, c: Optional[int] = None, n_max: int = 4,
                           opt: Optional[OptimizerConfig] = None, sigma2: Optional[float] = None,
                           tol: float = 1e-5, max_sweeps: int = 20, tie_hankel_scales: bool = False,
                           n_values: Optional[list] = None) -> Estimate:
    """Empirical Bayes under the stable-Hankel prior with the order ``n`` chosen by evidence.

    Without ``K_s`` the base kernel is the TC kernel tuned by empirical Bayes
    (which also gives the starting estimate). For every candidate ``n``:
    take ``U_n`` from the SVD of the current Hankel matrix, tune
    ``(lam_s, lam1, lam2)``, recompute the posterior mean, and repeat until
    the relative change of the estimate is below ``tol``. The order with the
    highest final evidence wins; the evidences of all orders are reported in
    ``flags["evidence_by_n"]``.
    """
    opt = opt or OptimizerConfig()
    T, p, m = problem.T, problem.p, problem.m
    if r is None or c is None:
        r, c = default_hankel_shape(T)
    hm = HankelMap(r, c, T, p, m)
    if sigma2 is None:
        sigma2 = problem.noise_variance
    if sigma2 is None:
        from .bayes import estimate_noise_variance
        sigma2 = estimate_noise_variance(problem)
    base_spec = None
    P_s = None
    if K_s is None:
        fam = family_from_name(Family.TC, T, p, m)
        est0 = empirical_bayes(EvidenceProblem(problem, fam, sigma2=sigma2), opt)
        x = np.array([est0.hyperparams[nm] for nm in fam.names])
        if np.any(x[list(fam.scale_index)] == 0):
            # degenerate base kernel: fall back to the same shape at the smallest admissible scale
            x[list(fam.scale_index)] = np.maximum(x[list(fam.scale_index)], 1e-8 * (est0.sigma2 or 1.0))
        Kmat = fam.kernel(x)
        base_spec = Kmat.spec
        if p * m == 1:
            P_s = _closed_form_precision(base_spec)
        g0 = est0.g_hat.vectorize()
        Ks = Kmat.K
    else:
        Kmat = K_s if isinstance(K_s, KernelMatrix) else KernelMatrix(np.asarray(K_s, dtype=float))
        Ks = Kmat.K
        base_spec = Kmat.spec
        if base_spec is not None:
            P_s = _closed_form_precision(base_spec)
        from .bayes import posterior_mean
        g0 = posterior_mean(problem, Kmat, sigma2, with_cov=False).g_hat.vectorize()
    if P_s is None:
        P_s = _safe_inverse(Ks)
    G = problem.Phi.T @ problem.Phi
    cvec = problem.Phi.T @ problem.Y
    yy = float(problem.Y @ problem.Y)
    nobs = problem.n_obs
    Hmat = hm.matrix()
    H0 = hm.apply(g0)
    h_ref = float(np.sum(H0 ** 2))
    q_ref = float(g0 @ P_s @ g0)
    # reference magnitude making the Hankel energy comparable to the base penalty
    href = max(q_ref, 1.0) / max(h_ref, 1e-300)
    bounds = [(1e-6, 1e4), (1e-8 * href, 1e6 * href), (1e-8 * href, 1e6 * href)]
    if tie_hankel_scales:
        bounds = bounds[:2]
    rows = hm.shape[0]
    candidates = n_values if n_values is not None else list(range(1, min(n_max, rows) + 1))
    results = {}
    for n in candidates:
        g = g0.copy()
        z = None
        sweeps = 0
        converged = False
        lp = EVIDENCE_FAILURE
        for sweeps in range(1, max_sweeps + 1):
            U = _top_left_singular(hm, g, n)
            A1, A2 = _hankel_quadratics(hm, U, Hmat)
            tuner = _SHTuner(G, cvec, yy, nobs, sigma2, P_s, A1, A2, bounds, tie_hankel_scales)
            lbs = [(np.log(lo), np.log(hi)) for lo, hi in bounds]
            if z is None:
                starts = [np.array([0.5 * (a + b) for a, b in lbs])]
                starts += [np.array([0.0] + [np.log(v * href) for _ in lbs[1:]]) for v in (1e-4, 1e-1, 1e2)]
                starts = [np.clip(s, [a for a, _ in lbs], [b for _, b in lbs]) for s in starts[:max(opt.n_starts, 2)]]
            else:
                starts = [z]
            try:
                res = tuner.tune(starts)
            except EvidenceFailure:
                break
            z = res.x
            lam = tuner.expand(z)
            t = precision_evidence(G, cvec, yy, nobs, tuner.precision(lam), sigma2)
            change = np.linalg.norm(t.g - g) / max(np.linalg.norm(t.g), 1e-300)
            log.debug("n=%d sweep %d change %.3e lam %s", n, sweeps, change, lam)
            g, lp = t.g, t.log_evidence
            if change < tol:
                converged = True
                break
        if z is None:
            continue
        results[n] = {"g": g, "lam": lam, "lp": lp, "U": U, "sweeps": sweeps, "converged": converged}
    if not results:
        raise EvidenceFailure("stable-Hankel evidence failed for every order")
    n_best = max(results, key=lambda k: (results[k]["lp"], -k))
    best = results[n_best]
    spec = StableHankelSpec(Ks, best["U"], *map(float, best["lam"]), hm, P_s, base_spec)
    P = stable_hankel_precision(spec)
    t = precision_evidence(G, cvec, yy, nobs, P, sigma2)
    cov = t.S_inv
    dof = float(np.trace(G @ t.S_inv) / sigma2)
    hyper = {"n": n_best, "lam_s": spec.lam_s, "lam1": spec.lam1, "lam2": spec.lam2, "sigma2": float(sigma2)}
    flags = {"evidence_by_n": {k: v["lp"] for k, v in results.items()},
             "sweeps": {k: v["sweeps"] for k, v in results.items()},
             "converged": {k: v["converged"] for k, v in results.items()},
             "kernel_spec": spec.to_kernel_spec() if base_spec is not None else None}
    return Estimate(ImpulseResponse.from_vector(t.g, T, p, m), 0.5 * (cov + cov.T), hyper, t.log_evidence, dof,
                    float(sigma2), None, flags)


# --- ARD channel selection -------------------------------------------------

def ard_mimo_identify(data: IODataset, T: int, base_family: Union[str, Family] = Family.TC,
                      opt: Optional[OptimizerConfig] = None, shared_shape: bool = True,
                      sigma2_policy: Union[Sigma2Policy, str] = Sigma2Policy.RESIDUAL,
                      sigma2: Optional[float] = None, handling: Union[Handling, str] = Handling.ZERO_PAD,
                      bound_rtol: float = 1e-10, shape: Optional[dict] = None):
    """Per-channel scales tuned by evidence on a block-diagonal kernel.

    ``shape`` pins shape hyperparameters by name (e.g. ``{"beta": 0.5}``);
    otherwise they are tuned together with the scales.

    Returns ``(estimate, channel_graph)``; ``channel_graph[i][j]`` is False when
    the scale of channel ``(i, j)`` is exactly zero or sits on its lower bound.
    Impulse responses of absent channels are exact zeros.
    """
    if data.p * data.m < 1:
        raise ValueError("need at least one channel")
    problem = build_fir_regression(data, T, handling)
    fam = BlockDiagFamily(base_family, T, data.p, data.m, shared_shape=shared_shape)
    ep = EvidenceProblem(problem, fam, fixed=shape, sigma2_policy=sigma2_policy, sigma2=sigma2)
    est = empirical_bayes(ep, opt)
    graph = np.ones((data.p, data.m), dtype=bool)
    coeffs = est.g_hat.coeffs.copy()
    for j in range(data.m):
        for i in range(data.p):
            nm = f"scale_{i}_{j}"
            lam = est.hyperparams[nm]
            lo = ep.bounds[nm][0]
            if lam == 0 or lam <= lo * (1.0 + bound_rtol):
                graph[i, j] = False
                coeffs[:, i, j] = 0.0
    est.g_hat = ImpulseResponse(coeffs, est.g_hat.meta)
    est.flags["channel_graph"] = graph.tolist()
    return est, graph
