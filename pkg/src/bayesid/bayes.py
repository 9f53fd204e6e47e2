"""Posterior mean, marginal likelihood and empirical Bayes tuning.

Everything is expressed through the sufficient statistics
``G = Phi^T Phi``, ``c = Phi^T Y``, ``Y^T Y`` and the number of rows, plus a
factor ``K = L L^T`` of the prior covariance. With ``M = sigma2 I + L^T G L``
the quantities needed are

* posterior mean        ``L M^{-1} L^T c``
* posterior covariance  ``sigma2 L M^{-1} L^T``
* log evidence          ``-1/2 [ (Y^T Y - b^T M^{-1} b)/sigma2 + log det Sigma + n log 2 pi ]``

so each evaluation costs O(d^3) regardless of the data length. When the
data are shorter than the factor rank, the data-space form
``K Phi^T (Phi K Phi^T + sigma2 I)^{-1} Y`` is used instead.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.optimize

from .kernels import KernelFamily, KernelMatrix, ScaledKernel, is_psd
from .model import FirRegression, ImpulseResponse, least_squares

log = logging.getLogger(__name__)

EVIDENCE_FAILURE = -1e300
_LOG2PI = np.log(2.0 * np.pi)


class Sigma2Policy(str, enum.Enum):
    FIXED = "fixed"
    PROFILE = "profile"
    RESIDUAL = "residual"


class EvidenceFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Stats:
    G: np.ndarray
    c: np.ndarray
    yy: float
    n: int

    @classmethod
    def from_problem(cls, problem: FirRegression) -> "Stats":
        Phi, Y = problem.Phi, problem.Y
        return cls(Phi.T @ Phi, Phi.T @ Y, float(Y @ Y), Y.size)

    def perturbed(self, row: np.ndarray, y_j: float, h: float) -> "Stats":
        """Statistics after ``Y_j -> Y_j + h`` for a data row ``row = Phi[j]``."""
        return Stats(self.G, self.c + h * row, self.yy + 2.0 * h * y_j + h * h, self.n)


@dataclass
class Estimate:
    g_hat: ImpulseResponse
    posterior_cov: Optional[np.ndarray]
    hyperparams: dict
    log_evidence: float
    dof: float
    sigma2: float
    kernel: Optional[KernelMatrix] = None
    flags: dict = field(default_factory=dict)


# --- factorization helpers ------------------------------------------------

def factor_kernel(K: np.ndarray, rtol: float = 1e-13):
    """Return ``(active, L)`` with ``K[active][:, active] = L L^T``.

    Rows/columns of K that are identically zero (e.g. ARD-zeroed channels)
    are dropped, so their posterior is exactly zero. A plain Cholesky is
    tried first; near-singular kernels fall back to a truncated eigen-factor.
    """
    K = np.asarray(K, dtype=float)
    active = np.flatnonzero(np.any(K != 0, axis=1))
    if active.size == 0:
        return active, np.zeros((0, 0))
    Ka = K[np.ix_(active, active)]
    try:
        return active, np.linalg.cholesky(Ka)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (Ka + Ka.T))
        keep = w > rtol * max(w[-1], 0.0)
        return active, V[:, keep] * np.sqrt(w[keep])


@dataclass
class _Terms:
    log_evidence: float
    g: np.ndarray
    cov_factor: Optional[np.ndarray]  # posterior covariance = F F^T on the active set
    active: np.ndarray
    dof: float
    Minv: Optional[np.ndarray] = None
    L: Optional[np.ndarray] = None


def _terms(stats: Stats, K: np.ndarray, sigma2: float, want_cov: bool = False) -> _Terms:
    d = stats.c.size
    active, L = factor_kernel(K)
    n = stats.n
    r = L.shape[1]
    g = np.zeros(d)
    if r == 0:
        logdet = n * np.log(sigma2)
        quad = stats.yy / sigma2
        return _Terms(-0.5 * (quad + logdet + n * _LOG2PI), g, None, active, 0.0, np.zeros((0, 0)), L)
    GL = stats.G[np.ix_(active, active)] @ L
    A = L.T @ GL
    M = sigma2 * np.eye(r) + 0.5 * (A + A.T)
    b = L.T @ stats.c[active]
    try:
        C = scipy.linalg.cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise EvidenceFailure("factorization of the evidence system failed") from exc
    z = scipy.linalg.cho_solve(C, b)
    Minv = scipy.linalg.cho_solve(C, np.eye(r))
    logdet = (n - r) * np.log(sigma2) + 2.0 * np.sum(np.log(np.diag(C[0])))
    quad = (stats.yy - b @ z) / sigma2
    g[active] = L @ z
    dof = float(r - sigma2 * np.trace(Minv))
    cov_factor = None
    if want_cov:
        cov_factor = L @ np.linalg.cholesky(sigma2 * Minv + 1e-300 * np.eye(r)) if r else L
    return _Terms(float(-0.5 * (quad + logdet + n * _LOG2PI)), g, cov_factor, active, dof, Minv, L)


def _check_sigma2(sigma2):
    if sigma2 is None or not sigma2 > 0 or not np.isfinite(sigma2):
        raise ValueError(f"noise variance must be positive and finite, got {sigma2}")


def _as_matrix(K) -> np.ndarray:
    if isinstance(K, KernelMatrix):
        return K.K
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if not is_psd(K):
        raise ValueError("kernel fails the PSD check")
    return 0.5 * (K + K.T)


# --- posterior mean -------------------------------------------------------

def posterior_mean_data_space(Phi: np.ndarray, Y: np.ndarray, K: np.ndarray, sigma2: float):
    """``K Phi^T (Phi K Phi^T + sigma2 I)^{-1} Y`` and its posterior covariance."""
    PK = Phi @ K
    S = PK @ Phi.T + sigma2 * np.eye(Phi.shape[0])
    C = scipy.linalg.cho_factor(0.5 * (S + S.T), lower=True)
    g = PK.T @ scipy.linalg.cho_solve(C, Y)
    cov = K - PK.T @ scipy.linalg.cho_solve(C, PK)
    return g, 0.5 * (cov + cov.T)


def posterior_mean_param_space(Phi: np.ndarray, Y: np.ndarray, K: np.ndarray, sigma2: float):
    """``(Phi^T Phi + sigma2 K^{-1})^{-1} Phi^T Y`` computed through a factor of K."""
    t = _terms(Stats(Phi.T @ Phi, Phi.T @ Y, float(Y @ Y), Y.size), K, sigma2, want_cov=True)
    d = K.shape[0]
    cov = np.zeros((d, d))
    if t.cov_factor is not None and t.active.size:
        cov[np.ix_(t.active, t.active)] = t.cov_factor @ t.cov_factor.T
    return t.g, cov


def posterior_mean(problem: FirRegression, K, sigma2: float, form: str = "auto",
                   with_cov: bool = True) -> Estimate:
    """Gaussian posterior mean (generalized ridge estimate) for fixed hyperparameters.

    ``form`` is ``"data"``, ``"param"`` or ``"auto"`` (data-space when the
    number of observations is smaller than the number of unknowns).
    """
    _check_sigma2(sigma2)
    Kmat = _as_matrix(K)
    if Kmat.shape[0] != problem.d:
        raise ValueError(f"kernel is {Kmat.shape[0]} x {Kmat.shape[0]}, problem has d = {problem.d}")
    if form == "auto":
        form = "data" if problem.n_obs < problem.d else "param"
    stats = Stats.from_problem(problem)
    if form == "data":
        g, cov = posterior_mean_data_space(problem.Phi, problem.Y, Kmat, sigma2)
        t = _terms(stats, Kmat, sigma2)
        t.dof = _dof_data_space(problem.Phi, Kmat, sigma2)
    elif form == "param":
        t = _terms(stats, Kmat, sigma2, want_cov=with_cov)
        g = t.g
        cov = None
        if with_cov:
            cov = np.zeros_like(Kmat)
            if t.cov_factor is not None and t.active.size:
                cov[np.ix_(t.active, t.active)] = t.cov_factor @ t.cov_factor.T
    else:
        raise ValueError(f"unknown form {form!r}")
    g_hat = ImpulseResponse.from_vector(g, problem.T, problem.p, problem.m)
    spec = K.spec if isinstance(K, KernelMatrix) else None
    return Estimate(g_hat, cov if with_cov else None, {"sigma2": sigma2}, t.log_evidence, t.dof, sigma2,
                    K if isinstance(K, KernelMatrix) else None, {"form": form, "kernel_spec": spec})


def log_marginal_likelihood(problem: FirRegression, K, sigma2: float) -> float:
    """log N(Y; 0, Phi K Phi^T + sigma2 I); ``EVIDENCE_FAILURE`` if factorization fails."""
    _check_sigma2(sigma2)
    Kmat = _as_matrix(K)
    if problem.n_obs < Kmat.shape[0]:
        return _log_evidence_data_space(problem.Phi, problem.Y, Kmat, sigma2)
    try:
        return _terms(Stats.from_problem(problem), Kmat, sigma2).log_evidence
    except EvidenceFailure:
        log.warning("evidence factorization failed")
        return EVIDENCE_FAILURE


def _log_evidence_data_space(Phi, Y, K, sigma2) -> float:
    S = Phi @ K @ Phi.T + sigma2 * np.eye(Phi.shape[0])
    try:
        C = scipy.linalg.cho_factor(0.5 * (S + S.T), lower=True)
    except np.linalg.LinAlgError:
        log.warning("evidence factorization failed")
        return EVIDENCE_FAILURE
    alpha = scipy.linalg.cho_solve(C, Y)
    logdet = 2.0 * np.sum(np.log(np.diag(C[0])))
    return float(-0.5 * (Y @ alpha + logdet + Y.size * _LOG2PI))


def evidence_gradient(stats: Stats, K: np.ndarray, dKs: Sequence[np.ndarray], sigma2: float,
                      with_sigma2: bool = False):
    """Log evidence and its gradient along the kernel derivatives ``dKs``.

    Each component is ``1/2 (a^T dK a - tr(W dK))`` with ``a = Phi^T Sigma^{-1} Y``
    and ``W = Phi^T Sigma^{-1} Phi``. With ``with_sigma2`` the derivative with
    respect to ``log sigma2`` is appended.
    """
    t = _terms(stats, K, sigma2)
    G = stats.G
    a = (stats.c - G @ t.g) / sigma2
    if t.L is not None and t.L.shape[1]:
        GaL = G[:, t.active] @ t.L
        W = (G - GaL @ t.Minv @ GaL.T) / sigma2
    else:
        W = G / sigma2
    grad = [0.5 * (a @ dK @ a - np.sum(W * dK)) for dK in dKs]
    if with_sigma2:
        g = t.g
        rss = stats.yy - 2.0 * stats.c @ g + g @ G @ g
        r = 0 if t.L is None else t.L.shape[1]
        tr_inv = (stats.n - r) / sigma2 + (np.trace(t.Minv) if r else 0.0)
        grad.append(0.5 * sigma2 * (rss / sigma2 ** 2 - tr_inv))
    return t.log_evidence, np.asarray(grad)


def _dof_data_space(Phi: np.ndarray, K: np.ndarray, sigma2: float) -> float:
    # n - sigma2 tr(S^{-1}): stays accurate when Phi^T Phi is singular and K is huge
    S = Phi @ K @ Phi.T + sigma2 * np.eye(Phi.shape[0])
    C = scipy.linalg.cho_factor(0.5 * (S + S.T), lower=True)
    return float(Phi.shape[0] - sigma2 * np.trace(scipy.linalg.cho_solve(C, np.eye(Phi.shape[0]))))


def degrees_of_freedom(problem: FirRegression, K, sigma2: float) -> float:
    """Trace of the hat matrix ``Phi K Phi^T (Phi K Phi^T + sigma2 I)^{-1}``."""
    _check_sigma2(sigma2)
    Kmat = _as_matrix(K)
    if problem.n_obs < Kmat.shape[0]:
        return _dof_data_space(problem.Phi, Kmat, sigma2)
    return _terms(Stats.from_problem(problem), Kmat, sigma2).dof


def estimate_noise_variance(problem: FirRegression, policy: Union[Sigma2Policy, str] = Sigma2Policy.RESIDUAL,
                            family: Optional[KernelFamily] = None) -> float:
    """Noise variance by residual plug-in, profiling, or the stored fixed value."""
    policy = Sigma2Policy(policy)
    if policy is Sigma2Policy.FIXED:
        _check_sigma2(problem.noise_variance)
        return float(problem.noise_variance)
    if policy is Sigma2Policy.RESIDUAL:
        dof = problem.n_obs - problem.d
        if dof <= 0:
            raise ValueError(f"residual plug-in needs more rows than unknowns ({problem.n_obs} <= {problem.d})")
        g = least_squares(problem).vectorize()
        r = problem.Y - problem.Phi @ g
        return float(r @ r / dof)
    if family is None:
        raise ValueError("the profile policy needs a kernel family")
    est = empirical_bayes(EvidenceProblem(problem, family, sigma2_policy=Sigma2Policy.PROFILE))
    return est.sigma2


# --- empirical Bayes ------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    n_starts: int = 5
    xatol: float = 1e-8
    fatol: float = 1e-10
    maxiter: int = 2000
    polish: bool = True
    prune: bool = True
    prune_tol: float = 1e-9

    @classmethod
    def from_dict(cls, obj: Optional[dict]) -> "OptimizerConfig":
        obj = dict(obj or {})
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown optimizer keys {sorted(unknown)}")
        return cls(**obj)


class EvidenceProblem:
    """Hyperparameter tuning problem for one kernel family on one data set.

    ``fixed`` pins named hyperparameters; the others are optimized in log
    space within ``bounds``. Scale bounds not given explicitly are the
    family defaults multiplied by ``scale_ref``, the coefficient variance
    that would explain all output energy (``Y^T Y / tr(Phi^T Phi)``).
    """

    def __init__(self, problem: FirRegression, family: KernelFamily, fixed: Optional[dict] = None,
                 bounds: Optional[dict] = None, sigma2_policy: Union[Sigma2Policy, str] = Sigma2Policy.FIXED,
                 sigma2: Optional[float] = None, start: Optional[dict] = None):
        if family.d != problem.d:
            raise ValueError(f"family dimension {family.d} does not match problem d = {problem.d}")
        self.problem = problem
        self.family = family
        self.fixed = dict(fixed or {})
        unknown = set(self.fixed) - set(family.names)
        if unknown:
            raise ValueError(f"unknown fixed hyperparameters {sorted(unknown)}")
        self.sigma2_policy = Sigma2Policy(sigma2_policy)
        self.stats = Stats.from_problem(problem)
        trG = float(np.trace(self.stats.G))
        self.scale_ref = self.stats.yy / trG if trG > 0 and self.stats.yy > 0 else 1.0
        b = family.default_bounds()
        for idx in family.scale_index:
            name = family.names[idx]
            lo, hi = b[name]
            b[name] = (lo * self.scale_ref, hi * self.scale_ref)
        b.update(bounds or {})
        self.bounds = b
        self.start = dict(start or {})
        if self.sigma2_policy is Sigma2Policy.FIXED:
            s2 = sigma2 if sigma2 is not None else problem.noise_variance
            _check_sigma2(s2)
            self.sigma2 = float(s2)
        elif self.sigma2_policy is Sigma2Policy.RESIDUAL:
            self.sigma2 = float(sigma2) if sigma2 is not None else estimate_noise_variance(problem)
        else:
            self.sigma2 = None
            ybar = self.stats.yy / max(self.stats.n, 1)
            self.bounds.setdefault("sigma2", (1e-8 * ybar + 1e-300, 10.0 * ybar + 1e-300))
        self.free = [nm for nm in family.names if nm not in self.fixed]
        for nm in self.free + (["sigma2"] if self.sigma2 is None else []):
            lo, hi = self.bounds[nm]
            if not (0 < lo < hi < np.inf):
                raise ValueError(f"bounds for {nm} must be finite with 0 < lo < hi, got {(lo, hi)}")

    @property
    def opt_names(self) -> list:
        return self.free + (["sigma2"] if self.sigma2 is None else [])

    def full(self, values: dict) -> np.ndarray:
        merged = {**self.fixed, **values}
        return np.array([merged[nm] for nm in self.family.names], dtype=float)

    def unpack(self, z: np.ndarray):
        vals = dict(zip(self.opt_names, np.exp(z)))
        sigma2 = vals.pop("sigma2", self.sigma2)
        return vals, sigma2

    def evaluate(self, values: dict, sigma2: float, stats: Optional[Stats] = None) -> float:
        try:
            return _terms(stats or self.stats, self.family.matrix(self.full(values)), sigma2).log_evidence
        except EvidenceFailure:
            return EVIDENCE_FAILURE

    def objective(self, z, stats: Optional[Stats] = None, zeroed=()):
        """Negative log evidence and its gradient in log-parameter space."""
        vals, sigma2 = self.unpack(z)
        for nm in zeroed:
            vals[nm] = 0.0
        x = self.full(vals)
        K = self.family.matrix(x)
        dK_all = self.family.log_grads(x)
        idx = [self.family.names.index(nm) for nm in self.free]
        try:
            lp, grad = evidence_gradient(stats or self.stats, K, [dK_all[i] for i in idx], sigma2,
                                         with_sigma2=self.sigma2 is None)
        except EvidenceFailure:
            return -EVIDENCE_FAILURE, np.zeros(len(z))
        for k, nm in enumerate(self.free):
            if nm in zeroed:
                grad[k] = 0.0
        return -lp, -grad

    def log_bounds(self):
        return [(np.log(self.bounds[nm][0]), np.log(self.bounds[nm][1])) for nm in self.opt_names]

    def start_points(self, n_starts: int) -> list:
        """Deterministic Latin-square starts over a central box of the bounds."""
        lb = self.log_bounds()
        scale_names = {self.family.names[i] for i in self.family.scale_index}
        pts = []
        for s in range(n_starts):
            z = []
            for j, nm in enumerate(self.opt_names):
                lo, hi = lb[j]
                if nm in scale_names:
                    lo = max(lo, np.log(1e-3 * self.scale_ref))
                    hi = min(hi, np.log(1e2 * self.scale_ref))
                if nm == "sigma2":
                    ybar = self.stats.yy / max(self.stats.n, 1)
                    lo, hi = max(lo, np.log(1e-3 * ybar)), min(hi, np.log(ybar))
                frac = ((s + j * (1 + n_starts // 2)) % n_starts + 0.5) / n_starts
                z.append(lo + frac * (hi - lo))
            pts.append(np.array(z))
        if self.start:
            z0 = []
            lbs = self.log_bounds()
            for j, nm in enumerate(self.opt_names):
                v = self.start.get(nm)
                z0.append(np.clip(np.log(v), *lbs[j]) if v is not None and v > 0 else 0.5 * sum(lbs[j]))
            pts.insert(0, np.array(z0))
        return pts


def _local_search(ep: EvidenceProblem, z0, opt: OptimizerConfig, stats=None, zeroed=()):
    bounds = ep.log_bounds()
    if len(z0) == 0:
        return z0, ep.objective(z0, stats, zeroed)[0], True
    f = lambda z: ep.objective(z, stats, zeroed)[0]
    res = scipy.optimize.minimize(f, z0, method="Nelder-Mead", bounds=bounds,
                                  options={"xatol": opt.xatol, "fatol": opt.fatol, "maxiter": opt.maxiter,
                                           "adaptive": len(z0) > 2})
    z, fz, ok = res.x, res.fun, bool(res.success)
    if opt.polish:
        res2 = scipy.optimize.minimize(lambda z: ep.objective(z, stats, zeroed), z, jac=True, method="L-BFGS-B",
                                       bounds=bounds, options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 500})
        if res2.fun <= fz:
            z, fz = res2.x, res2.fun
    return z, fz, ok


def _prune(ep: EvidenceProblem, z, fz, opt: OptimizerConfig, stats=None):
    """Set scale hyperparameters to exactly zero when that does not lower the evidence."""
    zeroed = []
    scale_names = [ep.family.names[i] for i in ep.family.scale_index if ep.family.names[i] in ep.free]
    changed = True
    while changed:
        changed = False
        for nm in scale_names:
            if nm in zeroed:
                continue
            trial = zeroed + [nm]
            f_try = ep.objective(z, stats, trial)[0]
            if f_try <= fz + opt.prune_tol * (1.0 + abs(fz)):
                zeroed = trial
                z, fz, _ = _local_search(ep, z, replace(opt, polish=True), stats, zeroed)
                changed = True
    return z, fz, zeroed


def tune(ep: EvidenceProblem, opt: Optional[OptimizerConfig] = None, stats: Optional[Stats] = None,
         starts: Optional[list] = None):
    """Maximize the evidence; return ``(values, sigma2, log_evidence, flags)``."""
    opt = opt or OptimizerConfig()
    starts = starts if starts is not None else ep.start_points(opt.n_starts)
    best = None
    n_fail = 0
    for z0 in starts:
        z, fz, ok = _local_search(ep, np.asarray(z0, dtype=float), opt, stats)
        if not np.isfinite(fz) or fz >= -EVIDENCE_FAILURE:
            n_fail += 1
            continue
        if best is None or fz < best[1]:
            best = (z, fz, ok)
    if best is None:
        raise EvidenceFailure("every optimizer start failed")
    z, fz, ok = best
    zeroed = []
    if opt.prune:
        z, fz, zeroed = _prune(ep, z, fz, opt, stats)
    vals, sigma2 = ep.unpack(z)
    for nm in zeroed:
        vals[nm] = 0.0
    flags = {"converged": ok, "failed_starts": n_fail, "zeroed": list(zeroed),
             "at_bounds": [nm for nm, (lo, hi) in zip(ep.opt_names, ep.log_bounds())
                           if nm not in zeroed and (np.isclose(z[ep.opt_names.index(nm)], lo, atol=1e-10)
                                                    or np.isclose(z[ep.opt_names.index(nm)], hi, atol=1e-10))]}
    return vals, sigma2, -fz, flags


def empirical_bayes(ep: EvidenceProblem, opt: Optional[OptimizerConfig] = None) -> Estimate:
    """Evidence-maximizing hyperparameters plugged into the posterior mean."""
    vals, sigma2, lp, flags = tune(ep, opt)
    x = ep.full(vals)
    K = ep.family.kernel(x) if _spec_ok(ep.family, x) else KernelMatrix(ep.family.matrix(x))
    est = posterior_mean(ep.problem, K, sigma2)
    hyper = {nm: float(v) for nm, v in zip(ep.family.names, x)}
    hyper["sigma2"] = float(sigma2)
    est.hyperparams = hyper
    est.log_evidence = lp
    est.flags.update(flags)
    est.flags["sigma2_policy"] = ep.sigma2_policy.value
    return est


def _spec_ok(family, x) -> bool:
    try:
        return family.spec(x) is not None
    except (ValueError, TypeError, KeyError):
        return False


# --- excess degrees of freedom -------------------------------------------

def _tune_scales(ep: EvidenceProblem, stats: Stats, shape_fixed: dict, z_start: np.ndarray,
                 opt: OptimizerConfig):
    """Retune only the free scale hyperparameters, warm-started; shape held fixed."""
    sub = EvidenceProblem.__new__(EvidenceProblem)
    sub.__dict__.update(ep.__dict__)
    sub.fixed = {**ep.fixed, **shape_fixed}
    sub.free = [nm for nm in ep.family.names if nm not in sub.fixed]
    sub.stats = stats
    if len(sub.free) == 1 and sub.sigma2 is not None:
        return _tune_1d(sub, stats, float(z_start[0]), opt)
    vals, sigma2, _, _ = tune(sub, replace(opt, n_starts=1), stats, starts=[z_start])
    return np.array([vals[nm] for nm in sub.free]), sub


def _tune_1d(sub: EvidenceProblem, stats: Stats, z0: float, opt: OptimizerConfig):
    """Single scale: locate the stationary point of the evidence by root finding."""
    lo, hi = sub.log_bounds()[0]
    dfun = lambda z: sub.objective(np.array([z]), stats)[1][0]
    fun = lambda z: sub.objective(np.array([z]), stats)[0]
    # f decreasing then increasing around the optimum: bracket a sign change of f'
    a, b = max(lo, z0 - 0.5), min(hi, z0 + 0.5)
    while dfun(a) > 0 and a > lo:
        a = max(lo, a - 2.0)
    while dfun(b) < 0 and b < hi:
        b = min(hi, b + 2.0)
    if dfun(a) <= 0 <= dfun(b):
        z = scipy.optimize.brentq(dfun, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    else:
        z = a if fun(a) < fun(b) else b
    lam = np.exp(z)
    if opt.prune and sub.objective(np.array([z]), stats, zeroed=tuple(sub.free))[0] <= fun(z) + opt.prune_tol * (1 + abs(fun(z))):
        lam = 0.0
    return np.array([lam]), sub


def excess_dof_at(ep: EvidenceProblem, Y: Optional[np.ndarray] = None, h: Optional[float] = None,
                  opt: Optional[OptimizerConfig] = None, include_shape: bool = False) -> float:
    """Trace of the hyperparameter-sensitivity term of the degrees of freedom at one data vector.

    Central differences: each ``Y_j`` is moved by ``+-h``, the scale
    hyperparameters are retuned (shape held at the unperturbed optimum unless
    ``include_shape``), and the j-th fitted output is recomputed with the
    *unperturbed* data, so only the path through the hyperparameters counts.
    """
    opt = opt or OptimizerConfig()
    problem = ep.problem if Y is None else ep.problem.with_outputs(Y)
    if not ep.free:
        return 0.0
    if ep.sigma2_policy is Sigma2Policy.PROFILE:
        raise ValueError("excess degrees of freedom are defined for a known noise variance")
    base = EvidenceProblem.__new__(EvidenceProblem)
    base.__dict__.update(ep.__dict__)
    base.problem = problem
    base.stats = Stats.from_problem(problem)
    vals, sigma2, _, _ = tune(base, opt)
    x0 = base.full(vals)
    tuned_names = list(base.free)
    if include_shape:
        shape_fixed = {}
    else:
        scale_names = {base.family.names[i] for i in base.family.scale_index}
        shape_fixed = {nm: vals[nm] for nm in base.free if nm not in scale_names}
    tuned = [nm for nm in tuned_names if nm not in shape_fixed]
    if not tuned:
        return 0.0
    z_start = np.log(np.maximum([vals[nm] for nm in tuned], base.bounds[tuned[0]][0]))
    Y0 = problem.Y
    Phi = problem.Phi
    stats0 = base.stats
    if h is None:
        sd = float(np.std(Y0))
        h = 1e-4 * (sd if sd > 0 else 1.0)
    total = 0.0
    for j in range(Y0.size):
        outs = []
        for sgn in (1.0, -1.0):
            st = stats0.perturbed(Phi[j], Y0[j], sgn * h)
            lam, sub = _tune_scales(base, st, shape_fixed, z_start, opt)
            xv = base.full({**shape_fixed, **dict(zip(sub.free, lam))})
            g = _terms(stats0, base.family.matrix(xv), sigma2).g
            outs.append(Phi[j] @ g)
        total += (outs[0] - outs[1]) / (2.0 * h)
    return float(total)


def excess_degrees_of_freedom(ep: EvidenceProblem, seed: int = 0, n_rep: int = 1, h: Optional[float] = None,
                              truth: Optional[np.ndarray] = None, opt: Optional[OptimizerConfig] = None,
                              include_shape: bool = False) -> float:
    """Monte Carlo average of :func:`excess_dof_at` over replicated data.

    Replicates are ``Phi g + sigma E`` with ``g = truth`` when given, otherwise
    the empirical Bayes estimate on the stored data (parametric bootstrap).
    Replicates whose optimization fails are dropped and counted in the log.
    """
    if n_rep < 1:
        raise ValueError("n_rep must be >= 1")
    if not ep.free:
        return 0.0
    sigma2 = ep.sigma2
    if sigma2 is None:
        raise ValueError("excess degrees of freedom need a known noise variance")
    if truth is None:
        truth = empirical_bayes(ep, opt).g_hat.vectorize()
    mean = ep.problem.Phi @ np.asarray(truth, dtype=float)
    rng = np.random.default_rng(seed)
    vals = []
    dropped = 0
    for _ in range(n_rep):
        Y = mean + np.sqrt(sigma2) * rng.standard_normal(mean.size)
        try:
            vals.append(excess_dof_at(ep, Y, h, opt, include_shape))
        except EvidenceFailure:
            dropped += 1
    if dropped:
        log.warning("excess dof: dropped %d of %d replicates", dropped, n_rep)
    if not vals:
        raise EvidenceFailure("all replicates failed")
    return float(np.mean(vals))


def scalar_problem(Phi, Y, sigma2: float, T: int = 1) -> FirRegression:
    """Wrap a generic linear model ``Y = Phi g + E`` as a one-channel FIR problem."""
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    if Phi.shape[0] != np.size(Y):
        Phi = Phi.T
    return FirRegression(np.asarray(Y, dtype=float), Phi, Phi.shape[1], 1, 1, np.size(Y), sigma2)


def fixed_shape_problem(problem: FirRegression, Kbar, sigma2: Optional[float] = None,
                        bounds: Optional[dict] = None) -> EvidenceProblem:
    """Evidence problem tuning only the scale of ``lam * Kbar``."""
    fam = ScaledKernel(Kbar, T=problem.T, p=problem.p, m=problem.m)
    return EvidenceProblem(problem, fam, bounds=bounds, sigma2=sigma2)


def holdout_split(data, fraction: float = 0.7):
    """Split an :class:`IODataset` into leading estimation and trailing validation parts."""
    from .model import IODataset

    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n = int(round(fraction * data.N))
    if n < 1 or n >= data.N:
        raise ValueError("split leaves an empty part")
    return (IODataset(data.inputs[:n], data.outputs[:n], data.sample_time),
            IODataset(data.inputs[n:], data.outputs[n:], data.sample_time))
