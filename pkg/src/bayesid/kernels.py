"""Prior covariances (kernels) for impulse responses.

Two layers live here. Plain constructors (``tc_kernel``, ``diag_exp_kernel``,
...) return a validated :class:`KernelMatrix`. Parametric families
(``TCFamily``, ``BlockDiagFamily``, ...) map a hyperparameter vector to a
kernel and to its derivatives with respect to the *log* hyperparameters;
the evidence optimizer in :mod:`bayesid.bayes` works with those.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .model import channel_slice

PSD_RTOL = 1e-10
SYM_ATOL = 1e-12


class Family(str, enum.Enum):
    AKAIKE = "AkaikeSmoothness"
    DIAG_EXP = "DiagExp"
    POWER_DECAY = "PowerDecay"
    TC = "TC"
    BLOCK_DIAG = "BlockDiagMIMO"
    CONIC = "ConicCombo"
    STABLE_HANKEL = "StableHankelPrecision"


@dataclass(frozen=True)
class KernelSpec:
    """Serializable description of a kernel.

    ``scale`` is a float, or a p x m nested list for ``BlockDiagMIMO``.
    ``shape`` holds the family-specific shape hyperparameters by name
    (``beta`` and ``Tc`` for TC, ``rho`` for DiagExp, ``alpha`` for
    PowerDecay; nested specs for the composite families).
    """

    family: Family
    scale: Union[float, list]
    shape: dict = field(default_factory=dict)
    dims: tuple = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be (T, p, m) with positive entries, got {self.dims}")
        scales = np.atleast_1d(np.asarray(self.scale, dtype=float))
        if np.any(scales < 0) or not np.all(np.isfinite(scales)):
            raise ValueError("kernel scales must be finite and nonnegative")
        _check_shape(self.family, self.shape)

    @property
    def T(self) -> int:
        return self.dims[0]

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "scale": _jsonable(self.scale),
            "shape": _jsonable(self.shape),
            "dims": list(self.dims),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "KernelSpec":
        missing = {"family", "scale", "dims"} - set(obj)
        if missing:
            raise ValueError(f"kernel spec is missing fields {sorted(missing)}")
        return cls(Family(obj["family"]), obj["scale"], dict(obj.get("shape", {})), tuple(obj["dims"]))


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, KernelSpec):
        return x.to_dict()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def _check_shape(family: Family, shape: dict) -> None:
    if family is Family.TC:
        beta = np.atleast_1d(np.asarray(shape.get("beta", 1.0), dtype=float))
        if np.any(beta <= 0):
            raise ValueError("TC kernel needs beta > 0")
        if shape.get("Tc", 1.0) <= 0:
            raise ValueError("TC kernel needs Tc > 0")
    elif family is Family.DIAG_EXP:
        rho = np.atleast_1d(np.asarray(shape.get("rho", 0.5), dtype=float))
        if np.any(rho <= 0) or np.any(rho >= 1):
            raise ValueError("DiagExp kernel needs 0 < rho < 1")
    elif family is Family.POWER_DECAY:
        alpha = np.atleast_1d(np.asarray(shape.get("alpha", 2.0), dtype=float))
        if np.any(alpha <= 1):
            raise ValueError("PowerDecay kernel needs alpha > 1 (l1-summable realizations)")


@dataclass(frozen=True)
class KernelMatrix:
    """A symmetric PSD d x d prior covariance and the spec that produced it."""

    K: np.ndarray
    spec: Optional[KernelSpec] = None

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        if K.shape[0] != K.shape[1]:
            raise ValueError(f"kernel must be square, got {K.shape}")
        if not np.all(np.isfinite(K)):
            raise ValueError("kernel contains non-finite entries")
        scale = max(np.abs(K).max(), 1.0) if K.size else 1.0
        if np.abs(K - K.T).max(initial=0.0) > SYM_ATOL * scale:
            raise ValueError("kernel is not symmetric")
        K = 0.5 * (K + K.T)
        if not is_psd(K):
            raise ValueError("kernel fails the PSD check")
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    @property
    def d(self) -> int:
        return self.K.shape[0]


def is_psd(K: np.ndarray, rtol: float = PSD_RTOL) -> bool:
    """Smallest eigenvalue >= -rtol * largest eigenvalue magnitude."""
    K = 0.5 * (np.asarray(K, dtype=float) + np.asarray(K, dtype=float).T)
    if K.size == 0:
        return True
    w = np.linalg.eigvalsh(K)
    top = max(abs(w[-1]), abs(w[0]))
    return bool(w[0] >= -rtol * top)


def _lags(T: int) -> np.ndarray:
    if T < 1:
        raise ValueError("T must be >= 1")
    return np.arange(1, T + 1, dtype=float)


def akaike_smoothness_kernel(T: int, gamma: float) -> KernelMatrix:
    """``(1/gamma) diag(1, 1/4, ..., 1/T^2)``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    lam = 1.0 / gamma
    spec = KernelSpec(Family.AKAIKE, lam, {}, (T, 1, 1))
    # same arithmetic as power_decay_kernel(T, 1/gamma, 2)
    return KernelMatrix(lam * np.diag(_lags(T) ** -2.0), spec)


def diag_exp_kernel(T: int, lam: float, rho: float) -> KernelMatrix:
    """``lam diag(1, rho, ..., rho^(T-1))``; the stochastic-embedding prior."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    spec = KernelSpec(Family.DIAG_EXP, lam, {"rho": rho}, (T, 1, 1))
    return KernelMatrix(lam * np.diag(rho ** (_lags(T) - 1)), spec)


def power_decay_kernel(T: int, lam: float, alpha: float) -> KernelMatrix:
    """``lam diag(1/k^alpha)``, the stationary Minnesota-style decay."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    spec = KernelSpec(Family.POWER_DECAY, lam, {"alpha": alpha}, (T, 1, 1))
    return KernelMatrix(lam * np.diag(_lags(T) ** -alpha), spec)


def tc_kernel(T: int, lam: float, beta: float, Tc: float = 1.0) -> KernelMatrix:
    """Tuned-correlated kernel ``lam * min(exp(-beta i Tc), exp(-beta j Tc))``."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    if not beta > 0:
        raise ValueError("beta must be positive")
    if not Tc > 0:
        raise ValueError("Tc must be positive")
    spec = KernelSpec(Family.TC, lam, {"beta": beta, "Tc": Tc}, (T, 1, 1))
    return KernelMatrix(lam * _tc_unit(T, beta, Tc), spec)


def _tc_unit(T: int, beta: float, Tc: float = 1.0) -> np.ndarray:
    k = _lags(T)
    return np.exp(-beta * Tc * np.maximum.outer(k, k))


@dataclass(frozen=True)
class BasisExpansion:
    """Columns ``vectors[:, i]`` = psi_i with ``sum_i psi_i psi_i^T ~ K``."""

    vectors: np.ndarray
    weights_l1: np.ndarray

    @property
    def B(self) -> int:
        return self.vectors.shape[1]

    def kernel(self, B: Optional[int] = None) -> np.ndarray:
        P = self.vectors if B is None else self.vectors[:, :B]
        return P @ P.T


def tc_basis(T: int, beta: float, Tc: float = 1.0, B: int = 500) -> BasisExpansion:
    """Karhunen-Loeve style basis of the unit-scale TC kernel.

    psi_0 is the warped time ``tau_k = exp(-beta k Tc)``; psi_i for i >= 1 is
    the Brownian-bridge sine basis evaluated at ``tau_k``. Lags run k = 1..T
    so the partial sums converge to ``tc_kernel(T, 1, beta, Tc)``.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    tau = np.exp(-beta * Tc * _lags(T))
    i = np.arange(1, B, dtype=float)
    vecs = np.empty((T, B))
    vecs[:, 0] = tau
    vecs[:, 1:] = np.sqrt(2.0) * np.sin(np.pi * np.outer(tau, i)) / (np.pi * i)
    return BasisExpansion(vecs, np.abs(vecs).sum(axis=0))


def ar1_factor(T: int, c: float, lam_ar: float) -> np.ndarray:
    """Lower-level factor L with ``g = L n`` for the backward AR(1) recursion.

    ``g_T = sqrt(c lam^T) n_0`` and ``g_{k-1} = g_k + sqrt(c lam^(k-1) (1-lam)) n_k``;
    rows are lags 1..T, column 0 drives the endpoint, column l the innovation n_l.
    """
    L = np.zeros((T, T + 1))
    L[:, 0] = np.sqrt(c * lam_ar ** T)
    for l in range(1, T + 1):
        # n_l enters every g_k with k < l
        L[: l - 1, l] = np.sqrt(c * lam_ar ** (l - 1) * (1.0 - lam_ar))
    return L


def ar1_kernel(T: int, c: float, lam_ar: float) -> KernelMatrix:
    """Covariance of the backward AR(1) recursion on lags 1..T (sampling time 1)."""
    if not c > 0:
        raise ValueError("c must be positive")
    if not 0 < lam_ar < 1:
        raise ValueError("lam_ar must lie in (0, 1)")
    L = ar1_factor(T, c, lam_ar)
    spec = KernelSpec(Family.TC, c, {"beta": -np.log(lam_ar), "Tc": 1.0}, (T, 1, 1))
    return KernelMatrix(L @ L.T, spec)


def ar1_precision(T: int, c: float, lam_ar: float) -> np.ndarray:
    """Tridiagonal inverse of :func:`ar1_kernel`.

    The process is a Brownian motion observed at the decreasing variances
    ``v_k = c lam^k``, so its precision is the usual random-walk band matrix.
    """
    if not c > 0 or not 0 < lam_ar < 1:
        raise ValueError("need c > 0 and 0 < lam_ar < 1")
    v = c * lam_ar ** _lags(T)
    t = v[::-1]  # increasing "times"
    inc = np.diff(np.concatenate([[0.0], t]))
    P = np.zeros((T, T))
    for a in range(T):
        P[a, a] = 1.0 / inc[a] + (1.0 / inc[a + 1] if a + 1 < T else 0.0)
        if a + 1 < T:
            P[a, a + 1] = P[a + 1, a] = -1.0 / inc[a + 1]
    return P[::-1, ::-1].copy()


def make_kernel(spec: KernelSpec) -> KernelMatrix:
    """Realize any serializable spec as a kernel matrix."""
    fam = spec.family
    T = spec.T
    if fam is Family.BLOCK_DIAG:
        T, p, m = spec.dims
        scales = np.asarray(spec.scale, dtype=float).reshape(p, m)
        base = Family(spec.shape.get("base", "TC"))
        grid = [[_channel_spec(base, scales[i, j], spec.shape, i, j, T) for j in range(m)] for i in range(p)]
        return block_diag_mimo(grid)
    if fam is Family.CONIC:
        kernels = [make_kernel(s if isinstance(s, KernelSpec) else KernelSpec.from_dict(s))
                   for s in spec.shape["kernels"]]
        out = conic_combination(kernels, spec.shape["weights"])
        return KernelMatrix(float(spec.scale) * out.K, spec)
    if fam is Family.STABLE_HANKEL:
        from .structure import StableHankelSpec, stable_hankel_precision

        sh = StableHankelSpec.from_kernel_spec(spec)
        return KernelMatrix(np.linalg.inv(stable_hankel_precision(sh)), spec)
    lam = float(spec.scale)
    if lam == 0:
        return KernelMatrix(np.zeros((T, T)), spec)
    if fam is Family.AKAIKE:
        K = akaike_smoothness_kernel(T, 1.0 / lam).K
    elif fam is Family.DIAG_EXP:
        K = diag_exp_kernel(T, lam, spec.shape["rho"]).K
    elif fam is Family.POWER_DECAY:
        K = power_decay_kernel(T, lam, spec.shape["alpha"]).K
    elif fam is Family.TC:
        K = tc_kernel(T, lam, spec.shape["beta"], spec.shape.get("Tc", 1.0)).K
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unknown family {fam}")
    return KernelMatrix(K, spec)


def _channel_spec(base: Family, scale: float, shape: dict, i: int, j: int, T: int) -> KernelSpec:
    sub = {}
    for key, val in shape.items():
        if key == "base":
            continue
        arr = np.asarray(val, dtype=float)
        sub[key] = float(arr[i, j]) if arr.ndim == 2 else float(arr)
    return KernelSpec(base, float(scale), sub, (T, 1, 1))


def block_diag_mimo(specs) -> KernelMatrix:
    """Block-diagonal MIMO kernel from a p x m grid of scalar-channel kernels.

    Grid entries may be :class:`KernelSpec` or :class:`KernelMatrix`; block
    ``(i, j)`` lands on the channel-major index range of pair ``(i, j)``.
    """
    grid = [list(row) for row in specs]
    p = len(grid)
    if p == 0 or any(len(row) != len(grid[0]) for row in grid):
        raise ValueError("kernel grid must be a nonempty rectangular p x m grid")
    m = len(grid[0])
    blocks = [[b if isinstance(b, KernelMatrix) else make_kernel(b) for b in row] for row in grid]
    T = blocks[0][0].d
    if any(b.d != T for row in blocks for b in row):
        raise ValueError("all channel kernels must share the same T")
    K = np.zeros((p * m * T, p * m * T))
    for i in range(p):
        for j in range(m):
            s = channel_slice(i, j, T, p)
            K[s, s] = blocks[i][j].K
    scales = [[float(b.spec.scale) if b.spec is not None else 1.0 for b in row] for row in blocks]
    base = blocks[0][0].spec.family.value if blocks[0][0].spec is not None else "TC"
    shape = {"base": base}
    if blocks[0][0].spec is not None:
        for key in blocks[0][0].spec.shape:
            shape[key] = [[b.spec.shape.get(key) for b in row] for row in blocks]
    try:
        spec = KernelSpec(Family.BLOCK_DIAG, scales, shape, (T, p, m))
    except (ValueError, TypeError):
        spec = None
    return KernelMatrix(K, spec)


def conic_combination(kernels: Sequence[KernelMatrix], weights: Sequence[float]) -> KernelMatrix:
    """Nonnegative combination ``sum_i w_i K_i``."""
    kernels = list(kernels)
    w = np.asarray(weights, dtype=float)
    if len(kernels) == 0 or w.shape != (len(kernels),):
        raise ValueError("need one weight per kernel")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative and not all zero")
    d = kernels[0].d
    if any(k.d != d for k in kernels):
        raise ValueError("kernels must have equal dimensions")
    K = np.zeros((d, d))
    for wi, k in zip(w, kernels):
        K = K + wi * k.K
    spec = None
    if all(k.spec is not None for k in kernels):
        spec = KernelSpec(Family.CONIC, 1.0, {"kernels": [k.spec.to_dict() for k in kernels],
                                              "weights": w.tolist()}, kernels[0].spec.dims)
    return KernelMatrix(K, spec)


# --- parametric families -------------------------------------------------

class KernelFamily:
    """A kernel parametrized by a vector of positive hyperparameters.

    Subclasses define ``names``, ``default_bounds``, ``matrix(x)`` and
    ``log_grads(x)`` (derivatives of K with respect to ``log x_i``).
    ``scale_index`` lists the entries that are pure scale factors and may be
    set to exactly zero (ARD pruning).
    """

    names: tuple = ()
    scale_index: tuple = (0,)

    def __init__(self, T: int, p: int = 1, m: int = 1):
        self.T, self.p, self.m = int(T), int(p), int(m)

    @property
    def d(self) -> int:
        return self.T * self.p * self.m

    def default_bounds(self) -> dict:
        raise NotImplementedError

    def matrix(self, x) -> np.ndarray:
        raise NotImplementedError

    def log_grads(self, x) -> list:
        raise NotImplementedError

    def spec(self, x) -> KernelSpec:
        raise NotImplementedError

    def kernel(self, x) -> KernelMatrix:
        return KernelMatrix(self.matrix(x), self.spec(x))


class ScaledKernel(KernelFamily):
    """``lam * Kbar`` for a fixed-shape PSD matrix ``Kbar``."""

    names = ("scale",)

    def __init__(self, Kbar, base_spec: Optional[KernelSpec] = None, T=None, p: int = 1, m: int = 1):
        if isinstance(Kbar, KernelMatrix):
            base_spec = base_spec or Kbar.spec
            Kbar = Kbar.K
        Kbar = np.asarray(Kbar, dtype=float)
        super().__init__(T if T is not None else Kbar.shape[0] // (p * m), p, m)
        self.Kbar = Kbar
        self.base_spec = base_spec

    def default_bounds(self):
        return {"scale": (1e-10, 1e6)}

    def matrix(self, x):
        return float(x[0]) * self.Kbar

    def log_grads(self, x):
        return [float(x[0]) * self.Kbar]

    def spec(self, x):
        if self.base_spec is None or isinstance(self.base_spec.scale, list):
            return None
        d = self.base_spec.to_dict()
        d["scale"] = float(x[0]) * float(d["scale"])
        return KernelSpec.from_dict(d)


class TCFamily(KernelFamily):
    names = ("scale", "beta")

    def __init__(self, T: int, Tc: float = 1.0):
        super().__init__(T)
        self.Tc = float(Tc)
        k = _lags(T)
        self._mx = np.maximum.outer(k, k) * self.Tc

    def default_bounds(self):
        return {"scale": (1e-10, 1e6), "beta": (1e-3 / self.Tc, 10.0 / self.Tc)}

    def matrix(self, x):
        return x[0] * np.exp(-x[1] * self._mx)

    def log_grads(self, x):
        K = self.matrix(x)
        return [K, -x[1] * self._mx * K]

    def spec(self, x):
        return KernelSpec(Family.TC, float(x[0]), {"beta": float(x[1]), "Tc": self.Tc}, (self.T, 1, 1))


class DiagExpFamily(KernelFamily):
    names = ("scale", "rho")

    def default_bounds(self):
        return {"scale": (1e-10, 1e6), "rho": (1e-3, 0.999)}

    def matrix(self, x):
        return x[0] * np.diag(x[1] ** (_lags(self.T) - 1))

    def log_grads(self, x):
        K = self.matrix(x)
        return [K, K * (_lags(self.T) - 1)[:, None]]

    def spec(self, x):
        return KernelSpec(Family.DIAG_EXP, float(x[0]), {"rho": float(x[1])}, (self.T, 1, 1))


class PowerDecayFamily(KernelFamily):
    names = ("scale", "alpha")

    def default_bounds(self):
        return {"scale": (1e-10, 1e6), "alpha": (1.01, 10.0)}

    def matrix(self, x):
        return x[0] * np.diag(_lags(self.T) ** -x[1])

    def log_grads(self, x):
        K = self.matrix(x)
        return [K, -x[1] * np.log(_lags(self.T))[:, None] * K]

    def spec(self, x):
        return KernelSpec(Family.POWER_DECAY, float(x[0]), {"alpha": float(x[1])}, (self.T, 1, 1))


class AkaikeFamily(KernelFamily):
    """Akaike smoothness prior with its only hyperparameter as a scale ``1/gamma``."""

    names = ("scale",)

    def default_bounds(self):
        return {"scale": (1e-10, 1e6)}

    def matrix(self, x):
        return x[0] * np.diag(_lags(self.T) ** -2.0)

    def log_grads(self, x):
        return [self.matrix(x)]

    def spec(self, x):
        return KernelSpec(Family.AKAIKE, float(x[0]), {}, (self.T, 1, 1))


_SCALAR_FAMILIES = {
    Family.TC: TCFamily,
    Family.DIAG_EXP: DiagExpFamily,
    Family.POWER_DECAY: PowerDecayFamily,
    Family.AKAIKE: AkaikeFamily,
}


def scalar_family(family: Union[Family, str], T: int, **kw) -> KernelFamily:
    family = Family(family)
    if family not in _SCALAR_FAMILIES:
        raise ValueError(f"{family.value} is not a single-channel family")
    return _SCALAR_FAMILIES[family](T, **kw)


class BlockDiagFamily(KernelFamily):
    """Block-diagonal MIMO family with per-channel scales.

    Parameters are ``scale_i_j`` for every channel followed by either one
    shared shape parameter or one per channel.
    """

    def __init__(self, base: Union[Family, str], T: int, p: int, m: int, shared_shape: bool = True, **kw):
        super().__init__(T, p, m)
        self.base = scalar_family(base, T, **kw)
        self.shared_shape = shared_shape
        self.n_ch = p * m
        shape_names = self.base.names[1:]
        names = [f"scale_{i}_{j}" for j in range(m) for i in range(p)]
        if shape_names:
            if shared_shape:
                names += list(shape_names)
            else:
                names += [f"{s}_{i}_{j}" for j in range(m) for i in range(p) for s in shape_names]
        self.names = tuple(names)
        self.scale_index = tuple(range(self.n_ch))
        self._n_shape = len(shape_names)

    def default_bounds(self):
        bb = self.base.default_bounds()
        out = {}
        for name in self.names:
            key = name.split("_")[0]
            out[name] = bb[key]
        return out

    def _channel_params(self, x, c: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ns = self._n_shape
        if ns == 0:
            shape = []
        elif self.shared_shape:
            shape = x[self.n_ch:self.n_ch + ns]
        else:
            shape = x[self.n_ch + c * ns:self.n_ch + (c + 1) * ns]
        return np.concatenate([[x[c]], shape])

    def _channels(self):
        # channel index c follows the column-major pair order
        for j in range(self.m):
            for i in range(self.p):
                yield j * self.p + i, i, j

    def matrix(self, x):
        K = np.zeros((self.d, self.d))
        for c, i, j in self._channels():
            s = channel_slice(i, j, self.T, self.p)
            xc = self._channel_params(x, c)
            if xc[0] > 0:
                K[s, s] = self.base.matrix(xc)
        return K

    def log_grads(self, x):
        grads = [np.zeros((self.d, self.d)) for _ in self.names]
        ns = self._n_shape
        for c, i, j in self._channels():
            s = channel_slice(i, j, self.T, self.p)
            xc = self._channel_params(x, c)
            if xc[0] == 0:
                continue
            g = self.base.log_grads(xc)
            grads[c][s, s] = g[0]
            for a in range(ns):
                idx = self.n_ch + a if self.shared_shape else self.n_ch + c * ns + a
                grads[idx][s, s] += g[1 + a]
        return grads

    def spec(self, x):
        shape_names = self.base.names[1:]
        scales = [[0.0] * self.m for _ in range(self.p)]
        grids = {s: [[0.0] * self.m for _ in range(self.p)] for s in shape_names}
        for c, i, j in self._channels():
            xc = self._channel_params(x, c)
            scales[i][j] = float(xc[0])
            for a, s in enumerate(shape_names):
                grids[s][i][j] = float(xc[1 + a])
        shape = {"base": self.base.spec(np.ones(len(self.base.names))).family.value, **grids}
        if isinstance(self.base, TCFamily):
            shape["Tc"] = self.base.Tc
        return KernelSpec(Family.BLOCK_DIAG, scales, shape, (self.T, self.p, self.m))


def family_from_name(name: Union[str, Family], T: int, p: int = 1, m: int = 1, shared_shape: bool = True,
                     **kw) -> KernelFamily:
    """Scalar family for SISO data, block-diagonal over channels otherwise."""
    fam = Family(name)
    if p * m == 1:
        return scalar_family(fam, T, **kw)
    return BlockDiagFamily(fam, T, p, m, shared_shape=shared_shape, **kw)
