"""FIR regression problems, output-error simulation and unregularized baselines.

Conventions used throughout the package:

* an impulse response is stored as ``coeffs[k, i, j]`` (lag ``k+1``, output
  ``i``, input ``j``);
* its vectorization is channel-major: the T lags of pair ``(i, j)`` are
  contiguous and pairs follow column-major order ``(0,0), (1,0), ..., (p-1,0),
  (0,1), ...``, so a block-diagonal prior over channels is literally
  block-diagonal;
* stacked outputs are output-major: ``Y = [y_0(t) for t; y_1(t) for t; ...]``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.linalg


class Handling(str, enum.Enum):
    """Initial-condition policy for the FIR regressor."""

    ZERO_PAD = "zeropad"
    TRIM = "trim"


class Criterion(str, enum.Enum):
    AIC = "aic"
    BIC = "bic"


@dataclass(frozen=True)
class IODataset:
    """Time-aligned input/output records.

    ``inputs`` is N x m, ``outputs`` is N x p.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    sample_time: float = 1.0

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if np.ndim(self.inputs) == 1:
            u = u.T
        if np.ndim(self.outputs) == 1:
            y = y.T
        if u.shape[0] != y.shape[0]:
            raise ValueError(
                f"inputs and outputs must have equal row count, got {u.shape[0]} and {y.shape[0]}"
            )
        if u.shape[0] < 1:
            raise ValueError("dataset needs at least one sample")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        if not self.sample_time > 0:
            raise ValueError("sample_time must be positive")
        u.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "outputs", y)
        object.__setattr__(self, "sample_time", float(self.sample_time))

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def p(self) -> int:
        return self.outputs.shape[1]


@dataclass(frozen=True)
class ImpulseResponse:
    """Matrix impulse response ``g_1..g_T`` stored as a T x p x m array.

    ``meta`` carries solver diagnostics (e.g. the least-squares rank flag)
    and never takes part in equality of coefficients.
    """

    coeffs: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim == 1:
            c = c.reshape(-1, 1, 1)
        if c.ndim != 3:
            raise ValueError(f"coeffs must be T x p x m, got shape {c.shape}")
        if c.shape[0] < 1:
            raise ValueError("impulse response needs T >= 1")
        if not np.all(np.isfinite(c)):
            raise ValueError("impulse response contains non-finite entries")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def T(self) -> int:
        return self.coeffs.shape[0]

    @property
    def p(self) -> int:
        return self.coeffs.shape[1]

    @property
    def m(self) -> int:
        return self.coeffs.shape[2]

    @property
    def d(self) -> int:
        return self.coeffs.size

    def vectorize(self) -> np.ndarray:
        return vectorize(self.coeffs)

    @classmethod
    def from_vector(cls, g, T: int, p: int = 1, m: int = 1, meta=None) -> "ImpulseResponse":
        return cls(devectorize(g, T, p, m), meta=dict(meta or {}))

    def channel(self, i: int, j: int) -> np.ndarray:
        return self.coeffs[:, i, j]


def vectorize(coeffs: np.ndarray) -> np.ndarray:
    """Channel-major vectorization of a T x p x m coefficient array."""
    coeffs = np.asarray(coeffs, dtype=float)
    return coeffs.transpose(2, 1, 0).reshape(-1).copy()


def devectorize(g, T: int, p: int = 1, m: int = 1) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.size != T * p * m:
        raise ValueError(f"vector of length {g.size} does not match T*p*m = {T * p * m}")
    return g.reshape(m, p, T).transpose(2, 1, 0).copy()


def channel_slice(i: int, j: int, T: int, p: int) -> slice:
    """Index range of channel ``(i, j)`` inside the vectorized response."""
    start = (j * p + i) * T
    return slice(start, start + T)


@dataclass(frozen=True)
class FirRegression:
    """Linear model ``Y = Phi g + E`` for an FIR model of length T."""

    Y: np.ndarray
    Phi: np.ndarray
    T: int
    p: int
    m: int
    N: int
    noise_variance: Optional[float] = None
    handling: Handling = Handling.ZERO_PAD

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        Phi = np.atleast_2d(np.asarray(self.Phi, dtype=float))
        if Phi.shape != (Y.size, self.p * self.m * self.T):
            raise ValueError(
                f"Phi has shape {Phi.shape}, expected ({Y.size}, {self.p * self.m * self.T})"
            )
        if self.noise_variance is not None and not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive when given")
        Y.setflags(write=False)
        Phi.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "Phi", Phi)

    @property
    def d(self) -> int:
        return self.p * self.m * self.T

    @property
    def n_obs(self) -> int:
        return self.Y.size

    def with_noise_variance(self, sigma2: float) -> "FirRegression":
        return FirRegression(self.Y, self.Phi, self.T, self.p, self.m, self.N, sigma2, self.handling)

    def with_outputs(self, Y) -> "FirRegression":
        return FirRegression(Y, self.Phi, self.T, self.p, self.m, self.N, self.noise_variance, self.handling)


@dataclass(frozen=True)
class FitReport:
    impulse_mse: float
    prediction_mse: float
    fit_percent: float
    # 100 * (1 - |g - g_hat| / |g - mean(g)|); NaN without a true response
    impulse_fit: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "impulse_mse": self.impulse_mse,
            "prediction_mse": self.prediction_mse,
            "fit_percent": self.fit_percent,
            "impulse_fit": self.impulse_fit,
        }


def lag_matrix(u: np.ndarray, T: int) -> np.ndarray:
    """N x T matrix with entry ``[t, k] = u[t - k - 1]`` (zero before the record)."""
    u = np.asarray(u, dtype=float).reshape(-1)
    N = u.size
    L = np.zeros((N, T))
    for k in range(T):
        if k + 1 < N:
            L[k + 1:, k] = u[: N - k - 1]
    return L


def build_fir_regression(data: IODataset, T: int, handling: Union[Handling, str] = Handling.ZERO_PAD,
                         noise_variance: Optional[float] = None) -> FirRegression:
    """Stack the lagged inputs of ``data`` into the regressor of an FIR(T) model."""
    handling = Handling(handling)
    T = int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    N, p, m = data.N, data.p, data.m
    first = 0
    if handling is Handling.TRIM:
        if T > N:
            raise ValueError(f"T={T} exceeds data length N={N} under the trim policy")
        first = T
    n_rows = N - first
    lags = [lag_matrix(data.inputs[:, j], T)[first:] for j in range(m)]
    Phi = np.zeros((p * n_rows, p * m * T))
    for i in range(p):
        rows = slice(i * n_rows, (i + 1) * n_rows)
        for j in range(m):
            Phi[rows, channel_slice(i, j, T, p)] = lags[j]
    Y = data.outputs[first:].T.reshape(-1)
    return FirRegression(Y, Phi, T, p, m, N, noise_variance, handling)


def convolve(g: ImpulseResponse, inputs: np.ndarray) -> np.ndarray:
    """Noise-free OE output ``y(t) = sum_k g_k u(t-k)`` with zero initial conditions."""
    u = np.asarray(inputs, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[1] != g.m:
        raise ValueError(f"input has {u.shape[1]} channels, impulse response expects {g.m}")
    N = u.shape[0]
    y = np.zeros((N, g.p))
    for k in range(min(g.T, N - 1)):
        # lag k+1 contributes g_{k+1} u(t-k-1)
        y[k + 1:] += u[: N - k - 1] @ g.coeffs[k].T
    return y


def simulate_oe(g: ImpulseResponse, inputs: np.ndarray, noise_std: float = 0.0, seed: Optional[int] = None,
                sample_time: float = 1.0) -> IODataset:
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    y = convolve(g, inputs)
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        y = y + noise_std * rng.standard_normal(y.shape)
    return IODataset(np.asarray(inputs, dtype=float).reshape(y.shape[0], -1), y, sample_time)


def least_squares(problem: FirRegression, rcond: Optional[float] = None) -> ImpulseResponse:
    """Minimum-norm least-squares FIR estimate.

    Uses the SVD-based LAPACK driver, so rank deficiency is detected rather
    than raised; ``meta['rank_deficient']`` reports it.
    """
    d = problem.d
    if problem.n_obs == 0:
        g = np.zeros(d)
        rank = 0
    else:
        g, _, rank, _ = scipy.linalg.lstsq(problem.Phi, problem.Y, cond=rcond, lapack_driver="gelsd")
    meta = {"rank": int(rank), "rank_deficient": bool(rank < d)}
    return ImpulseResponse.from_vector(g, problem.T, problem.p, problem.m, meta=meta)


def information_criterion(rss: float, n: int, k: int, criterion: Union[Criterion, str], scale: float) -> float:
    """``n log(RSS/n) + c(n) k`` with c = 2 (AIC) or log n (BIC).

    RSS is floored at ``1e-20 * scale`` so exact fits do not give ``-inf``
    and the penalty decides between them.
    """
    criterion = Criterion(criterion)
    c = 2.0 if criterion is Criterion.AIC else np.log(n)
    rss = max(rss, 1e-20 * max(scale, np.finfo(float).tiny))
    return n * np.log(rss / n) + c * k


def order_selection_baseline(data: IODataset, T_max: int, criterion: Union[Criterion, str] = Criterion.AIC,
                             handling: Union[Handling, str] = Handling.ZERO_PAD):
    """Select the FIR length in ``1..T_max`` by AIC or BIC; return ``(T_hat, estimate)``.

    All candidate orders are scored on the same samples: under the trim
    policy the first ``T_max`` samples are discarded for every candidate.
    """
    handling = Handling(handling)
    if T_max < 1:
        raise ValueError("T_max must be >= 1")
    if handling is Handling.TRIM and T_max > data.N:
        raise ValueError(f"T_max={T_max} exceeds data length N={data.N} under the trim policy")
    first = T_max if handling is Handling.TRIM else 0
    full = build_fir_regression(data, T_max, Handling.ZERO_PAD)
    n_rows = data.N - first
    keep = np.concatenate([np.arange(i * data.N + first, (i + 1) * data.N) for i in range(data.p)])
    Y = full.Y[keep]
    n = Y.size
    scale = float(Y @ Y) if n else 1.0
    best = None
    scores = []
    for T in range(1, T_max + 1):
        cols = np.concatenate([np.arange(c * T_max, c * T_max + T) for c in range(data.p * data.m)])
        sub = FirRegression(Y, full.Phi[np.ix_(keep, cols)], T, data.p, data.m, data.N, None, handling)
        est = least_squares(sub)
        r = Y - sub.Phi @ est.vectorize()
        score = information_criterion(float(r @ r), n, sub.d, criterion, scale)
        scores.append(score)
        if best is None or score < best[0]:
            best = (score, T, est)
    _, T_hat, est = best
    meta = dict(est.meta)
    meta.update({"criterion": Criterion(criterion).value, "scores": scores, "n_rows": n_rows})
    return T_hat, ImpulseResponse(est.coeffs, meta=meta)


def fit_percent(y_true: np.ndarray, y_hat: np.ndarray) -> float:
    y_true = np.asarray(y_true, dtype=float).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=float).reshape(-1)
    den = np.linalg.norm(y_true - y_true.mean())
    num = np.linalg.norm(y_true - y_hat)
    if den == 0:
        return 100.0 if num == 0 else -np.inf
    return float(100.0 * (1.0 - num / den))


def fit_metrics(truth: Union[ImpulseResponse, IODataset], estimate: ImpulseResponse,
                test_data: IODataset) -> FitReport:
    """Score ``estimate`` against a true response (or dataset) and on test data.

    Prediction metrics simulate ``estimate`` on ``test_data.inputs`` with zero
    initial conditions and compare to ``test_data.outputs``.
    """
    if (estimate.p, estimate.m) != (test_data.p, test_data.m):
        raise ValueError("estimate and test data have different channel counts")
    if isinstance(truth, ImpulseResponse):
        if truth.coeffs.shape != estimate.coeffs.shape:
            raise ValueError(
                f"truth has shape {truth.coeffs.shape}, estimate has {estimate.coeffs.shape}"
            )
        diff = truth.vectorize() - estimate.vectorize()
        impulse_mse = float(diff @ diff / truth.d)
        impulse_fit = fit_percent(truth.vectorize(), estimate.vectorize())
    else:
        if (truth.p, truth.m) != (estimate.p, estimate.m):
            raise ValueError("truth dataset and estimate have different channel counts")
        impulse_mse = float("nan")
        impulse_fit = float("nan")
    y_hat = convolve(estimate, test_data.inputs)
    resid = test_data.outputs - y_hat
    prediction_mse = float(np.mean(resid ** 2))
    return FitReport(impulse_mse, prediction_mse, fit_percent(test_data.outputs, y_hat), impulse_fit)
