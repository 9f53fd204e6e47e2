"""Monte Carlo harnesses: random-system benchmark and compound-risk study.

Both are driven by plain dicts (parsed from JSON by the CLI), derive one
seed per run from the master seed and the run index, and write results in
run order, so the output files depend only on the configuration.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.signal
from threadpoolctl import threadpool_limits

from . import compound
from .bayes import EvidenceProblem, OptimizerConfig, Sigma2Policy, empirical_bayes
from .kernels import Family, family_from_name
from .model import (Criterion, Handling, IODataset, ImpulseResponse, build_fir_regression, convolve, fit_metrics,
                    least_squares, order_selection_baseline)

log = logging.getLogger(__name__)

BENCHMARK_COLUMNS = ("run_id", "seed", "estimator", "status", "impulse_fit", "impulse_mse", "prediction_fit",
                     "prediction_mse", "order", "sigma2_hat", "log_evidence")
COMPOUND_COLUMNS = ("rule", "B", "alpha_norm", "sigma2", "risk", "stderr", "n_used", "n_failed", "status")

DEFAULT_BENCHMARK = {
    "system": {"p": 1, "m": 1, "order": 3, "pole_radius": [0.3, 0.9], "T_min": 10, "T_cap": 2000,
               "tail_tol": 1e-8},
    "data": {"N": 200, "N_test": 1000, "input": "white", "filter_pole": 0.9, "snr_db": 10.0,
             "handling": "zeropad"},
    "T": 50,
    "estimators": [{"name": "LS"}, {"name": "AIC-FIR"}, {"name": "EB-TC"}],
    "monte_carlo": {"n_runs": 100, "seed": 0},
    "optimizer": {},
    "sigma2_policy": "residual",
}

DEFAULT_COMPOUND = {
    "B": [10],
    "sigma2": 1.0,
    "alpha_norms": [0.0, 1.0, 5.0, 20.0],
    "rules": ["ls", "js", "js+", "eb"],
    "n_rep": 100000,
    "seed": 0,
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def merge_config(defaults: dict, overrides: Optional[dict]) -> dict:
    """Recursive dict merge; lists and scalars in ``overrides`` replace defaults."""
    out = copy.deepcopy(defaults)
    for key, val in (overrides or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def run_seed(master: int, index: int) -> int:
    """Seed of run ``index``, independent of how runs are scheduled."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, dtype=np.uint32)[0])


# --- random systems --------------------------------------------------------

def _random_roots(rng: np.random.Generator, n: int, r_lo: float, r_hi: float) -> np.ndarray:
    roots = []
    while len(roots) < n:
        radius = rng.uniform(r_lo, r_hi)
        if n - len(roots) >= 2 and rng.random() < 0.5:
            z = radius * np.exp(1j * rng.uniform(0.0, np.pi))
            roots += [z, np.conj(z)]
        else:
            roots.append(radius if rng.random() < 0.5 else -radius)
    return np.asarray(roots)


def _channel_response(rng, order, r_lo, r_hi, length):
    poles = _random_roots(rng, order, r_lo, r_hi)
    zeros = _random_roots(rng, order - 1, r_lo, r_hi)
    a = np.real(np.poly(poles))
    b = np.real(np.poly(zeros)) if order > 1 else np.ones(1)
    impulse = np.zeros(length + 1)
    impulse[0] = 1.0
    # one-sample delay: lag k of the FIR model is h[k], k >= 1
    h = scipy.signal.lfilter(np.concatenate([[0.0], b]), a, impulse)[1:]
    return h, poles, zeros


def generate_random_system(config: dict, seed: int) -> ImpulseResponse:
    """Random stable rational system per channel, truncated where the tail energy is negligible.

    Poles and zeros are drawn uniformly in radius over ``pole_radius`` (complex
    ones in conjugate pairs); each channel is scaled to unit l2 norm. The FIR
    length is the smallest ``T >= T_min`` whose discarded tail holds less than
    ``tail_tol`` of the energy of every channel.
    """
    cfg = merge_config(DEFAULT_BENCHMARK["system"], config)
    p, m, order = int(cfg["p"]), int(cfg["m"]), int(cfg["order"])
    r_lo, r_hi = map(float, cfg["pole_radius"])
    if order < 1:
        raise ConfigError("system order must be >= 1")
    if not 0 <= r_lo <= r_hi < 1:
        raise ConfigError("pole radii must satisfy 0 <= lo <= hi < 1")
    T_cap = int(cfg["T_cap"])
    tail_tol = float(cfg["tail_tol"])
    rng = np.random.default_rng(seed)
    responses, T_needed, roots = [], int(cfg["T_min"]), []
    for _ in range(p * m):
        h, poles, zeros = _channel_response(rng, order, r_lo, r_hi, 2 * T_cap)
        energy = np.cumsum(h[::-1] ** 2)[::-1]  # energy[k] = sum_{l >= k} h_l^2
        total = energy[0]
        if total == 0:
            raise ValueError("generated a zero system")
        ok = np.flatnonzero(energy <= tail_tol * total)
        if ok.size == 0 or ok[0] > T_cap:
            raise ValueError(f"tail energy above {tail_tol} at T_cap = {T_cap}")
        T_needed = max(T_needed, int(ok[0]))
        responses.append(h)
        roots.append({"poles": poles, "zeros": zeros})
    coeffs = np.zeros((T_needed, p, m))
    for c, h in enumerate(responses):
        j, i = divmod(c, p)
        g = h[:T_needed]
        coeffs[:, i, j] = g / np.linalg.norm(g)
    meta = {"seed": int(seed), "poles": [[complex(z) for z in r["poles"]] for r in roots]}
    return ImpulseResponse(coeffs, meta)


def make_input(rng: np.random.Generator, N: int, m: int, kind: str = "white", filter_pole: float = 0.9):
    """Unit-variance white Gaussian input, optionally through a first-order low-pass filter."""
    e = rng.standard_normal((N, m))
    if kind == "white":
        return e
    if kind == "filtered":
        a = float(filter_pole)
        if not 0 <= a < 1:
            raise ConfigError("filter_pole must lie in [0, 1)")
        return scipy.signal.lfilter([np.sqrt(1.0 - a * a)], [1.0, -a], e, axis=0)
    raise ConfigError(f"unknown input type {kind!r}")


def pad_impulse(g: ImpulseResponse, T: int) -> ImpulseResponse:
    """Zero-extend (or keep) an impulse response to length ``T``."""
    if g.T > T:
        raise ValueError("cannot pad to a shorter length")
    coeffs = np.zeros((T, g.p, g.m))
    coeffs[: g.T] = g.coeffs
    return ImpulseResponse(coeffs, g.meta)


# --- benchmark -------------------------------------------------------------

@dataclass
class _Fitted:
    g: ImpulseResponse
    order: float = float("nan")
    sigma2: float = float("nan")
    log_evidence: float = float("nan")


def _eb_fit(problem, family_name, opt, policy, extra=None):
    fam = family_from_name(family_name, problem.T, problem.p, problem.m)
    est = empirical_bayes(EvidenceProblem(problem, fam, sigma2_policy=policy), opt)
    return _Fitted(est.g_hat, problem.T, est.sigma2, est.log_evidence)


def run_estimator(spec: dict, data: IODataset, T: int, opt: OptimizerConfig,
                  policy: Sigma2Policy, handling: Handling) -> _Fitted:
    """Fit one named estimator. Names: LS, AIC-FIR, BIC-FIR, EB-<family>, ARD-<family>, SH, NUC."""
    name = spec["name"]
    T = int(spec.get("T", T))
    if name == "LS":
        problem = build_fir_regression(data, T, handling)
        return _Fitted(least_squares(problem), T)
    if name in ("AIC-FIR", "BIC-FIR"):
        crit = Criterion.AIC if name.startswith("AIC") else Criterion.BIC
        T_hat, g = order_selection_baseline(data, int(spec.get("T_max", T)), crit, handling)
        return _Fitted(g, T_hat)
    problem = build_fir_regression(data, T, handling)
    if name.startswith("EB-"):
        return _eb_fit(problem, Family(spec.get("kernel", name[3:])), opt, policy)
    if name.startswith("ARD-"):
        from .structure import ard_mimo_identify

        est, _ = ard_mimo_identify(data, T, Family(spec.get("kernel", name[4:])), opt,
                                   sigma2_policy=policy, handling=handling, shape=spec.get("shape"))
        return _Fitted(est.g_hat, T, est.sigma2, est.log_evidence)
    if name == "SH":
        from .bayes import estimate_noise_variance
        from .structure import stable_hankel_identify

        s2 = estimate_noise_variance(problem)
        est = stable_hankel_identify(problem, n_max=int(spec.get("n_max", 4)), opt=opt, sigma2=s2)
        return _Fitted(est.g_hat, est.hyperparams["n"], est.sigma2, est.log_evidence)
    if name == "NUC":
        from .structure import nuclear_norm_identify

        g = nuclear_norm_identify(problem, float(spec["eta"]))
        return _Fitted(g, T)
    raise ConfigError(f"unknown estimator {name!r}")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.17g}"
    return str(x)


def validate_benchmark(cfg: dict) -> None:
    mc = cfg["monte_carlo"]
    if int(mc["n_runs"]) < 1:
        raise ConfigError("n_runs must be >= 1")
    snr = float(cfg["data"]["snr_db"])
    if not np.isfinite(snr):
        raise ConfigError("SNR must be finite")
    lo, hi = cfg["system"]["pole_radius"]
    if not 0 < float(lo) <= float(hi) < 1:
        raise ConfigError("pole radii must lie in (0, 1)")
    if int(cfg["data"]["N"]) < 1 or int(cfg["T"]) < 1:
        raise ConfigError("N and T must be positive")
    if not cfg["estimators"]:
        raise ConfigError("no estimators configured")
    for e in cfg["estimators"]:
        if "name" not in e:
            raise ConfigError("every estimator needs a name")
    Sigma2Policy(cfg["sigma2_policy"])
    Handling(cfg["data"]["handling"])
    OptimizerConfig.from_dict(cfg.get("optimizer"))


def benchmark_run(cfg: dict, run_id: int) -> list:
    """All estimator rows of one Monte Carlo run."""
    with threadpool_limits(limits=1):
        return _benchmark_run(cfg, run_id)


def _benchmark_run(cfg: dict, run_id: int) -> list:
    seed = run_seed(cfg["monte_carlo"]["seed"], run_id)
    rng = np.random.default_rng(seed)
    sys_seed, in_seed, noise_seed, test_seed = (int(s) for s in rng.integers(0, 2 ** 31 - 1, size=4))
    dcfg = cfg["data"]
    truth = generate_random_system(cfg["system"], sys_seed)
    u = make_input(np.random.default_rng(in_seed), int(dcfg["N"]), truth.m, dcfg["input"], dcfg["filter_pole"])
    y0 = convolve(truth, u)
    sigma2 = float(np.var(y0)) / 10.0 ** (float(dcfg["snr_db"]) / 10.0)
    y = y0 + np.sqrt(sigma2) * np.random.default_rng(noise_seed).standard_normal(y0.shape)
    data = IODataset(u, y)
    u_test = make_input(np.random.default_rng(test_seed), int(dcfg["N_test"]), truth.m, dcfg["input"],
                        dcfg["filter_pole"])
    test = IODataset(u_test, convolve(truth, u_test))
    opt = OptimizerConfig.from_dict(cfg.get("optimizer"))
    policy = Sigma2Policy(cfg["sigma2_policy"])
    handling = Handling(dcfg["handling"])
    rows = []
    for spec in cfg["estimators"]:
        row = {"run_id": run_id, "seed": seed, "estimator": spec.get("label", spec["name"])}
        try:
            fitted = run_estimator(spec, data, int(cfg["T"]), opt, policy, handling)
            T_common = max(truth.T, fitted.g.T)
            rep = fit_metrics(pad_impulse(truth, T_common), pad_impulse(fitted.g, T_common), test)
            row.update(status="ok", impulse_fit=rep.impulse_fit, impulse_mse=rep.impulse_mse,
                       prediction_fit=rep.fit_percent, prediction_mse=rep.prediction_mse, order=fitted.order,
                       sigma2_hat=fitted.sigma2, log_evidence=fitted.log_evidence)
        except ConfigError:
            raise
        except Exception as exc:  # noqa: BLE001 - recorded per row, the run continues
            log.warning("run %d estimator %s failed: %s", run_id, spec["name"], exc)
            row["status"] = f"failed:{type(exc).__name__}"
        rows.append({k: row.get(k, float("nan")) for k in BENCHMARK_COLUMNS})
    return rows


def _quantiles(values) -> dict:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"median": None, "q25": None, "q75": None}
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "q25": float(q25), "q75": float(q75)}


def summarize(rows: list) -> dict:
    out = {}
    for name in dict.fromkeys(r["estimator"] for r in rows):
        rs = [r for r in rows if r["estimator"] == name]
        ok = [r for r in rs if r["status"] == "ok"]
        out[name] = {
            "n_ok": len(ok),
            "n_failed": len(rs) - len(ok),
            "impulse_fit": _quantiles(r["impulse_fit"] for r in ok),
            "prediction_fit": _quantiles(r["prediction_fit"] for r in ok),
        }
    return out


def rows_to_csv(rows: list, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def run_benchmark(config: Optional[dict] = None, workers: int = 1):
    """Run the benchmark; returns ``(rows, csv_text, summary)``.

    Rows are ordered by run index and estimator, whatever the worker count.
    """
    cfg = merge_config(DEFAULT_BENCHMARK, config)
    validate_benchmark(cfg)
    n_runs = int(cfg["monte_carlo"]["n_runs"])
    if workers <= 1:
        per_run = [benchmark_run(cfg, i) for i in range(n_runs)]
    else:
        with ProcessPoolExecutor(max_workers=int(workers)) as pool:
            per_run = list(pool.map(benchmark_run, [cfg] * n_runs, range(n_runs)))
    rows = [r for run in per_run for r in run]
    return rows, rows_to_csv(rows, BENCHMARK_COLUMNS), summarize(rows)


# --- compound risk study ------------------------------------------------------

def validate_compound(cfg: dict) -> None:
    if not cfg["B"] or any(int(b) < 1 for b in cfg["B"]):
        raise ConfigError("B values must be >= 1")
    if not float(cfg["sigma2"]) > 0:
        raise ConfigError("sigma2 must be positive")
    if int(cfg["n_rep"]) < 100:
        raise ConfigError("n_rep must be >= 100")
    unknown = set(cfg["rules"]) - set(compound.RULES)
    if unknown:
        raise ConfigError(f"unknown rules {sorted(unknown)}")


def _compound_point(cfg: dict, ib: int, ia: int) -> list:
    B = int(cfg["B"][ib])
    norm = float(cfg["alpha_norms"][ia])
    sigma2 = float(cfg["sigma2"])
    alpha = np.full(B, norm / np.sqrt(B))
    # common random numbers: every rule sees the same draws at a grid point
    seed = int(np.random.SeedSequence([int(cfg["seed"]), ib, ia]).generate_state(1, dtype=np.uint32)[0])
    rows = []
    for name in cfg["rules"]:
        row = {"rule": name, "B": B, "alpha_norm": norm, "sigma2": sigma2}
        try:
            res = compound.risk_monte_carlo(compound.RULES[name], alpha, sigma2, int(cfg["n_rep"]), seed)
            row.update(risk=res.risk, stderr=res.stderr, n_used=res.n_used, n_failed=res.n_failed, status="ok")
        except (ValueError, RuntimeError) as exc:
            row.update(risk=float("nan"), stderr=float("nan"), n_used=0, n_failed=int(cfg["n_rep"]),
                       status=f"failed:{type(exc).__name__}")
        rows.append(row)
    return rows


def run_compound_study(config: Optional[dict] = None, workers: int = 1):
    """Monte Carlo risk of each rule over the B x |alpha| grid; returns ``(rows, csv_text)``."""
    cfg = merge_config(DEFAULT_COMPOUND, config)
    validate_compound(cfg)
    grid = [(ib, ia) for ib in range(len(cfg["B"])) for ia in range(len(cfg["alpha_norms"]))]
    if workers <= 1:
        per = [_compound_point(cfg, ib, ia) for ib, ia in grid]
    else:
        with ProcessPoolExecutor(max_workers=int(workers)) as pool:
            per = list(pool.map(_compound_point, [cfg] * len(grid), *zip(*grid)))
    rows = [r for pt in per for r in pt]
    return rows, rows_to_csv(rows, COMPOUND_COLUMNS)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"not JSON serializable: {type(x).__name__}")
