"""Command-line entry point: ``bayesid {simulate,identify,benchmark,compound}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure in every run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import bench
from .bench import ConfigError, merge_config
from .bayes import EvidenceFailure, OptimizerConfig, Sigma2Policy
from .io import fit_report_to_dict, impulse_from_dict, impulse_to_dict, read_dataset, write_dataset, write_json
from .model import Handling, IODataset, convolve, fit_metrics

log = logging.getLogger("bayesid")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULT_SIMULATE = {
    "system": bench.DEFAULT_BENCHMARK["system"],
    "data": bench.DEFAULT_BENCHMARK["data"],
    "seed": 0,
    "sample_time": 1.0,
}

DEFAULT_IDENTIFY = {
    "data": None,
    "T": 50,
    "estimator": {"name": "EB-TC"},
    "optimizer": {},
    "sigma2_policy": "residual",
    "handling": "zeropad",
    "truth": None,
    "test_data": None,
}


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    return obj


def cmd_simulate(cfg: dict, out: Path, workers: int) -> int:
    cfg = merge_config(DEFAULT_SIMULATE, cfg)
    seed = int(cfg["seed"])
    rng = np.random.default_rng(seed)
    sys_seed, in_seed, noise_seed = (int(s) for s in rng.integers(0, 2 ** 31 - 1, size=3))
    truth = bench.generate_random_system(cfg["system"], sys_seed)
    d = cfg["data"]
    u = bench.make_input(np.random.default_rng(in_seed), int(d["N"]), truth.m, d["input"], d["filter_pole"])
    y0 = convolve(truth, u)
    sigma2 = float(np.var(y0)) / 10.0 ** (float(d["snr_db"]) / 10.0)
    y = y0 + np.sqrt(sigma2) * np.random.default_rng(noise_seed).standard_normal(y0.shape)
    write_dataset(IODataset(u, y, float(cfg["sample_time"])), out / "data.csv")
    write_json({**impulse_to_dict(truth), "noise_variance": sigma2, "seed": seed}, out / "truth.json")
    return EXIT_OK


def cmd_identify(cfg: dict, out: Path, workers: int) -> int:
    cfg = merge_config(DEFAULT_IDENTIFY, cfg)
    if not cfg["data"]:
        raise ConfigError("identify needs a 'data' CSV path")
    try:
        data = read_dataset(cfg["data"])
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read data: {exc}") from exc
    opt = OptimizerConfig.from_dict(cfg["optimizer"])
    policy = Sigma2Policy(cfg["sigma2_policy"])
    handling = Handling(cfg["handling"])
    spec = cfg["estimator"]
    result = {"estimator": spec}
    try:
        if spec["name"].startswith("ARD-"):
            from .structure import ard_mimo_identify
            from .kernels import Family

            est, graph = ard_mimo_identify(data, int(cfg["T"]), Family(spec.get("kernel", spec["name"][4:])), opt,
                                           sigma2_policy=policy, handling=handling, shape=spec.get("shape"))
            g = est.g_hat
            result.update(hyperparams=est.hyperparams, log_evidence=est.log_evidence,
                          channel_graph=np.asarray(graph).tolist())
        else:
            fitted = bench.run_estimator(spec, data, int(cfg["T"]), opt, policy, handling)
            g = fitted.g
            result.update(order=fitted.order, sigma2=fitted.sigma2, log_evidence=fitted.log_evidence)
    except (EvidenceFailure, np.linalg.LinAlgError) as exc:
        log.error("identification failed: %s", exc)
        return EXIT_NUMERIC
    result["impulse_response"] = impulse_to_dict(g)
    if cfg["test_data"]:
        test = read_dataset(cfg["test_data"])
        truth = test
        if cfg["truth"]:
            truth = impulse_from_dict(json.loads(Path(cfg["truth"]).read_text()))
            T = max(truth.T, g.T)
            truth, g = bench.pad_impulse(truth, T), bench.pad_impulse(g, T)
        result["fit"] = fit_report_to_dict(fit_metrics(truth, g, test))
    write_json(result, out / "estimate.json")
    return EXIT_OK


def cmd_benchmark(cfg: dict, out: Path, workers: int) -> int:
    rows, text, summary = bench.run_benchmark(cfg, workers)
    (out / "benchmark.csv").write_text(text)
    write_json(summary, out / "summary.json")
    if all(r["status"] != "ok" for r in rows):
        log.error("every estimator failed in every run")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_compound(cfg: dict, out: Path, workers: int) -> int:
    rows, text = bench.run_compound_study(cfg, workers)
    (out / "compound.csv").write_text(text)
    if all(r["status"] != "ok" for r in rows):
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "identify": cmd_identify, "benchmark": cmd_benchmark,
            "compound": cmd_compound}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out-dir", default=".", help="directory for output files")
        p.add_argument("--workers", type=int, default=1, help="worker processes for Monte Carlo runs")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _apply_seed(command: str, cfg: dict, seed: Optional[int]) -> dict:
    if seed is None:
        return cfg
    cfg = dict(cfg)
    if command == "benchmark":
        cfg["monte_carlo"] = {**cfg.get("monte_carlo", {}), "seed": seed}
    elif command in ("compound", "simulate"):
        cfg["seed"] = seed
    return cfg


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = _apply_seed(args.command, _load_config(args.config), args.seed)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args.workers)
    except (ConfigError, KeyError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # enum lookups and validators raise ValueError on bad config values
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
