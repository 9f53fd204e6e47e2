"""CSV ingestion of input/output records and JSON export of results."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import FitReport, IODataset, ImpulseResponse

PathLike = Union[str, Path]


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def read_dataset(path: PathLike, sample_time: Optional[float] = None) -> IODataset:
    """Read a CSV with header ``u1..um,y1..yp``.

    The sample time comes from the argument, else from a sidecar JSON file
    (same stem, ``.json``) with a ``sample_time`` key, else defaults to 1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in row] for row in reader if row]
    u_cols = [k for k, h in enumerate(header) if h.startswith("u")]
    y_cols = [k for k, h in enumerate(header) if h.startswith("y")]
    expected = [f"u{j + 1}" for j in range(len(u_cols))] + [f"y{i + 1}" for i in range(len(y_cols))]
    if header != expected or not u_cols or not y_cols:
        raise ValueError(f"header must be u1..um,y1..yp, got {header}")
    arr = np.asarray(rows, dtype=float).reshape(-1, len(header))
    if sample_time is None:
        side = sidecar_path(path)
        sample_time = json.loads(side.read_text()).get("sample_time", 1.0) if side.exists() else 1.0
    return IODataset(arr[:, u_cols], arr[:, y_cols], float(sample_time))


def write_dataset(data: IODataset, path: PathLike) -> None:
    """Write the CSV and its sample-time sidecar."""
    path = Path(path)
    header = [f"u{j + 1}" for j in range(data.m)] + [f"y{i + 1}" for i in range(data.p)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.hstack([data.inputs, data.outputs]):
            w.writerow([f"{v:.17g}" for v in row])
    sidecar_path(path).write_text(json.dumps({"sample_time": data.sample_time}, indent=2) + "\n")


def impulse_to_dict(g: ImpulseResponse) -> dict:
    return {"T": g.T, "p": g.p, "m": g.m, "coeffs": g.coeffs.tolist()}


def impulse_from_dict(obj: dict) -> ImpulseResponse:
    coeffs = np.asarray(obj["coeffs"], dtype=float)
    T, p, m = int(obj["T"]), int(obj["p"]), int(obj["m"])
    if coeffs.shape != (T, p, m):
        raise ValueError(f"coeffs have shape {coeffs.shape}, dimension fields say {(T, p, m)}")
    return ImpulseResponse(coeffs)


def fit_report_to_dict(rep: FitReport) -> dict:
    return {k: (None if not np.isfinite(v) else float(v)) for k, v in rep.to_dict().items()}


def channel_graph_to_list(graph) -> list:
    return np.asarray(graph, dtype=bool).tolist()


def write_json(obj, path: PathLike) -> None:
    from .bench import dumps

    Path(path).write_text(dumps(obj) + "\n")
