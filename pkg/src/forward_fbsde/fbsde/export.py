"""CSV field dumps and JSON summaries with deterministic float formatting."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .types import DualSolution, PrimalSolution


def fmt(x: float) -> str:
    return repr(float(x))


def dump_field_csv(sol: PrimalSolution, path: str | Path) -> Path:
    """One row per grid node: ``t,v,y,z1,z2`` or ``t,v,x,y,z1,z2`` for wealth-dependent fields."""
    path = Path(path)
    if sol.y is None:
        raise ValueError("solution has no grid field to dump")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if sol.y.ndim == 2:
            w.writerow(["t", "v", "y", "z1", "z2"])
            for n, t in enumerate(sol.grid_t):
                for j, v in enumerate(sol.grid_v):
                    w.writerow([fmt(t), fmt(v), fmt(sol.y[n, j]), fmt(sol.z1[n, j]), fmt(sol.z2[n, j])])
        else:
            w.writerow(["t", "v", "x", "y", "z1", "z2"])
            for n, t in enumerate(sol.grid_t):
                for j, v in enumerate(sol.grid_v):
                    for k, x in enumerate(sol.grid_x):
                        w.writerow([fmt(t), fmt(v), fmt(x), fmt(sol.y[n, j, k]), fmt(sol.z1[n, j, k]),
                                    fmt(sol.z2[n, j, k])])
    return path


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def to_json(obj) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, non-finite floats as strings."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def primal_summary(sol: PrimalSolution, optimality=None, dual: DualSolution | None = None) -> dict:
    meta = {k: v for k, v in sol.meta.items() if isinstance(v, (int, float, str, bool, np.floating, np.integer))}
    out = {"regime": sol.regime, "Y0": sol.Y0, "xi": sol.xi, "t0": sol.t0, "T": sol.T,
           "bsde_residual": sol.bsde_residual, "meta": meta}
    if dual is not None:
        out["eta_hat"] = dual.eta0
        out["dual_residual"] = dual.residual
    if optimality is not None:
        out["optimality"] = optimality.to_dict()
    return out


def dual_summary(dual: DualSolution, primal_back: PrimalSolution | None = None) -> dict:
    out = {"regime": dual.regime, "eta": dual.eta0, "dual_residual": dual.residual,
           "density_martingale_stat": dual.density_martingale_stat()}
    if primal_back is not None:
        out["xi_hat"] = primal_back.xi
        out["primal_residual"] = primal_back.bsde_residual
    return out


def write_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(to_json(obj))
    return path
