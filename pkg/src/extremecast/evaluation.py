"""Per-cube skill metrics against naive references.

Scores are computed on the vegetation index derived from predicted bands,
over clear vegetation pixels at the target step. Each cube yields one row
of metrics; grand means weight cubes equally. Two references share the
exact prediction pathway: the causal climatology carried in the inputs,
and per-pixel persistence of the last clear observation.
"""

from __future__ import annotations

import csv
import json
import pathlib

import numpy as np

from . import autodiff as ad
from . import features as ft
from . import model as md
from . import store
from .training import kndvi_np

FILTERS = ("all", "extremes", "non_extremes")
METRIC_NAMES = ("l1", "l2", "r2", "nnse", "bias")


class UndefinedMetricError(ValueError):
    """Too few valid samples, or the target has no variance."""


def nnse_from_r2(r2: float) -> float:
    return 1.0 / (2.0 - r2)


def cube_metrics(pred: np.ndarray, target: np.ndarray,
                 valid: np.ndarray) -> dict:
    """L1, RMSE, R^2, bounded efficiency, absolute bias over valid samples."""
    v = valid.astype(bool)
    n = int(v.sum())
    if n < 2:
        raise UndefinedMetricError(f"only {n} valid samples")
    p = pred[v].astype(np.float64)
    t = target[v].astype(np.float64)
    err = p - t
    sst = float(((t - t.mean()) ** 2).sum())
    if sst <= 0.0:
        raise UndefinedMetricError("target variance is zero")
    sse = float((err ** 2).sum())
    r2 = 1.0 - sse / sst
    return {
        "l1": float(np.abs(err).mean()),
        "l2": float(np.sqrt((err ** 2).mean())),
        "r2": r2,
        "nnse": nnse_from_r2(r2),
        "bias": float(abs(err.mean())),
        "n_valid": n,
    }


def model_band_predictions(mdl: md.Model, cube: store.Minicube) -> np.ndarray:
    """(4, T-1, H, W); entry t is the estimate for step t+1, with the
    recurrent state warmed over the full axis."""
    pred = mdl.forward(ad.Tensor(cube.x_st), ad.Tensor(cube.x_s),
                       ad.Tensor(cube.x_t), n_steps=cube.n_steps - 1)
    return pred.data


def climatology_band_predictions(cube: store.Minicube) -> np.ndarray:
    """The next-step climatology channels, realigned to their targets."""
    return np.ascontiguousarray(cube.x_st[4:8, :-1])


def last_value_band_predictions(cube: store.Minicube):
    """Per-pixel carry of the most recent clear observation.

    Returns (pred (4, T-1, H, W), have (T-1, H, W)); `have` is 0 until a
    pixel has seen its first clear observation.
    """
    bands = cube.x_st[0:4]
    clear = cube.cloud_mask == 0
    T = cube.n_steps
    carry = np.zeros(bands.shape[:1] + bands.shape[2:], dtype=bands.dtype)
    seen = np.zeros(bands.shape[2:], dtype=bool)
    pred = np.empty((4, T - 1) + bands.shape[2:], dtype=bands.dtype)
    have = np.empty((T - 1,) + bands.shape[2:], dtype=np.float32)
    for t in range(T - 1):
        m = clear[t]
        carry[:, m] = bands[:, t][:, m]
        seen |= m
        pred[:, t] = carry
        have[t] = seen
    return pred, have


def target_positions(cube: store.Minicube, boundary, window: str) -> np.ndarray:
    """Indices t (into the axis) of target steps for a window.

    Predictions for target t come from input step t-1, so t starts at 1.
    train: targets before the boundary; eval: targets at or after it.
    """
    axis = cube.time_axis
    pos = np.arange(1, len(axis))
    before = np.array([axis[t] < boundary for t in pos])
    if window == "train":
        keep = pos[before]
    elif window in ("val", "test", "eval"):
        keep = pos[~before]
    else:
        raise ValueError(f"unknown window {window!r}")
    if keep.size == 0:
        raise UndefinedMetricError(f"empty {window} window")
    return keep


def filter_positions(cube: store.Minicube, positions: np.ndarray,
                     name: str) -> np.ndarray:
    labels = cube.event_labels[positions]
    if name == "all":
        return positions
    if name == "extremes":
        return positions[labels > 0]
    if name == "non_extremes":
        return positions[labels == 0]
    raise ValueError(f"unknown filter {name!r}")


def evaluate_cube_kndvi(pred_bands: np.ndarray, cube: store.Minicube,
                        positions: np.ndarray,
                        extra_valid: np.ndarray = None) -> dict:
    """Index metrics for one cube over chosen target steps."""
    if positions.size == 0:
        raise UndefinedMetricError("no target steps after filtering")
    rows = positions - 1  # prediction rows are target-shifted
    p_k = kndvi_np(pred_bands[3][rows], pred_bands[2][rows])
    t_k = kndvi_np(cube.x_st[3][positions], cube.x_st[2][positions])
    veg = ft.vegetation_mask_from_xs(cube.x_s)
    valid = (cube.cloud_mask[positions] == 0) & veg[None]
    if extra_valid is not None:
        valid = valid & (extra_valid[rows] > 0)
    return cube_metrics(p_k, t_k, valid.astype(np.float32))


def _grand_mean(rows: list) -> dict:
    out = {}
    for key in METRIC_NAMES:
        out[key] = float(np.mean([r[key] for r in rows]))
    out["n_cubes"] = len(rows)
    return out


def improvement_pct(model_l1: float, reference_l1: float) -> float:
    """Positive when the model beats the reference (lower L1)."""
    if reference_l1 <= 0:
        raise UndefinedMetricError("reference L1 is not positive")
    return 100.0 * (reference_l1 - model_l1) / reference_l1


def evaluate_dataset(manifest_path, models: dict, splits=("test",),
                     filters=FILTERS, log=None) -> list:
    """Rows of grand-mean metrics for every model, reference, split,
    and filter; includes L1 improvements over both references."""
    manifest = store.load_manifest(manifest_path)
    boundary = store.boundary_date(manifest)
    rows = []
    for split in splits:
        entries = manifest.cube_entries(split)
        if not entries:
            raise ValueError(f"no cubes in split {split!r}")
        window = "train" if split == "train" else "eval"
        per_cube = {name: {f: [] for f in filters}
                    for name in list(models) + ["climatology", "last_value"]}
        excluded = {name: {f: 0 for f in filters} for name in per_cube}
        for entry in entries:
            cube = store.load_cube_by_entry(manifest_path, entry)
            positions = target_positions(cube, boundary, window)
            preds = {"climatology": (climatology_band_predictions(cube),
                                     None)}
            lv, have = last_value_band_predictions(cube)
            preds["last_value"] = (lv, have)
            for name, mdl in models.items():
                preds[name] = (model_band_predictions(mdl, cube), None)
            for fname in filters:
                chosen = filter_positions(cube, positions, fname)
                for name, (bands, extra) in preds.items():
                    try:
                        m = evaluate_cube_kndvi(bands, cube, chosen, extra)
                    except UndefinedMetricError:
                        excluded[name][fname] += 1
                        continue
                    per_cube[name][fname].append(m)
            if log is not None:
                log.info("scored %s (%s)", cube.cube_id, split)
        for fname in filters:
            ref_l1 = {}
            for ref in ("climatology", "last_value"):
                scored = per_cube[ref][fname]
                ref_l1[ref] = (float(np.mean([r["l1"] for r in scored]))
                               if scored else None)
            for name in per_cube:
                scored = per_cube[name][fname]
                if not scored:
                    continue
                row = {"model": name, "split": split, "filter": fname}
                row.update(_grand_mean(scored))
                row["n_excluded"] = excluded[name][fname]
                for ref in ("climatology", "last_value"):
                    key = f"improvement_vs_{ref}_pct"
                    if ref_l1[ref]:
                        row[key] = improvement_pct(row["l1"], ref_l1[ref])
                    else:
                        row[key] = None
                rows.append(row)
    return rows


REPORT_COLUMNS = ("model", "split", "filter", "n_cubes", "n_excluded",
                  "l1", "l2", "r2", "nnse", "bias",
                  "improvement_vs_climatology_pct",
                  "improvement_vs_last_value_pct")


def write_report(rows: list, out_dir, log=None):
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            record = []
            for col in REPORT_COLUMNS:
                value = row.get(col)
                if isinstance(value, float):
                    record.append(f"{value:.8f}")
                else:
                    record.append("" if value is None else value)
            writer.writerow(record)
    (out / "metrics.json").write_text(
        json.dumps(rows, indent=1, sort_keys=True))
    if log is not None:
        log.info("wrote %s", out / "metrics.csv")
