"""Integrated gradients for the pooled vegetation-index output.

The attribution target is the masked mean of predicted kNDVI over a chosen
set of prediction steps (an event, or its counterfactual window one year
earlier). The path integral runs from an all-zero baseline along the
straight line to the input, sampled with a right-endpoint Riemann sum, so
the approximation error shrinks as the step count grows and a completeness
residual against F(x) - F(0) quantifies it.

The forward pass stops right after the last attributed step; inputs beyond
it receive exactly zero attribution by construction.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import features as ft
from . import model as md
from . import store
from .training import kndvi

YEAR_STEPS = 73  # 365 days at the 5-day cadence
INPUT_NAMES = ("x_st", "x_s", "x_t")


class AttributionError(ValueError):
    """No valid pixels or no usable counterfactual window."""


@dataclass(frozen=True)
class AttributionConfig:
    n_steps: int = 9

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")


@dataclass
class AttributionResult:
    attr: dict          # input name -> attribution array (input shape)
    f_x: float
    f_base: float
    residual: float     # |sum(attr) - (f_x - f_base)|
    ratio: float        # residual / |f_x - f_base|
    positions: np.ndarray
    horizon: int
    n_steps: int


def ig_core(fn, inputs: dict, n_steps: int) -> dict:
    """Right-Riemann integrated gradients for a scalar function of named
    arrays, from a zero baseline.

    fn receives a dict of leaf Tensors and must return a scalar Tensor.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    sums = {name: np.zeros(arr.shape, dtype=np.float64)
            for name, arr in inputs.items()}
    f_x = None
    for k in range(1, n_steps + 1):
        alpha = k / n_steps
        leaves = {name: ad.Tensor((alpha * arr).astype(arr.dtype),
                                  requires_grad=True)
                  for name, arr in inputs.items()}
        with ad.Tape() as tape:
            y = fn(leaves)
            grads = tape.backward(y)
        for name in inputs:
            sums[name] += grads[leaves[name]]
        if k == n_steps:
            f_x = float(y.item())

    zeros = {name: ad.Tensor(np.zeros_like(arr))
             for name, arr in inputs.items()}
    f_base = float(fn(zeros).item())

    attr = {name: (inputs[name].astype(np.float64) * sums[name] / n_steps)
            for name in inputs}
    total = float(sum(a.sum() for a in attr.values()))
    gap = f_x - f_base
    residual = abs(total - gap)
    ratio = residual / max(abs(gap), 1e-30)
    return {"attr": attr, "f_x": f_x, "f_base": f_base,
            "residual": residual, "ratio": ratio}


def pooled_kndvi_mask(cube: store.Minicube, positions: np.ndarray):
    """(valid (1, horizon, H, W), horizon): clear vegetation pixels at the
    chosen target steps, laid out on the prediction axis."""
    positions = np.asarray(positions, dtype=int)
    if positions.size == 0:
        raise AttributionError("no prediction steps selected")
    if positions.min() < 1 or positions.max() > cube.n_steps - 1:
        raise AttributionError(
            f"positions outside 1..{cube.n_steps - 1}")
    rows = positions - 1
    horizon = int(rows.max()) + 1
    H, W = cube.grid
    veg = ft.vegetation_mask_from_xs(cube.x_s)
    valid = np.zeros((1, horizon, H, W), dtype=np.float32)
    valid[0, rows] = ((cube.cloud_mask[positions] == 0) & veg[None]) \
        .astype(np.float32)
    if valid.sum() == 0:
        raise AttributionError("every selected pixel is masked")
    return valid, horizon


def attribute_cube(mdl: md.Model, cube: store.Minicube,
                   positions: np.ndarray,
                   cfg: AttributionConfig = AttributionConfig()
                   ) -> AttributionResult:
    """Integrated gradients of the pooled index over selected steps."""
    valid, horizon = pooled_kndvi_mask(cube, positions)
    valid_t = ad.Tensor(valid)
    zeros_t = ad.Tensor(np.zeros_like(valid))

    def fn(leaves):
        pred = mdl.forward(leaves["x_st"], leaves["x_s"], leaves["x_t"],
                           n_steps=horizon)
        k = kndvi(ad.slice_channels(pred, 3, 4),
                  ad.slice_channels(pred, 2, 3))
        return ad.masked_mean_abs(k, zeros_t, valid_t)

    inputs = {"x_st": cube.x_st, "x_s": cube.x_s, "x_t": cube.x_t}
    core = ig_core(fn, inputs, cfg.n_steps)
    return AttributionResult(
        attr=core["attr"], f_x=core["f_x"], f_base=core["f_base"],
        residual=core["residual"], ratio=core["ratio"],
        positions=np.asarray(positions, dtype=int), horizon=horizon,
        n_steps=cfg.n_steps)


def channel_totals(result: AttributionResult, name: str) -> np.ndarray:
    """Per-channel summed attribution for one input group."""
    a = result.attr[name]
    return a.reshape(a.shape[0], -1).sum(axis=1)


def aggregate_channels(per_cube_totals: list) -> dict:
    """Mean and standard error across cubes, channel-wise."""
    stacked = np.stack(per_cube_totals, axis=0).astype(np.float64)
    n = stacked.shape[0]
    mean = stacked.mean(axis=0)
    if n > 1:
        stderr = stacked.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        stderr = np.zeros_like(mean)
    return {"mean": mean, "stderr": stderr, "n_cubes": n}


def top_channels(table: dict, names: list, k: int = 3) -> list:
    order = np.argsort(-np.abs(table["mean"]))
    return [names[i] for i in order[:k]]


def eval_event_positions(cube: store.Minicube, boundary,
                         event_id: int) -> np.ndarray:
    pos = np.arange(1, cube.n_steps)
    dates = np.array([d >= boundary for d in cube.time_axis])[pos]
    hit = (cube.event_labels[pos] == event_id) & dates
    return pos[hit]


def counterfactual_positions(event_positions: np.ndarray,
                             cube_id: str = "cube") -> np.ndarray:
    """Same steps shifted one year back; fails without prior coverage."""
    cf = np.asarray(event_positions, dtype=int) - YEAR_STEPS
    if cf.size == 0:
        raise AttributionError(f"{cube_id}: empty event window")
    if cf.min() < 1:
        raise AttributionError(
            f"{cube_id}: no year-earlier coverage for the "
            f"counterfactual window")
    return cf


def most_frequent_event(manifest_path, splits=("test",)) -> int:
    """Dominant nonzero label over the evaluation windows."""
    manifest = store.load_manifest(manifest_path)
    boundary = store.boundary_date(manifest)
    counts = {}
    for split in splits:
        for entry in manifest.cube_entries(split):
            cube = store.load_cube_by_entry(manifest_path, entry)
            for t in range(1, cube.n_steps):
                label = int(cube.event_labels[t])
                if label > 0 and cube.time_axis[t] >= boundary:
                    counts[label] = counts.get(label, 0) + 1
    if not counts:
        raise AttributionError("no labeled steps in the chosen splits")
    return max(sorted(counts), key=lambda k: counts[k])


def event_counterfactual(mdl: md.Model, manifest_path, event_id: int,
                         cfg: AttributionConfig = AttributionConfig(),
                         splits=("test",), log=None,
                         on_result=None) -> dict:
    """Paired attributions: event steps vs the same steps one year back.

    Cubes without the event are skipped; a cube whose counterfactual
    window would fall before the axis raises, since the pairing would be
    meaningless. `on_result(cube_id, kind, result)` is invoked after each
    attribution so callers can persist tensors without holding them all.
    """
    manifest = store.load_manifest(manifest_path)
    boundary = store.boundary_date(manifest)
    rows = {"event": [], "counterfactual": []}
    totals = {name: {"event": [], "counterfactual": []}
              for name in INPUT_NAMES}
    used = []
    for split in splits:
        for entry in manifest.cube_entries(split):
            cube = store.load_cube_by_entry(manifest_path, entry)
            ev_pos = eval_event_positions(cube, boundary, event_id)
            if ev_pos.size == 0:
                continue
            cf_pos = counterfactual_positions(ev_pos, cube.cube_id)
            pair = {"event": ev_pos, "counterfactual": cf_pos}
            for kind, pos in pair.items():
                result = attribute_cube(mdl, cube, pos, cfg)
                rows[kind].append(
                    {"cube_id": cube.cube_id, "f_x": result.f_x,
                     "ratio": result.ratio,
                     "n_positions": int(pos.size)})
                for name in INPUT_NAMES:
                    totals[name][kind].append(
                        channel_totals(result, name))
                if on_result is not None:
                    on_result(cube.cube_id, kind, result)
            used.append(cube.cube_id)
            if log is not None:
                log.info("attributed %s (%d event steps)", cube.cube_id,
                         ev_pos.size)
    if not used:
        raise AttributionError(
            f"no cube in splits {splits} carries event {event_id}")
    tables = {}
    for name in INPUT_NAMES:
        tables[name] = {kind: aggregate_channels(totals[name][kind])
                        for kind in ("event", "counterfactual")}
    return {"event_id": event_id, "cubes": used, "tables": tables,
            "per_cube": rows}
