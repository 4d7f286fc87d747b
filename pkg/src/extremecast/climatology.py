"""Causal dynamic climatology: 12 monthly bins of running (count, mean).

States ingest observations strictly forward in time; queries interpolate
linearly between the two bin centers (the 15th of each month) bracketing the
query date, wrapping December to January. A query therefore reflects exactly
what was ingested before it, never data that arrives later.
"""

from __future__ import annotations

import datetime as dt
import json
from pathlib import Path

import numpy as np

from .binio import read_tensor, write_tensor

N_BINS = 12
BIN_CENTER_DAY = 15


class CausalityError(RuntimeError):
    """Attempt to ingest data older than what the state has already seen."""


class MissingClimatologyError(LookupError):
    """A bin needed by a query holds no observations."""


class ClimatologyState:
    """Running monthly means over an arbitrary field shape.

    field_shape () gives a scalar series state; (C, H, W) gives per-pixel
    per-channel bins. Means update only at valid positions.
    """

    def __init__(self, field_shape: tuple = (), dtype=np.float32):
        self.field_shape = tuple(field_shape)
        self.means = np.zeros((N_BINS,) + self.field_shape, dtype=dtype)
        self.counts = np.zeros((N_BINS,) + self.field_shape, dtype=np.int64)
        self.last_ingested: dt.date | None = None

    @property
    def dtype(self):
        return self.means.dtype

    def copy(self) -> "ClimatologyState":
        out = ClimatologyState(self.field_shape, dtype=self.dtype)
        out.means = self.means.copy()
        out.counts = self.counts.copy()
        out.last_ingested = self.last_ingested
        return out


def ingest(state: ClimatologyState, date: dt.date, values: np.ndarray,
           valid: np.ndarray | None = None) -> None:
    """Fold one observation into the date's monthly bin.

    `valid` is a 0/1 (or bool) mask broadcastable to the field shape; None
    means fully valid. Ingestion dates must be non-decreasing.
    """
    if state.last_ingested is not None and date < state.last_ingested:
        raise CausalityError(
            f"ingest at {date} after state reached {state.last_ingested}")
    values = np.asarray(values, dtype=state.dtype)
    if values.shape != state.field_shape:
        raise ValueError(f"values shape {values.shape} != field "
                         f"{state.field_shape}")
    if valid is None:
        mask = np.ones(state.field_shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(valid) != 0, state.field_shape)
    if not np.isfinite(values[mask]).all():
        raise ValueError(f"non-finite values at valid positions on {date}")
    b = date.month - 1
    # flat views keep the update code valid for scalar () fields too
    counts = state.counts.reshape(N_BINS, -1)
    means = state.means.reshape(N_BINS, -1)
    sel = np.flatnonzero(mask.reshape(-1))
    counts[b, sel] += 1
    delta = (values.reshape(-1)[sel] - means[b, sel])
    means[b, sel] += delta / counts[b, sel].astype(state.dtype)
    state.last_ingested = date


def _bin_center(year: int, month: int) -> dt.date:
    return dt.date(year, month, BIN_CENTER_DAY)


def _bracketing_bins(date: dt.date):
    """(lo_bin, hi_bin, weight): weight in [0,1) toward hi_bin."""
    this_center = _bin_center(date.year, date.month)
    if date >= this_center:
        lo_y, lo_m = date.year, date.month
        hi_m = 1 if date.month == 12 else date.month + 1
        hi_y = date.year + 1 if date.month == 12 else date.year
    else:
        hi_y, hi_m = date.year, date.month
        lo_m = 12 if date.month == 1 else date.month - 1
        lo_y = date.year - 1 if date.month == 1 else date.year
    lo_c = _bin_center(lo_y, lo_m)
    hi_c = _bin_center(hi_y, hi_m)
    w = (date - lo_c).days / (hi_c - lo_c).days
    return lo_m - 1, hi_m - 1, w


def query(state: ClimatologyState, date: dt.date) -> np.ndarray:
    """Interpolated climatology at `date`; strict about empty bins."""
    lo, hi, w = _bracketing_bins(date)
    if not state.counts[lo].all() or not state.counts[hi].all():
        raise MissingClimatologyError(
            f"empty bin among months {lo + 1}/{hi + 1} for query at {date}")
    wt = state.dtype.type(w)
    return (1 - wt) * state.means[lo] + wt * state.means[hi]


def _nearest_filled(state: ClimatologyState, b: int) -> np.ndarray:
    """Per-position bin values for bin b, falling back to the nearest
    non-empty bin by circular month distance (forward wins ties)."""
    means = state.means.reshape(N_BINS, -1)
    counts = state.counts.reshape(N_BINS, -1)
    values = means[b].copy()
    missing = counts[b] == 0
    if not missing.any():
        return values.reshape(state.field_shape)
    # candidates by circular month distance, forward first: +1, -1, +2, -2, ...
    order = []
    for k in range(1, N_BINS // 2 + 1):
        order.append((b + k) % N_BINS)
        if k != N_BINS - k:
            order.append((b - k) % N_BINS)
    for cand in order:
        take = missing & (counts[cand] > 0)
        if take.any():
            values[take] = means[cand][take]
            missing &= ~take
        if not missing.any():
            break
    if missing.any():
        raise MissingClimatologyError("some positions have no data in any bin")
    return values.reshape(state.field_shape)


def query_with_fallback(state: ClimatologyState, date: dt.date):
    """Like `query`, but empty bins borrow the nearest non-empty bin per
    position. Returns (values, n_fallback_positions)."""
    lo, hi, w = _bracketing_bins(date)
    n_fallback = int((state.counts[lo] == 0).sum() + (state.counts[hi] == 0).sum())
    if n_fallback == 0:
        wt = state.dtype.type(w)
        return (1 - wt) * state.means[lo] + wt * state.means[hi], 0
    lo_vals = _nearest_filled(state, lo)
    hi_vals = _nearest_filled(state, hi)
    wt = state.dtype.type(w)
    return (1 - wt) * lo_vals + wt * hi_vals, n_fallback


def detrend(values: np.ndarray, clim: np.ndarray) -> np.ndarray:
    """Anomaly relative to a climatology of the same shape."""
    values = np.asarray(values)
    clim = np.asarray(clim)
    if values.shape != clim.shape:
        raise ValueError(f"shape mismatch {values.shape} vs {clim.shape}")
    return values - clim


def next_step_climatology(state: ClimatologyState, date: dt.date,
                          period_days: int = 5) -> np.ndarray:
    """Climatology expected at the next observation date."""
    return query(state, date + dt.timedelta(days=period_days))


def save_state(state: ClimatologyState, directory, name: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / f"{name}_means.bin", state.means)
    write_tensor(directory / f"{name}_counts.bin",
                 state.counts.astype(np.float32))
    meta = {
        "field_shape": list(state.field_shape),
        "last_ingested": state.last_ingested.isoformat()
        if state.last_ingested else None,
    }
    (directory / f"{name}_meta.json").write_text(
        json.dumps(meta, sort_keys=True))


def load_state(directory, name: str) -> ClimatologyState:
    directory = Path(directory)
    meta = json.loads((directory / f"{name}_meta.json").read_text())
    state = ClimatologyState(tuple(meta["field_shape"]))
    means = read_tensor(directory / f"{name}_means.bin")
    counts = read_tensor(directory / f"{name}_counts.bin")
    if means.shape != state.means.shape:
        raise ValueError(f"stored shape {means.shape} != {state.means.shape}")
    state.means = means
    state.counts = counts.astype(np.int64)
    if meta["last_ingested"]:
        state.last_ingested = dt.date.fromisoformat(meta["last_ingested"])
    return state
