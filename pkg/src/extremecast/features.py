"""Feature assembly: channel tables, scaling, meteorology aggregation.

Builds the three model inputs from raw series. Reflectance passes through
unscaled; meteorology is percentile-standardized (bounds estimated on the
training split only) and expressed as anomalies against a causal
climatology; static layers are one-hot land cover plus scaled elevation.
Everything is clipped to [-5, 5] at the end.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import climatology as clim

MET_VARIABLES = ("e", "pev", "slhf", "sp", "sshf", "ssr", "t2m", "tp")
BAND_NAMES = ("B02", "B03", "B04", "B8A")
DEM_SCALE = 8849.0
CLIP_LIMIT = 5.0
PERCENTILES = (0.0001, 0.9999)  # 0.01% and 99.99%

LANDCOVER_CLASSES = (
    "no_data",
    "cropland_rainfed",
    "cropland_rainfed_herbaceous",
    "cropland_rainfed_tree",
    "cropland_irrigated",
    "mosaic_cropland",
    "mosaic_natural_vegetation",
    "tree_broadleaved_evergreen",
    "tree_broadleaved_deciduous",
    "tree_broadleaved_deciduous_closed",
    "tree_broadleaved_deciduous_open",
    "tree_needleleaved_evergreen",
    "tree_needleleaved_evergreen_closed",
    "tree_needleleaved_evergreen_open",
    "tree_needleleaved_deciduous",
    "tree_mixed",
    "mosaic_tree_shrub",
    "mosaic_herbaceous",
    "shrubland",
    "shrubland_evergreen",
    "shrubland_deciduous",
    "grassland",
    "lichens_mosses",
    "sparse_vegetation",
    "sparse_shrub",
    "sparse_herbaceous",
    "tree_cover_flooded_fresh",
    "tree_cover_flooded_saline",
    "shrub_herbaceous_flooded",
    "urban",
    "bare_areas",
    "bare_areas_consolidated",
    "water",
    "snow_and_ice",
)
NON_VEGETATION_IDS = frozenset({0, 29, 30, 31, 32, 33})


class DegenerateScaleError(ValueError):
    """Standardization percentiles collapse to a single point."""


class UnknownClassError(ValueError):
    """Land-cover id outside the class table."""


class MissingDataError(ValueError):
    """An aggregation window reaches past the available daily series."""


def xst_channel_names() -> list:
    return list(BAND_NAMES) + [f"{b}_clima_next" for b in BAND_NAMES] \
        + ["cloud_mask"]


def xs_channel_names() -> list:
    return [f"lc_{name}" for name in LANDCOVER_CLASSES[1:]] + ["cop_dem"]


def xt_channel_names() -> list:
    names = []
    for var in MET_VARIABLES:
        names += [f"{var}_min_detrend_next", f"{var}_max_detrend_next",
                  f"{var}_mean_clima_next"]
    return names


@dataclass
class FeatureSpec:
    """Standardization table plus the fixed layout constants."""

    met_percentiles: dict  # var -> (p_low, p_high)
    variables: tuple = MET_VARIABLES
    period_days: int = 5
    clip: float = CLIP_LIMIT
    dem_scale: float = DEM_SCALE
    version: int = 1

    def to_dict(self) -> dict:
        return {
            "met_percentiles": {k: [float(a), float(b)]
                                for k, (a, b) in self.met_percentiles.items()},
            "variables": list(self.variables),
            "period_days": self.period_days,
            "clip": self.clip,
            "dem_scale": self.dem_scale,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FeatureSpec":
        return cls(
            met_percentiles={k: tuple(v)
                             for k, v in payload["met_percentiles"].items()},
            variables=tuple(payload.get("variables", MET_VARIABLES)),
            period_days=payload.get("period_days", 5),
            clip=payload.get("clip", CLIP_LIMIT),
            dem_scale=payload.get("dem_scale", DEM_SCALE),
            version=payload.get("version", 1),
        )


def standardize(values: np.ndarray, p_low: float, p_high: float) -> np.ndarray:
    """(v - p_low) / (p_high - p_low); degenerate bounds raise."""
    if not np.isfinite([p_low, p_high]).all() or p_high <= p_low:
        raise DegenerateScaleError(f"bad percentile pair ({p_low}, {p_high})")
    return (np.asarray(values, dtype=np.float32) - np.float32(p_low)) \
        / np.float32(p_high - p_low)


def clip_features(values: np.ndarray, limit: float = CLIP_LIMIT) -> np.ndarray:
    return np.clip(values, -limit, limit)


def met_percentile_table(train_series: list, variables=MET_VARIABLES) -> dict:
    """Percentile bounds per variable, pooled over training cubes.

    train_series: list of (n_vars, D) daily arrays already restricted to the
    training date window.
    """
    if not train_series:
        raise ValueError("no training series given")
    stacked = np.concatenate([np.asarray(s, dtype=np.float64)
                              for s in train_series], axis=1)
    table = {}
    for i, var in enumerate(variables):
        lo, hi = np.quantile(stacked[i], PERCENTILES, method="linear")
        if hi <= lo:
            raise DegenerateScaleError(f"{var}: degenerate percentiles")
        table[var] = (float(lo), float(hi))
    return table


def onehot_landcover(class_map: np.ndarray) -> np.ndarray:
    """(H, W) int ids -> (33, H, W) one-hot; no_data encodes as all zeros."""
    ids = np.asarray(class_map)
    n_classes = len(LANDCOVER_CLASSES)
    if ids.min() < 0 or ids.max() >= n_classes:
        raise UnknownClassError(
            f"class ids outside 0..{n_classes - 1}: "
            f"[{ids.min()}, {ids.max()}]")
    out = np.zeros((n_classes - 1,) + ids.shape, dtype=np.float32)
    for cid in range(1, n_classes):
        out[cid - 1][ids == cid] = 1.0
    return out


def scale_dem(dem: np.ndarray, scale: float = DEM_SCALE) -> np.ndarray:
    return np.asarray(dem, dtype=np.float32) / np.float32(scale)


def vegetation_mask(class_map: np.ndarray) -> np.ndarray:
    """True where the land cover counts as vegetation."""
    ids = np.asarray(class_map)
    mask = np.ones(ids.shape, dtype=bool)
    for cid in NON_VEGETATION_IDS:
        mask &= ids != cid
    return mask


def vegetation_mask_from_xs(x_s: np.ndarray) -> np.ndarray:
    """Vegetation mask recovered from the one-hot block of x_s."""
    veg_rows = [cid - 1 for cid in range(1, len(LANDCOVER_CLASSES))
                if cid not in NON_VEGETATION_IDS]
    return x_s[veg_rows].sum(axis=0) > 0


def aggregate_meteorology(met_std: np.ndarray, met_start: dt.date,
                          met_state: clim.ClimatologyState,
                          step_date: dt.date,
                          period_days: int = 5) -> np.ndarray:
    """Min/max anomaly and mean climatology over the following days.

    The window is (step_date, step_date + period_days]. Values come from the
    standardized daily series (future values are deliberately visible, the
    forecast assumption); the climatology state must only contain data up to
    step_date, which keeps the anomaly reference causal.
    """
    n_vars, n_days = met_std.shape
    out = np.empty((3 * n_vars,), dtype=np.float32)
    anoms = np.empty((n_vars, period_days), dtype=np.float32)
    clims = np.empty((n_vars, period_days), dtype=np.float32)
    for k in range(1, period_days + 1):
        day = step_date + dt.timedelta(days=k)
        idx = (day - met_start).days
        if idx < 0 or idx >= n_days:
            raise MissingDataError(f"daily series does not cover {day}")
        ref = clim.query(met_state, day)
        clims[:, k - 1] = ref
        anoms[:, k - 1] = met_std[:, idx] - ref
    out[0::3] = anoms.min(axis=1)
    out[1::3] = anoms.max(axis=1)
    out[2::3] = clims.mean(axis=1)
    return out


@dataclass
class RawCube:
    """Unassembled synthetic series: what a satellite + reanalysis feed
    would deliver, before any feature engineering."""

    location: tuple
    sim_epoch: dt.date
    dates: list            # stored observation dates (T)
    bands: np.ndarray      # (4, T, H, W) observed reflectance
    cloud_mask: np.ndarray  # (T, H, W) 0/1
    warmup_dates: list     # observation dates before the stored axis
    warmup_bands: np.ndarray
    warmup_mask: np.ndarray
    met_start: dt.date     # first day of the daily series
    met: np.ndarray        # (8, D) raw daily values
    landcover: np.ndarray  # (H, W) int ids
    dem: np.ndarray        # (H, W) meters
    event_labels: np.ndarray  # (T,) int
    extra: dict = dc_field(default_factory=dict)


def assemble_cube_inputs(raw: RawCube, spec: FeatureSpec) -> dict:
    """Run the causal feature pipeline over one raw cube.

    Returns x_st, x_s, x_t plus the final climatology states and the count
    of climatology queries that needed the empty-bin fallback.
    """
    T = len(raw.dates)
    H, W = raw.landcover.shape
    n_vars = len(spec.variables)

    met_std = np.empty_like(raw.met, dtype=np.float32)
    for i, var in enumerate(spec.variables):
        lo, hi = spec.met_percentiles[var]
        met_std[i] = standardize(raw.met[i], lo, hi)
    met_std = clip_features(met_std, spec.clip)

    band_state = clim.ClimatologyState((4, H, W))
    met_state = clim.ClimatologyState((n_vars,))

    met_cursor = 0
    n_days = met_std.shape[1]

    def advance_met(through: dt.date):
        nonlocal met_cursor
        limit = (through - raw.met_start).days + 1
        limit = min(max(limit, 0), n_days)
        while met_cursor < limit:
            day = raw.met_start + dt.timedelta(days=met_cursor)
            clim.ingest(met_state, day, met_std[:, met_cursor])
            met_cursor += 1

    for i, day in enumerate(raw.warmup_dates):
        clim.ingest(band_state, day, raw.warmup_bands[:, i],
                    valid=raw.warmup_mask[i] == 0)

    x_st = np.empty((9, T, H, W), dtype=np.float32)
    x_t = np.empty((3 * n_vars, T), dtype=np.float32)
    fallbacks = 0
    for t, day in enumerate(raw.dates):
        clim.ingest(band_state, day, raw.bands[:, t],
                    valid=raw.cloud_mask[t] == 0)
        advance_met(day)
        clim_next, nfb = clim.query_with_fallback(
            band_state, day + dt.timedelta(days=spec.period_days))
        fallbacks += nfb
        x_st[0:4, t] = raw.bands[:, t]
        x_st[4:8, t] = clim_next
        x_t[:, t] = aggregate_meteorology(met_std, raw.met_start, met_state,
                                          day, spec.period_days)
    x_st[8] = raw.cloud_mask
    x_st = clip_features(x_st, spec.clip).astype(np.float32)
    x_t = clip_features(x_t, spec.clip).astype(np.float32)

    x_s = np.concatenate([
        onehot_landcover(raw.landcover),
        scale_dem(raw.dem, spec.dem_scale)[None],
    ], axis=0)
    x_s = clip_features(x_s, spec.clip).astype(np.float32)

    return {
        "x_st": x_st,
        "x_s": x_s,
        "x_t": x_t,
        "band_state": band_state,
        "met_state": met_state,
        "fallbacks": fallbacks,
    }
