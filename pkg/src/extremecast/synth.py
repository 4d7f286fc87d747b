"""Synthetic minicube generator.

Simulates a small world with known physics so that pipeline behaviour has
ground truth: daily meteorology with seasonal cycles and AR(1) anomalies, a
latent vegetation stress field driven by threshold exceedances of one driver
variable (plus a weak linear response to a second), reflectance bands that
darken in the NIR and brighten in the red under stress, and cloud fields
that corrupt observations toward bright gray.

Every cube is a pure function of (config, cube_index): generation never
shares mutable state, so any cube can be rebuilt independently and the whole
dataset is reproducible from the config alone.

Timeline: observations every 5 days from the simulation epoch. The first
two years prime the causal climatology and are not stored; the stored axis
covers the following two years. Events are scheduled globally: two in the
stored train year, one in the evaluation year, placed so that the
same-day-of-year window one year before the evaluation event is quiet.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import features as ft
from . import store
from .features import RawCube
from .store import STEP_DAYS, Minicube

WARMUP_STEPS = 146  # two non-leap years of 5-day observations


@dataclass(frozen=True)
class SyntheticConfig:
    n_cubes: int = 60
    n_sites: int = 12
    grid: int = 32
    seed: int = 42
    n_steps: int = 146          # stored observations per cube
    sim_epoch: str = "2017-01-01"

    cloud_rate: float = 0.20
    band_noise: float = 0.012   # per-observation reflectance noise sd
    event_rate: float = 0.85    # per-cube participation probability
    event_magnitude: float = 0.3  # target kNDVI dip at full stress
    event_met_sigma: float = 2.8  # driver push during events, sigma units

    driver_variable: str = "t2m"
    secondary_variable: str = "ssr"
    threshold_sigma: float = 1.6
    gamma_driver: float = 0.14
    gamma_secondary: float = 0.08
    stress_rho: float = 0.85
    stress_noise: float = 0.015

    min_sep_km: float = 50.0
    split_ratios: tuple = (0.64, 0.16, 0.20)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["split_ratios"] = list(self.split_ratios)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "SyntheticConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(payload) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kwargs = dict(payload)
        if "split_ratios" in kwargs:
            kwargs["split_ratios"] = tuple(kwargs["split_ratios"])
        return cls(**kwargs)

    @property
    def epoch(self) -> dt.date:
        return dt.date.fromisoformat(self.sim_epoch)


# var -> (base, seasonal amplitude, stationary anomaly sd, AR(1) rho)
MET_PROFILES = {
    "e": (-3.0, 1.5, 0.8, 0.70),
    "pev": (-4.5, 2.0, 0.9, 0.70),
    "slhf": (-8.0e6, 4.0e6, 2.0e6, 0.70),
    "sp": (95000.0, 800.0, 400.0, 0.80),
    "sshf": (-5.0e6, 3.0e6, 1.8e6, 0.70),
    "ssr": (1.5e7, 8.0e6, 3.0e6, 0.75),
    "t2m": (285.0, 9.0, 3.0, 0.80),
    "tp": (2.5, 1.2, 1.5, 0.50),
}
SEASONAL_PEAK_DOY = 196.0  # northern-hemisphere mid-July


@dataclass(frozen=True)
class EventPlan:
    event_id: int
    start_day: int  # day offset from the simulation epoch
    duration: int


def _rng(cfg: SyntheticConfig, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *key]))


def n_days(cfg: SyntheticConfig) -> int:
    total_steps = WARMUP_STEPS + cfg.n_steps
    return STEP_DAYS * (total_steps - 1) + STEP_DAYS + 1


def site_centers(cfg: SyntheticConfig) -> list:
    """Well-separated site centers; rejection sampling, seeded globally."""
    rng = _rng(cfg, 7)
    centers = []
    guard = 0
    while len(centers) < cfg.n_sites:
        # northern hemisphere only: the event calendar targets the
        # mid-year growing season
        cand = (float(rng.uniform(-120, 120)), float(rng.uniform(5, 55)))
        if all(store.haversine_km(cand, c) > 4 * cfg.min_sep_km
               for c in centers):
            centers.append(cand)
        guard += 1
        if guard > 10000:
            raise RuntimeError("could not place sites")
    return centers


def cube_location(cfg: SyntheticConfig, index: int) -> tuple:
    """Site center plus a small jitter, keeping sites tightly clustered."""
    centers = site_centers(cfg)
    site = index % cfg.n_sites
    rng = _rng(cfg, index, 0)
    lon0, lat0 = centers[site]
    dlat = float(rng.uniform(-0.09, 0.09))
    dlon = float(rng.uniform(-0.09, 0.09)) / max(
        0.2, math.cos(math.radians(lat0)))
    return (lon0 + dlon, lat0 + dlat)


def cube_locations(cfg: SyntheticConfig) -> list:
    return [cube_location(cfg, i) for i in range(cfg.n_cubes)]


def plan_events(cfg: SyntheticConfig) -> list:
    """Two train-year events, one evaluation-year event.

    Day-of-year ranges are disjoint by at least the event duration, so the
    evaluation event's same-day-of-year window one year earlier never
    overlaps a train-year event.
    """
    rng = _rng(cfg, 8)
    year_start = {2019: 730, 2020: 1095}  # day offsets from the epoch
    plans = []
    for event_id, (year, lo, hi) in enumerate(
            [(2019, 95, 130), (2019, 246, 281), (2020, 170, 205)], start=1):
        doy = int(rng.integers(lo, hi + 1))
        duration = int(rng.integers(25, 36))
        plans.append(EventPlan(event_id, year_start[year] + doy - 1,
                               duration))
    return plans


def event_participation(cfg: SyntheticConfig, index: int) -> dict:
    rng = _rng(cfg, index, 5)
    draws = rng.random(len(plan_events(cfg)))
    return {plan.event_id: bool(draws[k] < cfg.event_rate)
            for k, plan in enumerate(plan_events(cfg))}


def _event_shape(duration: int) -> np.ndarray:
    """Trapezoid: 5-day ramps at both ends, plateau at 1 in between."""
    ramp = min(5, max(1, duration // 3))
    shape = np.ones(duration)
    up = (np.arange(ramp) + 1) / ramp
    shape[:ramp] = up
    shape[-ramp:] = up[::-1]
    return shape


def simulate_met(cfg: SyntheticConfig, index: int):
    """Daily meteorology: (values (8, D), anomalies in sigma units (8, D)).

    Anomalies are the generator's ground truth (value minus the exact
    seasonal expectation, over the stationary sd), event pushes included.
    """
    D = n_days(cfg)
    lon, lat = cube_location(cfg, index)
    south = lat < 0
    rng = _rng(cfg, index, 1)
    doys = np.empty(D)
    epoch = cfg.epoch
    for d in range(D):
        doys[d] = (epoch + dt.timedelta(days=d)).timetuple().tm_yday
    phase = SEASONAL_PEAK_DOY - 91.31 + (182.62 if south else 0.0)
    seasonal_unit = np.sin(2 * np.pi * (doys - phase) / 365.25)

    values = np.empty((len(ft.MET_VARIABLES), D), dtype=np.float64)
    anoms = np.empty_like(values)
    for i, var in enumerate(ft.MET_VARIABLES):
        base, amp, sd, rho = MET_PROFILES[var]
        innov_sd = sd * math.sqrt(1.0 - rho * rho)
        eps = rng.normal(0.0, innov_sd, size=D)
        state = rng.normal(0.0, sd)
        series = np.empty(D)
        for d in range(D):
            state = rho * state + eps[d]
            series[d] = state
        anoms[i] = series / sd
        values[i] = base + amp * seasonal_unit + series

    participation = event_participation(cfg, index)
    di = ft.MET_VARIABLES.index(cfg.driver_variable)
    _, _, sd_d, _ = MET_PROFILES[cfg.driver_variable]
    for plan in plan_events(cfg):
        if not participation[plan.event_id]:
            continue
        shape = _event_shape(plan.duration)
        lo = plan.start_day
        hi = min(D, lo + plan.duration)
        push = cfg.event_met_sigma * shape[:hi - lo]
        values[di, lo:hi] += push * sd_d
        anoms[di, lo:hi] += push
    return values.astype(np.float32), anoms.astype(np.float32)


def _smooth_unit(rng: np.random.Generator, grid: int,
                 sigma: float) -> np.ndarray:
    field = gaussian_filter(rng.standard_normal((grid, grid)), sigma,
                            mode="wrap")
    sd = field.std()
    if sd < 1e-12:
        return np.zeros((grid, grid))
    return (field - field.mean()) / sd


def terrain(cfg: SyntheticConfig, index: int) -> dict:
    """Static per-cube fields: land cover, DEM, vegetation density,
    stress sensitivity."""
    g = cfg.grid
    rng = _rng(cfg, index, 2)
    z_veg = _smooth_unit(rng, g, 5.0)
    z_water = _smooth_unit(rng, g, 4.0)
    z_urban = _smooth_unit(rng, g, 3.0)
    z_dem = _smooth_unit(rng, g, 6.0)
    z_sens = _smooth_unit(rng, g, 4.0)

    density = np.clip(0.65 + 0.25 * z_veg, 0.05, 1.0)
    landcover = np.full((g, g), ft.LANDCOVER_CLASSES.index("grassland"),
                        dtype=np.int64)
    landcover[density > 0.78] = ft.LANDCOVER_CLASSES.index("tree_mixed")
    landcover[density < 0.55] = \
        ft.LANDCOVER_CLASSES.index("cropland_rainfed")
    landcover[density < 0.40] = \
        ft.LANDCOVER_CLASSES.index("sparse_vegetation")
    landcover[z_urban > 2.1] = ft.LANDCOVER_CLASSES.index("urban")
    landcover[z_water > 1.9] = ft.LANDCOVER_CLASSES.index("water")

    veg = ft.vegetation_mask(landcover)
    density = np.where(veg, density, 0.0)
    sensitivity = np.where(veg, np.clip(1.0 + 0.35 * z_sens, 0.3, 1.7), 0.0)
    dem = np.clip(900.0 + 650.0 * z_dem, 0.0, 8849.0)
    return {
        "landcover": landcover,
        "dem": dem.astype(np.float32),
        "density": density.astype(np.float32),
        "sensitivity": sensitivity.astype(np.float32),
        "veg": veg,
    }


def generate_raw(cfg: SyntheticConfig, index: int) -> RawCube:
    """Simulate one cube end to end (warmup plus stored window)."""
    if not 0 <= index < cfg.n_cubes:
        raise ValueError(f"cube index {index} outside 0..{cfg.n_cubes - 1}")
    g = cfg.grid
    total_steps = WARMUP_STEPS + cfg.n_steps
    epoch = cfg.epoch
    step_dates = [epoch + dt.timedelta(days=STEP_DAYS * j)
                  for j in range(total_steps)]
    lon, lat = cube_location(cfg, index)
    south = lat < 0

    met, anoms = simulate_met(cfg, index)
    fields = terrain(cfg, index)
    density = fields["density"]
    sens = fields["sensitivity"]

    di = ft.MET_VARIABLES.index(cfg.driver_variable)
    si = ft.MET_VARIABLES.index(cfg.secondary_variable)

    # stress responds to the same 5-day window the features expose
    rng_stress = _rng(cfg, index, 3)
    resp_scale = cfg.event_magnitude / 0.3
    A = np.zeros((total_steps, g, g), dtype=np.float32)
    for j in range(1, total_steps):
        w0 = STEP_DAYS * (j - 1) + 1
        w1 = STEP_DAYS * j + 1
        driver_max = float(anoms[di, w0:w1].max())
        secondary_mean = float(anoms[si, w0:w1].mean())
        forcing = (cfg.gamma_driver
                   * max(0.0, driver_max - cfg.threshold_sigma)
                   + cfg.gamma_secondary * secondary_mean)
        noise = cfg.stress_noise * _smooth_unit(rng_stress, g, 3.0)
        A[j] = np.clip(cfg.stress_rho * A[j - 1] + forcing * sens + noise,
                       -0.4, 1.2)

    rng_optics = _rng(cfg, index, 4)
    albedo = 0.012 * _smooth_unit(rng_optics, g, 5.0)
    phase = SEASONAL_PEAK_DOY - 91.31 + (182.62 if south else 0.0)

    water = fields["landcover"] == ft.LANDCOVER_CLASSES.index("water")
    urban = fields["landcover"] == ft.LANDCOVER_CLASSES.index("urban")

    bands = np.empty((4, total_steps, g, g), dtype=np.float32)
    for j, day in enumerate(step_dates):
        doy = day.timetuple().tm_yday
        green = 0.5 + 0.5 * math.sin(2 * np.pi * (doy - phase) / 365.25)
        # stress removes a fraction of the standing greenness, so the
        # NDVI contrast shrinks toward bare soil but never flips sign
        a = np.clip(A[j] * resp_scale, -0.3, 1.0)
        vg = density * green * (1.0 - a)
        b02 = 0.045 + 0.020 * vg + 0.010 * np.maximum(a, 0) + 0.5 * albedo
        b03 = 0.070 + 0.050 * vg + 0.015 * np.maximum(a, 0) + 0.7 * albedo
        b04 = 0.160 - 0.130 * vg + albedo
        b8a = 0.120 + 0.300 * vg + albedo
        step = np.stack([b02, b03, b04, b8a])
        step[:, water] = np.array([0.070, 0.065, 0.055, 0.035])[:, None]
        step[:, urban] = np.array([0.120, 0.130, 0.180, 0.240])[:, None]
        # scale after drawing so the stream is identical across
        # band_noise settings
        noise = rng_optics.standard_normal((4, g, g)) * cfg.band_noise
        bands[:, j] = np.clip(step + noise, 0.005, 0.95)

    rng_cloud = _rng(cfg, index, 6)
    cloud = np.zeros((total_steps, g, g), dtype=np.float32)
    obs = bands.copy()
    for j in range(total_steps):
        cover = float(np.clip(rng_cloud.normal(cfg.cloud_rate,
                                               0.8 * cfg.cloud_rate),
                              0.0, 0.9))
        # draw the field unconditionally to keep streams aligned across
        # cloud_rate settings
        potential = _smooth_unit(rng_cloud, g, 4.0)
        gray = 0.68 + 0.05 * rng_cloud.standard_normal((g, g))
        if cover <= 0.0 or cfg.cloud_rate <= 0.0:
            continue
        tau = np.quantile(potential, 1.0 - cover)
        mask = potential >= tau
        cloud[j][mask] = 1.0
        shades = np.array([0.00, 0.01, 0.02, 0.03])
        for b in range(4):
            obs[b, j][mask] = np.clip(gray[mask] + shades[b], 0.05, 0.95)

    participation = event_participation(cfg, index)
    labels = np.zeros(cfg.n_steps, dtype=np.int32)
    for plan in plan_events(cfg):
        if not participation[plan.event_id]:
            continue
        for t in range(cfg.n_steps):
            day_off = STEP_DAYS * (WARMUP_STEPS + t)
            if plan.start_day <= day_off < plan.start_day + plan.duration:
                labels[t] = plan.event_id

    w = WARMUP_STEPS
    return RawCube(
        location=(lon, lat),
        sim_epoch=epoch,
        dates=step_dates[w:],
        bands=obs[:, w:],
        cloud_mask=cloud[w:],
        warmup_dates=step_dates[:w],
        warmup_bands=obs[:, :w],
        warmup_mask=cloud[:w],
        met_start=epoch,
        met=met,
        landcover=fields["landcover"],
        dem=fields["dem"],
        event_labels=labels,
        extra={"site": index % cfg.n_sites,
               "participation": participation},
    )


def train_window_days(cfg: SyntheticConfig) -> tuple:
    """Day-offset range [lo, hi) of the stored train year."""
    lo = STEP_DAYS * WARMUP_STEPS
    boundary = store.default_boundary_from_start(
        cfg.epoch + dt.timedelta(days=lo), cfg.n_steps)
    hi = (boundary - cfg.epoch).days
    return lo, hi


def dataset_splits(cfg: SyntheticConfig) -> list:
    return store.assign_splits(cube_locations(cfg), cfg.split_ratios,
                               cfg.min_sep_km, cfg.seed)


def dataset_feature_spec(cfg: SyntheticConfig) -> ft.FeatureSpec:
    """Standardization bounds from train cubes over the train year only."""
    splits = dataset_splits(cfg)
    lo, hi = train_window_days(cfg)
    series = [simulate_met(cfg, i)[0][:, lo:hi]
              for i in range(cfg.n_cubes) if splits[i] == "train"]
    return ft.FeatureSpec(met_percentiles=ft.met_percentile_table(series))


def generate_synthetic_cube(cfg: SyntheticConfig, index: int,
                            spec: ft.FeatureSpec = None) -> Minicube:
    """Raw simulation plus feature assembly; pure in (cfg, index)."""
    if spec is None:
        spec = dataset_feature_spec(cfg)
    raw = generate_raw(cfg, index)
    assembled = ft.assemble_cube_inputs(raw, spec)
    cube = Minicube(
        cube_id=f"cube_{index:03d}",
        location=raw.location,
        time_axis=list(raw.dates),
        x_st=assembled["x_st"],
        x_s=assembled["x_s"],
        x_t=assembled["x_t"],
        cloud_mask=raw.cloud_mask.astype(np.float32),
        event_labels=raw.event_labels,
        channel_names={
            "x_st": ft.xst_channel_names(),
            "x_s": ft.xs_channel_names(),
            "x_t": ft.xt_channel_names(),
        },
        meta={
            "sim_epoch": cfg.sim_epoch,
            "site": raw.extra["site"],
            "participation": {str(k): v for k, v
                              in raw.extra["participation"].items()},
            "clima_fallbacks": assembled["fallbacks"],
        },
    )
    store.validate_cube(cube)
    return cube


def build_dataset(cfg: SyntheticConfig, out_dir, log=None) -> store.DatasetManifest:
    """Generate every cube, assign splits, and write the manifest."""
    import pathlib

    out = pathlib.Path(out_dir)
    (out / "cubes").mkdir(parents=True, exist_ok=True)
    splits = dataset_splits(cfg)
    spec = dataset_feature_spec(cfg)
    entries = []
    for i in range(cfg.n_cubes):
        cube = generate_synthetic_cube(cfg, i, spec)
        rel = f"cubes/{cube.cube_id}"
        store.save_cube(cube, out / rel)
        entries.append({
            "cube_id": cube.cube_id,
            "path": rel,
            "location": [cube.location[0], cube.location[1]],
            "split": splits[i],
        })
        if log is not None:
            log.info("wrote %s (%s)", cube.cube_id, splits[i])
    axis_start = cfg.epoch + dt.timedelta(days=STEP_DAYS * WARMUP_STEPS)
    boundary = store.default_boundary_from_start(axis_start, cfg.n_steps)
    manifest = store.DatasetManifest(
        seed=cfg.seed,
        cubes=entries,
        boundary=boundary.isoformat(),
        min_sep_km=cfg.min_sep_km,
        met_percentiles={k: list(v)
                         for k, v in spec.met_percentiles.items()},
        config=cfg.to_dict(),
    )
    store.save_manifest(manifest, out / "manifest.json")
    return manifest
