"""Minicube container, dataset manifest, geographic splits, time slicing.

A cube lives in its own directory: meta.json plus one raw tensor file per
array (see binio). The manifest is a JSON index of cube directories with
split assignments, date windows, and the standardization table.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binio import SchemaError, read_tensor, write_tensor

SCHEMA_VERSION = 1
STEP_DAYS = 5
EARTH_RADIUS_KM = 6371.0
WARMUP_YEARS = 2

C_ST, C_S, C_T = 9, 34, 24


class SplitError(ValueError):
    """Requested split assignment is infeasible or violated."""


@dataclass
class Minicube:
    """One spatiotemporal sample, fully assembled for training.

    x_st: (9, T, H, W)  reflectance bands, their next-step climatology,
                        cloud mask channel
    x_s:  (34, H, W)    one-hot land cover (33) + scaled elevation
    x_t:  (24, T)       meteorology aggregations over the following 5 days
    cloud_mask: (T, H, W) 1 = unusable pixel
    event_labels: (T,)  0 = none, else integer event id
    """

    cube_id: str
    location: tuple  # (lon, lat) degrees
    time_axis: list  # list[dt.date], strictly increasing, 5-day step
    x_st: np.ndarray
    x_s: np.ndarray
    x_t: np.ndarray
    cloud_mask: np.ndarray
    event_labels: np.ndarray
    channel_names: dict
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.time_axis)

    @property
    def grid(self) -> tuple:
        return self.x_st.shape[2], self.x_st.shape[3]


def validate_cube(cube: Minicube) -> None:
    """Schema invariants; raises SchemaError with the first violation."""
    T = cube.n_steps
    if cube.x_st.ndim != 4 or cube.x_st.shape[0] != C_ST:
        raise SchemaError(f"x_st must be ({C_ST},T,H,W), got {cube.x_st.shape}")
    H, W = cube.x_st.shape[2], cube.x_st.shape[3]
    if cube.x_st.shape[1] != T:
        raise SchemaError("x_st time extent disagrees with time axis")
    if cube.x_s.shape != (C_S, H, W):
        raise SchemaError(f"x_s must be ({C_S},{H},{W}), got {cube.x_s.shape}")
    if cube.x_t.shape != (C_T, T):
        raise SchemaError(f"x_t must be ({C_T},{T}), got {cube.x_t.shape}")
    if cube.cloud_mask.shape != (T, H, W):
        raise SchemaError("cloud_mask shape mismatch")
    if cube.event_labels.shape != (T,):
        raise SchemaError("event_labels shape mismatch")
    for name, arr in (("x_st", cube.x_st), ("x_s", cube.x_s),
                      ("x_t", cube.x_t)):
        if not np.isfinite(arr).all():
            raise SchemaError(f"{name} holds non-finite values")
    mv = cube.cloud_mask
    if not np.all((mv == 0) | (mv == 1)):
        raise SchemaError("cloud_mask must be 0/1-valued")
    if not np.array_equal(cube.x_st[8], mv):
        raise SchemaError("x_st cloud-mask channel differs from cloud_mask")
    if np.any(cube.event_labels < 0):
        raise SchemaError("event labels must be non-negative")
    if len(cube.channel_names.get("x_st", [])) != C_ST \
            or len(cube.channel_names.get("x_s", [])) != C_S \
            or len(cube.channel_names.get("x_t", [])) != C_T:
        raise SchemaError("channel_names must list 9/34/24 entries")
    for i in range(1, T):
        gap = (cube.time_axis[i] - cube.time_axis[i - 1]).days
        if gap != STEP_DAYS:
            raise SchemaError(
                f"time axis step {gap} days at index {i}, expected {STEP_DAYS}")


_TENSOR_FILES = {
    "x_st": "x_st.bin",
    "x_s": "x_s.bin",
    "x_t": "x_t.bin",
    "cloud_mask": "cloud_mask.bin",
    "event_labels": "event_labels.bin",
}


def save_cube(cube: Minicube, directory) -> None:
    validate_cube(cube)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / _TENSOR_FILES["x_st"], cube.x_st)
    write_tensor(directory / _TENSOR_FILES["x_s"], cube.x_s)
    write_tensor(directory / _TENSOR_FILES["x_t"], cube.x_t)
    write_tensor(directory / _TENSOR_FILES["cloud_mask"], cube.cloud_mask)
    write_tensor(directory / _TENSOR_FILES["event_labels"],
                 cube.event_labels.astype(np.float32))
    meta = {
        "schema_version": SCHEMA_VERSION,
        "cube_id": cube.cube_id,
        "location": list(cube.location),
        "time_axis": [d.isoformat() for d in cube.time_axis],
        "channel_names": cube.channel_names,
        "extra": cube.meta,
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True,
                                                    indent=1))


def load_cube(directory) -> Minicube:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise SchemaError(f"{directory}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{directory}: unsupported schema version "
                          f"{meta.get('schema_version')}")
    arrays = {key: read_tensor(directory / fname)
              for key, fname in _TENSOR_FILES.items()}
    labels = arrays["event_labels"]
    labels_int = labels.astype(np.int32)
    if not np.array_equal(labels_int.astype(np.float32), labels):
        raise SchemaError(f"{directory}: event labels are not integral")
    cube = Minicube(
        cube_id=meta["cube_id"],
        location=tuple(meta["location"]),
        time_axis=[dt.date.fromisoformat(s) for s in meta["time_axis"]],
        x_st=arrays["x_st"],
        x_s=arrays["x_s"],
        x_t=arrays["x_t"],
        cloud_mask=arrays["cloud_mask"],
        event_labels=labels_int,
        channel_names=meta["channel_names"],
        meta=meta.get("extra", {}),
    )
    validate_cube(cube)
    return cube


def haversine_km(a: tuple, b: tuple) -> float:
    """Great-circle distance between (lon, lat) points in degrees."""
    lon1, lat1 = math.radians(a[0]), math.radians(a[1])
    lon2, lat2 = math.radians(b[0]), math.radians(b[1])
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2) ** 2 + \
        math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


def assign_splits(locations: list, ratios=(0.64, 0.16, 0.20),
                  min_sep_km: float = 50.0, seed: int = 0) -> list:
    """Assign 'train' / 'val' / 'test' so every test location sits at least
    min_sep_km away from every train and val location.

    Locations closer than min_sep_km form atomic groups that move to the
    test side together. Groups are drawn at random (seeded) until the test
    ratio is reached; the remainder splits train/val by the remaining ratio.
    """
    n = len(locations)
    if n < 3:
        raise SplitError(f"need at least 3 locations, got {n}")
    r_train, r_val, r_test = ratios
    total = r_train + r_val + r_test
    if total <= 0 or min(ratios) < 0:
        raise SplitError(f"bad ratios {ratios}")
    r_train, r_val, r_test = (r / total for r in ratios)

    # union-find over pairs closer than the separation radius
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if haversine_km(locations[i], locations[j]) < min_sep_km:
                pi, pj = find(i), find(j)
                if pi != pj:
                    parent[pi] = pj

    groups: dict[int, list] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    group_list = sorted(groups.values(), key=lambda g: g[0])

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(group_list))
    target_test = max(1, round(n * r_test)) if r_test > 0 else 0
    test_idx: set[int] = set()
    for gi in order:
        if len(test_idx) >= target_test:
            break
        test_idx.update(group_list[gi])
    if r_test > 0 and not test_idx:
        raise SplitError("could not allocate any test group")
    remainder = [i for i in range(n) if i not in test_idx]
    if not remainder:
        raise SplitError("test separation consumed every location; "
                         "no train data remains")
    rng.shuffle(remainder)
    share = r_train / (r_train + r_val) if (r_train + r_val) > 0 else 1.0
    n_train = max(1, int(round(len(remainder) * share)))
    splits = ["val"] * n
    for i in remainder[:n_train]:
        splits[i] = "train"
    for i in test_idx:
        splits[i] = "test"
    if "val" not in splits and r_val > 0:
        # keep at least one validation cube when requested
        splits[remainder[-1]] = "val"
    violations = verify_separation(locations, splits, min_sep_km)
    if violations:
        raise SplitError(f"internal: separation violated: {violations[:3]}")
    return splits


def verify_separation(locations: list, splits: list,
                      min_sep_km: float) -> list:
    """Exhaustive check; returns [(i, j, km), ...] violating pairs."""
    bad = []
    for i, si in enumerate(splits):
        if si != "test":
            continue
        for j, sj in enumerate(splits):
            if sj == "test":
                continue
            km = haversine_km(locations[i], locations[j])
            if km < min_sep_km:
                bad.append((min(i, j), max(i, j), km))
    return sorted(bad)


def years_after(date: dt.date, years: int) -> dt.date:
    return date.replace(year=date.year + years)


def default_boundary(cube: Minicube) -> dt.date:
    """Start of the final calendar year on the cube's axis."""
    return dt.date(cube.time_axis[-1].year, 1, 1)


def default_boundary_from_start(axis_start: dt.date, n_steps: int) -> dt.date:
    """Same rule, computed from the axis parameters alone."""
    last = axis_start + dt.timedelta(days=STEP_DAYS * (n_steps - 1))
    return dt.date(last.year, 1, 1)


def boundary_date(manifest: "DatasetManifest") -> dt.date:
    return dt.date.fromisoformat(manifest.boundary)


def temporal_slice(cube: Minicube, split: str,
                   boundary: dt.date | None = None) -> Minicube:
    """Window a cube for its split's role. Arrays are views, not copies.

    train -> [admissible_start, boundary); val/test -> [boundary, end].
    The admissible start excludes the first WARMUP_YEARS after the
    simulation epoch (climatology needs history before forecasts count).
    """
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    if boundary is None:
        boundary = default_boundary(cube)
    epoch_s = cube.meta.get("sim_epoch")
    admissible = cube.time_axis[0]
    if epoch_s:
        admissible = max(admissible,
                         years_after(dt.date.fromisoformat(epoch_s),
                                     WARMUP_YEARS))
    axis = cube.time_axis
    if split == "train":
        lo = next((i for i, d in enumerate(axis) if d >= admissible), None)
        hi = next((i for i, d in enumerate(axis) if d >= boundary), len(axis))
    else:
        lo = next((i for i, d in enumerate(axis) if d >= boundary), None)
        hi = len(axis)
    if lo is None or hi <= lo:
        raise SchemaError(f"empty {split} window for cube {cube.cube_id}")
    return Minicube(
        cube_id=cube.cube_id,
        location=cube.location,
        time_axis=axis[lo:hi],
        x_st=cube.x_st[:, lo:hi],
        x_s=cube.x_s,
        x_t=cube.x_t[:, lo:hi],
        cloud_mask=cube.cloud_mask[lo:hi],
        event_labels=cube.event_labels[lo:hi],
        channel_names=cube.channel_names,
        meta={**cube.meta, "window": [axis[lo].isoformat(),
                                      axis[hi - 1].isoformat()],
              "window_offset": lo},
    )


@dataclass
class DatasetManifest:
    """Index of a generated dataset: cube paths, splits, windows, scaling."""

    seed: int
    cubes: list  # [{cube_id, path, location, split}]
    boundary: str  # ISO date separating train window from val/test window
    min_sep_km: float
    met_percentiles: dict  # var -> [p_low, p_high]
    config: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def cube_entries(self, split: str | None = None) -> list:
        if split is None:
            return list(self.cubes)
        return [c for c in self.cubes if c["split"] == split]


def save_manifest(manifest: DatasetManifest, path) -> None:
    payload = {
        "schema_version": manifest.schema_version,
        "seed": manifest.seed,
        "cubes": manifest.cubes,
        "boundary": manifest.boundary,
        "min_sep_km": manifest.min_sep_km,
        "met_percentiles": manifest.met_percentiles,
        "config": manifest.config,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"manifest not found: {path}")
    payload = json.loads(path.read_text())
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError("unsupported manifest schema version")
    return DatasetManifest(
        seed=payload["seed"],
        cubes=payload["cubes"],
        boundary=payload["boundary"],
        min_sep_km=payload["min_sep_km"],
        met_percentiles={k: tuple(v) for k, v
                         in payload["met_percentiles"].items()},
        config=payload.get("config", {}),
    )


def load_cube_by_entry(manifest_path, entry: dict) -> Minicube:
    """Resolve a manifest cube entry relative to the manifest location."""
    base = Path(manifest_path).parent
    return load_cube(base / entry["path"])
