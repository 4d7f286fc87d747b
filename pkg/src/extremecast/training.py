"""Masked composite loss and the AdamW training loop.

The loss is a weighted sum of per-band masked L1 terms plus a vegetation
index term computed from the predicted bands, so index errors backpropagate
through the band predictions. Gradients accumulate across several cubes
before each decoupled-weight-decay update; a trailing short group divides
by its own size.
"""

from __future__ import annotations

import csv
import dataclasses
import pathlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as md
from . import store

KNDVI_EPS = 1e-5
BAND_WEIGHTS = (0.125, 0.125, 0.125, 0.125)
KNDVI_WEIGHT = 0.5
NIR_ROW = 3  # B8A within the band block
RED_ROW = 2  # B04


def kndvi(nir: ad.Tensor, red: ad.Tensor,
          eps: float = KNDVI_EPS) -> ad.Tensor:
    """tanh(ndvi^2) with a stabilized denominator, on the tape."""
    num = ad.sub(nir, red)
    den = ad.add(ad.add(nir, red), ad.Tensor(np.asarray(eps,
                                                        dtype=nir.dtype)))
    return ad.tanh(ad.square(ad.div(num, den)))


def kndvi_np(nir: np.ndarray, red: np.ndarray,
             eps: float = KNDVI_EPS) -> np.ndarray:
    """Same map for plain arrays (baselines, targets)."""
    ndvi = (nir - red) / (nir + red + np.asarray(eps, dtype=nir.dtype))
    return np.tanh(ndvi * ndvi)


@dataclass(frozen=True)
class LossConfig:
    band_weights: tuple = BAND_WEIGHTS
    kndvi_weight: float = KNDVI_WEIGHT
    eps: float = KNDVI_EPS


def composite_loss(pred: ad.Tensor, target: np.ndarray, valid: np.ndarray,
                   cfg: LossConfig = LossConfig()) -> ad.Tensor:
    """Masked L1 over four bands plus the index from predicted bands.

    pred: (4, S, H, W) on the tape. target: same shape, constant.
    valid: (S, H, W) 0/1, constant; invalid pixels contribute nothing.
    """
    if pred.shape[0] != 4 or target.shape != pred.shape:
        raise ad.ShapeError(f"composite_loss: bad shapes {pred.shape} vs "
                            f"{target.shape}")
    dtype = pred.dtype
    v1 = np.ascontiguousarray(
        np.broadcast_to(valid[None], (1,) + valid.shape)).astype(dtype)
    target = target.astype(dtype, copy=False)

    total = None
    for b, w in enumerate(cfg.band_weights):
        term = ad.masked_mean_abs(ad.slice_channels(pred, b, b + 1),
                                  ad.Tensor(target[b:b + 1]),
                                  ad.Tensor(v1))
        term = ad.scale(term, w)
        total = term if total is None else ad.add(total, term)

    k_pred = kndvi(ad.slice_channels(pred, NIR_ROW, NIR_ROW + 1),
                   ad.slice_channels(pred, RED_ROW, RED_ROW + 1), cfg.eps)
    k_target = kndvi_np(target[NIR_ROW:NIR_ROW + 1],
                        target[RED_ROW:RED_ROW + 1], cfg.eps)
    k_term = ad.masked_mean_abs(k_pred, ad.Tensor(k_target), ad.Tensor(v1))
    return ad.add(total, ad.scale(k_term, cfg.kndvi_weight))


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    accum: int = 8

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class AdamW:
    """Decoupled weight decay, bias-corrected moments."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, params: dict, grads: dict) -> dict:
        """One update; returns the new parameter dict."""
        self.step_count += 1
        t = self.step_count
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        new_params = {}
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ad.ShapeError(f"{name}: grad shape {g.shape} != "
                                    f"param {p.shape}")
            m = self._m.get(name)
            if m is None:
                m = np.zeros(p.shape, dtype=np.float32)
                v = np.zeros(p.shape, dtype=np.float32)
            else:
                v = self._v[name]
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * v + (1.0 - c.beta2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            data = p.data - c.lr * update - c.lr * c.weight_decay * p.data
            new_params[name] = ad.Tensor(data.astype(np.float32),
                                         requires_grad=True)
        return new_params


@dataclass
class TrainItem:
    """One cube's training window, ready for the loop."""

    cube_id: str
    x_st: np.ndarray   # (9, S, H, W)
    x_s: np.ndarray    # (34, H, W)
    x_t: np.ndarray    # (24, S)
    target: np.ndarray  # (4, S-1, H, W) bands at steps 1..S-1
    valid: np.ndarray   # (S-1, H, W) 1 where clear at the target step

    @property
    def n_predictions(self) -> int:
        return self.target.shape[1]


def item_from_cube(cube: store.Minicube) -> TrainItem:
    if cube.n_steps < 2:
        raise ad.ShapeError("need at least two steps to form a target")
    return TrainItem(
        cube_id=cube.cube_id,
        x_st=cube.x_st,
        x_s=cube.x_s,
        x_t=cube.x_t,
        target=np.ascontiguousarray(cube.x_st[0:4, 1:]),
        valid=np.ascontiguousarray(1.0 - cube.cloud_mask[1:]),
    )


def load_training_items(manifest_path, split: str = "train") -> list:
    manifest = store.load_manifest(manifest_path)
    items = []
    for entry in manifest.cube_entries(split):
        cube = store.load_cube_by_entry(manifest_path, entry)
        window = store.temporal_slice(
            cube, "train",
            boundary=store.boundary_date(manifest))
        items.append(item_from_cube(window))
    if not items:
        raise ValueError(f"no cubes in split {split!r}")
    return items


def cube_loss_and_grads(mdl: md.Model, item: TrainItem,
                        loss_cfg: LossConfig = LossConfig()):
    """Forward over the window, backward, return (loss value, grads)."""
    with ad.Tape() as tape:
        pred = mdl.forward(ad.Tensor(item.x_st), ad.Tensor(item.x_s),
                           ad.Tensor(item.x_t),
                           n_steps=item.n_predictions)
        loss = composite_loss(pred, item.target, item.valid, loss_cfg)
        grads = tape.backward(loss)
    return float(loss.item()), {name: grads[p]
                                for name, p in mdl.params.items()}


def train_model(mdl: md.Model, items: list, optim_cfg: OptimConfig,
                loss_cfg: LossConfig = LossConfig(), epochs: int = 4,
                seed: int = 42, out_dir=None, log=None) -> dict:
    """Seeded shuffling, gradient accumulation, per-epoch checkpoints.

    Returns history: per-cube losses and per-epoch means. Deterministic
    for a fixed (model init, items, seed, thread count).
    """
    optimizer = AdamW(optim_cfg)
    history = {"cube_losses": [], "epoch_means": [], "n_updates": 0}
    out = pathlib.Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, 7000 + epoch]))
        order = rng.permutation(len(items))
        accum = None
        group = 0
        epoch_losses = []
        for pos, idx in enumerate(order):
            item = items[idx]
            loss_value, grads = cube_loss_and_grads(mdl, item, loss_cfg)
            epoch_losses.append(loss_value)
            history["cube_losses"].append(
                {"epoch": epoch, "position": pos, "cube_id": item.cube_id,
                 "loss": loss_value})
            if accum is None:
                accum = grads
            else:
                for name in accum:
                    accum[name] = accum[name] + grads[name]
            group += 1
            if group == optim_cfg.accum or pos == len(order) - 1:
                averaged = {name: g / np.float32(group)
                            for name, g in accum.items()}
                mdl.params = optimizer.step(mdl.params, averaged)
                accum = None
                group = 0
        mean_loss = float(np.mean(epoch_losses))
        history["epoch_means"].append(mean_loss)
        history["n_updates"] = optimizer.step_count
        if log is not None:
            log.info("epoch %d: mean loss %.6f", epoch, mean_loss)
        if out is not None:
            mdl.save(out / f"epoch_{epoch:02d}",
                     extra={"epoch": epoch, "mean_loss": mean_loss,
                            "optim": optim_cfg.to_dict(), "seed": seed})
    if out is not None:
        mdl.save(out / "final",
                 extra={"epochs": epochs, "seed": seed,
                        "optim": optim_cfg.to_dict(),
                        "epoch_means": history["epoch_means"]})
        write_loss_csv(out / "losses.csv", history)
    return history


def write_loss_csv(path, history: dict):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "position", "cube_id", "loss"])
        for row in history["cube_losses"]:
            writer.writerow([row["epoch"], row["position"], row["cube_id"],
                             f"{row['loss']:.8f}"])
