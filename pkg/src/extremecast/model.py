"""Recurrent forecast models over the tape engine.

Three variants share one stack shape: a spatially-aware recurrent cell
(3x3 kernels), a per-pixel recurrent cell (1x1 kernels), and a memoryless
convolutional cell. All predict next-step reflectance as a residual on top
of the causal climatology channels, so a model with all-zero parameters
reproduces the climatology baseline exactly.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import binio

VARIANTS = ("convlstm", "lstm", "conv")
N_BANDS = 4
CLIMA_SLICE = (4, 8)  # rows of x_st holding the next-step climatology


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "convlstm"
    n_layers: int = 3
    hidden: int = 60
    head_hidden: int = 10
    in_channels: int = 67  # 9 spatiotemporal + 34 static + 24 temporal

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.n_layers, self.hidden, self.head_hidden) < 1:
            raise ValueError("layer sizes must be positive")

    @property
    def kernel_size(self) -> int:
        return 1 if self.variant == "lstm" else 3

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        return cls(**payload)


def layer_in_channels(cfg: ModelConfig, layer: int) -> int:
    return cfg.in_channels if layer == 0 else cfg.hidden


# Hidden widths chosen so the three variants land within 1% of each other
# in learnable parameters (roughly 162k), small enough for CPU epochs.
DESK_HIDDEN = {"convlstm": 24, "lstm": 83, "conv": 79}


def desk_config(variant: str) -> ModelConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return ModelConfig(variant=variant, hidden=DESK_HIDDEN[variant])


def count_params(cfg: ModelConfig) -> int:
    """Analytic learnable-parameter count."""
    gates = 4 if cfg.variant != "conv" else 1
    k2 = cfg.kernel_size ** 2
    total = 0
    for layer in range(cfg.n_layers):
        cin = layer_in_channels(cfg, layer)
        if cfg.variant == "conv":
            cin_eff = cin
        else:
            cin_eff = cin + cfg.hidden  # recurrent input concat
        total += gates * cfg.hidden * cin_eff * k2 + gates * cfg.hidden
    total += cfg.head_hidden * cfg.hidden + cfg.head_hidden
    total += N_BANDS * cfg.head_hidden + N_BANDS
    return total


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Uniform(-1/sqrt(fan_in), +) init; forget-gate bias starts at +1."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    params = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    gates = 4 if cfg.variant != "conv" else 1
    k = cfg.kernel_size
    for layer in range(cfg.n_layers):
        cin = layer_in_channels(cfg, layer)
        if cfg.variant != "conv":
            cin = cin + cfg.hidden
        fan_in = cin * k * k
        kernel = uniform((gates * cfg.hidden, cin, k, k), fan_in)
        bias = uniform((gates * cfg.hidden,), fan_in)
        if cfg.variant != "conv":
            bias[3 * cfg.hidden:] += 1.0  # forget gate opens by default
        params[f"layer{layer}.kernel"] = ad.Tensor(kernel,
                                                   requires_grad=True)
        params[f"layer{layer}.bias"] = ad.Tensor(bias, requires_grad=True)

    params["head.kernel"] = ad.Tensor(
        uniform((cfg.head_hidden, cfg.hidden, 1, 1), cfg.hidden),
        requires_grad=True)
    params["head.bias"] = ad.Tensor(
        uniform((cfg.head_hidden,), cfg.hidden), requires_grad=True)
    params["out.kernel"] = ad.Tensor(
        uniform((N_BANDS, cfg.head_hidden, 1, 1), cfg.head_hidden),
        requires_grad=True)
    params["out.bias"] = ad.Tensor(
        uniform((N_BANDS,), cfg.head_hidden), requires_grad=True)
    return params


def params_size(params: dict) -> int:
    return sum(p.size for p in params.values())


def zero_params(params: dict) -> dict:
    return {k: ad.Tensor(np.zeros(p.shape, dtype=np.float32),
                         requires_grad=True)
            for k, p in params.items()}


def _split_gates(z: ad.Tensor, hidden: int):
    i = ad.slice_channels(z, 0, hidden)
    g = ad.slice_channels(z, hidden, 2 * hidden)
    o = ad.slice_channels(z, 2 * hidden, 3 * hidden)
    f = ad.slice_channels(z, 3 * hidden, 4 * hidden)
    return i, g, o, f


def cell_step(cfg: ModelConfig, params: dict, layer: int,
              x: ad.Tensor, h: ad.Tensor, c: ad.Tensor):
    """One recurrent update; the conv variant ignores and passes state."""
    kernel = params[f"layer{layer}.kernel"]
    bias = params[f"layer{layer}.bias"]
    if cfg.variant == "conv":
        z = ad.add_channel_bias(ad.conv2d(x, kernel, cfg.padding), bias)
        return ad.tanh(z), c
    z = ad.add_channel_bias(
        ad.conv2d(ad.concat_channels([x, h]), kernel, cfg.padding), bias)
    i, g, o, f = _split_gates(z, cfg.hidden)
    c_new = ad.add(ad.mul(ad.sigmoid(f), c),
                   ad.mul(ad.sigmoid(i), ad.tanh(g)))
    h_new = ad.mul(ad.sigmoid(o), ad.tanh(c_new))
    return h_new, c_new


def model_forward(cfg: ModelConfig, params: dict, x_st: ad.Tensor,
                  x_s: ad.Tensor, x_t: ad.Tensor,
                  n_steps: int = None) -> ad.Tensor:
    """Predictions (4, T, H, W); entry t estimates the bands at step t+1.

    The head output is an anomaly added onto the next-step climatology
    channels carried in x_st.
    """
    C, T, H, W = x_st.shape
    if n_steps is None:
        n_steps = T
    if not 1 <= n_steps <= T:
        raise ad.ShapeError(f"n_steps {n_steps} outside 1..{T}")
    if x_t.shape[1] != T:
        raise ad.ShapeError("x_st and x_t disagree on T")

    h = [ad.zeros((cfg.hidden, H, W), dtype=x_st.dtype)
         for _ in range(cfg.n_layers)]
    c = [ad.zeros((cfg.hidden, H, W), dtype=x_st.dtype)
         for _ in range(cfg.n_layers)]
    preds = []
    for t in range(n_steps):
        xt_map = ad.broadcast_spatial(ad.index_time(x_t, t), H, W)
        x = ad.concat_channels([ad.index_time(x_st, t), x_s, xt_map])
        for layer in range(cfg.n_layers):
            h[layer], c[layer] = cell_step(cfg, params, layer, x,
                                           h[layer], c[layer])
            x = h[layer]
        hid = ad.tanh(ad.add_channel_bias(
            ad.conv2d(x, params["head.kernel"]), params["head.bias"]))
        anomaly = ad.add_channel_bias(
            ad.conv2d(hid, params["out.kernel"]), params["out.bias"])
        clima = ad.slice_channels(ad.index_time(x_st, t), *CLIMA_SLICE)
        preds.append(ad.add(anomaly, clima))
    return ad.stack_steps(preds)


class Model:
    """Config plus parameters, with persistence."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params

    @classmethod
    def initialized(cls, cfg: ModelConfig, seed: int) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    def forward(self, x_st, x_s, x_t, n_steps=None) -> ad.Tensor:
        return model_forward(self.cfg, self.params, x_st, x_s, x_t, n_steps)

    def save(self, out_dir, extra: dict = None):
        out = pathlib.Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "config": self.cfg.to_dict(),
            "params": {name: list(p.shape)
                       for name, p in sorted(self.params.items())},
            "extra": extra or {},
        }
        (out / "model.json").write_text(
            json.dumps(meta, indent=1, sort_keys=True))
        for name, p in self.params.items():
            binio.write_tensor(out / (name + ".bin"), p.data)

    @classmethod
    def load(cls, in_dir) -> "Model":
        src = pathlib.Path(in_dir)
        meta = json.loads((src / "model.json").read_text())
        cfg = ModelConfig.from_dict(meta["config"])
        params = {}
        for name, shape in meta["params"].items():
            arr = binio.read_tensor(src / (name + ".bin"))
            if list(arr.shape) != shape:
                raise binio.SchemaError(
                    f"{name}: stored shape {arr.shape} != {shape}")
            params[name] = ad.Tensor(arr, requires_grad=True)
        return cls(cfg, params)

    @property
    def meta(self) -> dict:
        return {"variant": self.cfg.variant,
                "n_params": params_size(self.params)}
