"""Registration network and hypernetwork with explicit flat weight layouts.

The registration U-Net consumes concat(moving, fixed) and emits a 2-channel
velocity field. Its weights arrive as one flat vector so they can come from
the hypernetwork or be trained directly (baseline models).

Checkpoint format "HMCKPT1": one JSON header line (terminated by \\n) with
config/layout metadata, then the raw little-endian float32 parameter vector.
"""
from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .losses import HyperParams


@dataclass
class RegNetConfig:
    encoder_channels: tuple = (16, 32, 32, 32)
    decoder_channels: tuple = (32, 32, 32, 32)
    extra_channels: tuple = (32, 16, 16)
    kernel: int = 3
    leaky_alpha: float = 0.2
    in_channels: int = 2
    out_channels: int = 2
    flow_scale: float = 1.0

    def validate(self):
        if len(self.encoder_channels) != len(self.decoder_channels):
            raise ValueError("encoder/decoder depth mismatch")
        if any(c < 1 for c in (*self.encoder_channels, *self.decoder_channels,
                               *self.extra_channels)):
            raise ValueError("channel counts must be >= 1")


# small config for CPU experiment sweeps; same topology, quarter the FLOPs
DESK_CONFIG = RegNetConfig(encoder_channels=(8, 16, 16, 16),
                           decoder_channels=(16, 16, 16, 16),
                           extra_channels=(16, 8, 8))


@dataclass
class LayerSpec:
    name: str
    shape: tuple
    offset: int
    fan_in: int
    fan_out: int


@dataclass
class ParamLayout:
    layers: list[LayerSpec]
    total_count: int

    def segment(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def validate(self):
        off = 0
        for l in self.layers:
            if l.offset != off:
                raise ValueError("layout segments not contiguous")
            off += int(np.prod(l.shape))
        if off != self.total_count:
            raise ValueError("layout does not cover total_count")


def _conv_layers(config: RegNetConfig, dims: int):
    """(name, cin, cout) sequence of the documented layer graph.

    Encoder stages 1..4 with downsampling after the first three; decoder
    stages with skip concatenation from the three pre-pool encoder outputs;
    extra convs; final flow conv. Skips feed decoder stages 2..4.
    """
    enc = config.encoder_channels
    dec = config.decoder_channels
    layers = []
    cin = config.in_channels
    for i, c in enumerate(enc):
        layers.append((f"enc{i}", cin, c))
        cin = c
    skips = list(enc[:-1])[::-1]  # pre-pool outputs of stages 1..3, deepest first
    for i, c in enumerate(dec):
        layers.append((f"dec{i}", cin, c))
        cin = c
        if i < len(skips):
            cin += skips[i]
    for i, c in enumerate(config.extra_channels):
        layers.append((f"extra{i}", cin, c))
        cin = c
    layers.append(("flow", cin, config.out_channels))
    return layers


def build_regnet_layout(config: RegNetConfig, dims: int = 2) -> ParamLayout:
    config.validate()
    k = config.kernel
    kshape = (k,) * dims
    specs = []
    off = 0
    for name, cin, cout in _conv_layers(config, dims):
        wshape = kshape + (cin, cout)
        fan = int(np.prod(kshape))
        specs.append(LayerSpec(f"{name}.w", wshape, off, fan * cin, fan * cout))
        off += int(np.prod(wshape))
        specs.append(LayerSpec(f"{name}.b", (cout,), off, fan * cin, fan * cout))
        off += cout
    layout = ParamLayout(specs, off)
    layout.validate()
    return layout


def param_count(config: RegNetConfig, dims: int = 2) -> int:
    """Total conv parameters, sum over layers of (k^dims * c_in + 1) * c_out.

    The 3D default config yields 299,683 under this skip accounting; the
    originally reported 313,507 for the same channel description is not
    reproducible without an undocumented variant, so the discrepancy is
    documented rather than forced.
    """
    return build_regnet_layout(config, dims).total_count


@dataclass
class HyperNetConfig:
    hidden: tuple = (64, 64, 64)
    n_inputs: int = 1

    def validate(self):
        if self.n_inputs < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("bad hypernetwork dims")


def build_hypernet_layout(config: HyperNetConfig, target_count: int) -> ParamLayout:
    config.validate()
    specs = []
    off = 0
    widths = (config.n_inputs,) + config.hidden + (target_count,)
    for i in range(len(widths) - 1):
        fi, fo = widths[i], widths[i + 1]
        specs.append(LayerSpec(f"fc{i}.w", (fi, fo), off, fi, fo))
        off += fi * fo
        specs.append(LayerSpec(f"fc{i}.b", (fo,), off, fi, fo))
        off += fo
    layout = ParamLayout(specs, off)
    layout.validate()
    return layout


def _seg(theta: ad.Tensor, layout: ParamLayout, name: str) -> ad.Tensor:
    spec = layout.segment(name)
    return ad.reshape(ad.slice1d(theta, spec.offset, int(np.prod(spec.shape))),
                      spec.shape)


def regnet_forward(theta_g: ad.Tensor, layout: ParamLayout, x: ad.Tensor,
                   config: RegNetConfig) -> ad.Tensor:
    """U-Net forward: x is concat(m, f) as (N,2,H,W); returns velocity (N,2,H,W)."""
    if theta_g.size != layout.total_count:
        raise ValueError("theta_g length does not match layout")
    n, c, h, w = x.shape
    depth = len(config.encoder_channels)
    if h % 2 ** (depth - 1) or w % 2 ** (depth - 1):
        raise ValueError("spatial dims must divide 2^(encoder depth - 1)")

    def conv(name, t):
        return ad.conv2d(t, _seg(theta_g, layout, f"{name}.w"),
                         _seg(theta_g, layout, f"{name}.b"))

    act = lambda t: ad.leaky_relu(t, config.leaky_alpha)
    skips = []
    t = x
    for i in range(depth):
        t = act(conv(f"enc{i}", t))
        if i < depth - 1:
            skips.append(t)
            t = ad.avg_pool2d(t)
    for i in range(depth):
        t = act(conv(f"dec{i}", t))
        if i < len(skips):
            t = ad.upsample2d(t)
            t = ad.concat([t, skips[-1 - i]], axis=1)
    for i in range(len(config.extra_channels)):
        t = act(conv(f"extra{i}", t))
    v = conv("flow", t)
    if config.flow_scale != 1.0:
        v = v * config.flow_scale
    return v


def hypernet_forward(theta_h: ad.Tensor, layout: ParamLayout, lam_vec: ad.Tensor,
                     config: HyperNetConfig) -> ad.Tensor:
    """Map normalized hyperparameter vector to a flat theta_g (tanh range)."""
    if np.any(lam_vec.data < -1e-6) or np.any(lam_vec.data > 1 + 1e-6):
        raise ValueError("hyperparameter inputs must be normalized to [0,1]")
    t = ad.reshape(lam_vec, (1, config.n_inputs))
    n_fc = len(config.hidden) + 1
    for i in range(n_fc):
        t = ad.dense(t, _seg(theta_h, layout, f"fc{i}.w"),
                     _seg(theta_h, layout, f"fc{i}.b"))
        t = ad.relu(t) if i < n_fc - 1 else ad.tanh(t)
    return ad.reshape(t, (t.size,))


def init_glorot(layout: ParamLayout, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases, fully seeded."""
    rng = np.random.default_rng(seed)
    out = np.zeros(layout.total_count, dtype=np.float32)
    for spec in layout.layers:
        n = int(np.prod(spec.shape))
        if spec.name.endswith(".b"):
            continue
        bound = np.sqrt(6.0 / (spec.fan_in + spec.fan_out))
        out[spec.offset:spec.offset + n] = rng.uniform(-bound, bound, n)
    return out


def init_hypernet(hyper_layout: ParamLayout, reg_layout: ParamLayout,
                  seed: int) -> np.ndarray:
    """Glorot hypernetwork whose initial output equals a Glorot registration
    network.

    With zero biases the tanh head emits near-zero weights, which starts the
    registration network at the identity and stalls optimization for the
    whole early phase. Setting the head bias to atanh of a Glorot draw makes
    step 0 match a directly initialized network, so amortized and baseline
    models train on equal footing at equal step budgets.
    """
    theta_h = init_glorot(hyper_layout, seed)
    target = init_glorot(reg_layout, seed)
    n_fc = sum(1 for l in hyper_layout.layers if l.name.endswith(".w"))
    spec = hyper_layout.segment(f"fc{n_fc - 1}.b")
    if int(np.prod(spec.shape)) != reg_layout.total_count:
        raise ValueError("hypernet head does not match registration layout")
    theta_h[spec.offset:spec.offset + reg_layout.total_count] = np.arctanh(
        np.clip(target, -0.99, 0.99))
    return theta_h


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    kind: str                       # "hyper" | "baseline"
    params: np.ndarray              # float32 flat vector (theta_h or theta_g)
    reg_config: RegNetConfig
    hyper_config: HyperNetConfig | None
    active: tuple                   # active hyperparameter names
    fixed_hp: dict                  # defaults / baseline-fixed values
    metric: str
    seed: int
    step: int
    svf_steps: int = 7
    label_subset: tuple | None = None   # semi-supervised training labels

    def reg_layout(self) -> ParamLayout:
        return build_regnet_layout(self.reg_config)

    def hyper_layout(self) -> ParamLayout:
        return build_hypernet_layout(self.hyper_config, self.reg_layout().total_count)

    def hyperparams(self, **overrides) -> HyperParams:
        vals = dict(self.fixed_hp)
        vals.update(overrides)
        return HyperParams(active=tuple(self.active), **vals)

    def theta_g(self, hp: HyperParams) -> ad.Tensor:
        """Flat registration weights for the given hyperparameters (no grad)."""
        if self.kind == "baseline":
            return ad.Tensor(self.params)
        with ad.no_grad():
            return hypernet_forward(ad.Tensor(self.params), self.hyper_layout(),
                                    ad.Tensor(hp.to_vector()), self.hyper_config)

    def digest(self) -> str:
        return hashlib.sha256(self.params.tobytes()).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path):
    header = {
        "magic": "HMCKPT1",
        "kind": ckpt.kind,
        "reg_config": asdict(ckpt.reg_config),
        "hyper_config": asdict(ckpt.hyper_config) if ckpt.hyper_config else None,
        "active": list(ckpt.active),
        "fixed_hp": ckpt.fixed_hp,
        "metric": ckpt.metric,
        "seed": ckpt.seed,
        "step": ckpt.step,
        "svf_steps": ckpt.svf_steps,
        "label_subset": list(ckpt.label_subset) if ckpt.label_subset else None,
        "count": int(ckpt.params.size),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(ckpt.params.astype("<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("magic") != "HMCKPT1":
            raise ValueError("not a HMCKPT1 checkpoint")
        payload = fh.read()
    if len(payload) != header["count"] * 4:
        raise ValueError("checkpoint payload truncated")
    rc = dict(header["reg_config"])
    for key in ("encoder_channels", "decoder_channels", "extra_channels"):
        rc[key] = tuple(rc[key])
    hc = header["hyper_config"]
    return Checkpoint(
        kind=header["kind"],
        params=np.frombuffer(payload, dtype="<f4").copy(),
        reg_config=RegNetConfig(**rc),
        hyper_config=HyperNetConfig(hidden=tuple(hc["hidden"]),
                                    n_inputs=hc["n_inputs"]) if hc else None,
        active=tuple(header["active"]),
        fixed_hp=header["fixed_hp"],
        metric=header["metric"],
        seed=header["seed"],
        step=header["step"],
        svf_steps=header["svf_steps"],
        label_subset=tuple(header["label_subset"]) if header["label_subset"] else None,
    )
