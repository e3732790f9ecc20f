"""Amortized training loop, baseline fixed-hyperparameter training, ADAM.

One hyperparameter draw per mini-batch; the hypernetwork output is shared
across the batch. Baselines train the registration weights directly with
the identical loss expression.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .grid import Dataset
from .losses import (NCC_WINDOWS, HyperParams, loss_semisupervised,
                     loss_unsupervised)
from .networks import (Checkpoint, HyperNetConfig, RegNetConfig, DESK_CONFIG,
                       build_hypernet_layout, build_regnet_layout,
                       hypernet_forward, init_glorot, init_hypernet,
                       regnet_forward)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class HyperPrior:
    """Per-hyperparameter sampling distribution."""
    lam: tuple = (0.0, 1.0)
    gamma: tuple = (0.0, 1.0)
    ncc_window: tuple = NCC_WINDOWS
    nmi_bins: tuple = (32,)
    active: tuple = ("lam",)

    def validate(self):
        for lo, hi in (self.lam, self.gamma):
            if not lo < hi:
                raise ValueError("uniform prior needs lo < hi")
        if not self.ncc_window or not self.nmi_bins:
            raise ValueError("discrete prior sets must be non-empty")

    def support(self, name: str):
        return getattr(self, name)


def sample_hyperparams(prior: HyperPrior, rng: np.random.Generator,
                       defaults: dict | None = None) -> HyperParams:
    """One draw per active hyperparameter; inactive entries stay at defaults."""
    vals = {"lam": 0.5, "gamma": 0.0, "ncc_window": 9, "nmi_bins": 32}
    if defaults:
        vals.update(defaults)
    for name in prior.active:
        if name in ("lam", "gamma"):
            lo, hi = prior.support(name)
            vals[name] = float(rng.uniform(lo, hi))
        else:
            choices = prior.support(name)
            vals[name] = int(choices[rng.integers(len(choices))])
    return HyperParams(active=tuple(prior.active), **vals)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-4
    metric: str = "mse"
    semi_supervised: bool = False
    label_subset: tuple = ()          # training labels for the seg term
    seed: int = 0
    svf_steps: int = 7
    reg_config: RegNetConfig = field(default_factory=lambda: DESK_CONFIG)
    checkpoint_every: int = 0         # 0 = only final

    def validate(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch size must be >= 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64),
                   np.zeros_like(params, dtype=np.float64))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float) -> np.ndarray:
    """Bias-corrected ADAM update; skips (and logs) non-finite gradients."""
    if not np.all(np.isfinite(grads)):
        log.warning("non-finite gradients at t=%d; step skipped", state.t)
        return params
    state.t += 1
    g = grads.astype(np.float64)
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1 ** state.t)
    vhat = state.v / (1 - state.beta2 ** state.t)
    return (params - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params.dtype)


def _curve_row(step, hp, report):
    return {"step": step, "lam": hp.lam, "gamma": hp.gamma, "ws": hp.ncc_window,
            "total": report.total, "sim": report.sim, "reg": report.reg,
            "seg": report.seg if report.seg is not None else ""}


def write_curve(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lam", "gamma", "ws",
                                           "total", "sim", "reg", "seg"])
        w.writeheader()
        w.writerows(rows)


def _batch_loss(theta_g, reg_layout, pairs, hp, config, onehot=None):
    m, f = mdl.batch_images(pairs)
    x = ad.Tensor(np.concatenate([m, f], axis=1))
    v = regnet_forward(theta_g, reg_layout, x, config.reg_config)
    ft, mt = ad.Tensor(f), ad.Tensor(m)
    if config.semi_supervised:
        sm, sf = onehot
        return loss_semisupervised(ft, mt, sf, sm, v, hp, config.metric,
                                   config.svf_steps)
    return loss_unsupervised(ft, mt, v, hp, config.metric, config.svf_steps)


def _training_labels(data: Dataset, config: TrainConfig):
    if not config.semi_supervised:
        return None
    subset = config.label_subset or tuple(l for l in data.label_set() if l != 0)
    return (0,) + tuple(l for l in subset if l != 0)


def _check_divergence(recent):
    if len(recent) >= 20 and not np.isfinite(np.mean(recent[-20:])):
        raise TrainingDiverged(
            f"running mean loss non-finite over last 20 steps: {recent[-5:]}")


def train_hypermorph(data: Dataset, config: TrainConfig, prior: HyperPrior,
                     progress=None):
    """Train the hypernetwork over the hyperparameter prior.

    Returns (Checkpoint, curve rows). Fully deterministic for a given seed.
    """
    config.validate()
    prior.validate()
    train_pairs = data.subset("train")
    if not train_pairs:
        raise ValueError("dataset has no train split")
    rng = np.random.default_rng(config.seed)
    reg_layout = build_regnet_layout(config.reg_config)
    hc = HyperNetConfig(n_inputs=len(prior.active))
    hl = build_hypernet_layout(hc, reg_layout.total_count)
    theta_h = init_hypernet(hl, reg_layout, config.seed)
    state = AdamState.for_params(theta_h)
    labels = _training_labels(data, config)
    seg_cache = {}
    rows, recent = [], []
    for step in range(config.steps):
        hp = sample_hyperparams(prior, rng)
        idx = rng.choice(len(train_pairs), size=config.batch_size, replace=True)
        pairs = [train_pairs[i] for i in idx]
        onehot = None
        if config.semi_supervised:
            key = tuple(idx)
            if key not in seg_cache:
                onehot = mdl.batch_onehot(pairs, labels)
                if len(seg_cache) < 256:
                    seg_cache[key] = onehot
            else:
                onehot = seg_cache[key]
        th = ad.Tensor(theta_h, requires_grad=True)
        with ad.record() as tape:
            theta_g = hypernet_forward(th, hl, ad.Tensor(hp.to_vector()), hc)
            total, report, _ = _batch_loss(theta_g, reg_layout, pairs, hp,
                                           config, onehot)
        ad.backward(total, tape)
        theta_h = adam_step(theta_h, th.grad, state, config.learning_rate)
        rows.append(_curve_row(step, hp, report))
        recent.append(report.total)
        _check_divergence(recent)
        if progress and step % 100 == 0:
            progress(step, report.total)
    ckpt = Checkpoint(kind="hyper", params=theta_h, reg_config=config.reg_config,
                      hyper_config=hc, active=tuple(prior.active),
                      fixed_hp={"lam": 0.5, "gamma": 0.0, "ncc_window": 9,
                                "nmi_bins": 32},
                      metric=config.metric, seed=config.seed, step=config.steps,
                      svf_steps=config.svf_steps,
                      label_subset=labels)
    return ckpt, rows


def train_baseline(data: Dataset, config: TrainConfig, hp_fixed: HyperParams,
                   progress=None):
    """Train registration weights directly at one fixed hyperparameter setting."""
    config.validate()
    hp_fixed.validate()
    train_pairs = data.subset("train")
    if not train_pairs:
        raise ValueError("dataset has no train split")
    rng = np.random.default_rng(config.seed)
    reg_layout = build_regnet_layout(config.reg_config)
    theta_g = init_glorot(reg_layout, config.seed)
    state = AdamState.for_params(theta_g)
    labels = _training_labels(data, config)
    rows, recent = [], []
    for step in range(config.steps):
        rng.uniform()  # keep the draw sequence aligned with train_hypermorph
        idx = rng.choice(len(train_pairs), size=config.batch_size, replace=True)
        pairs = [train_pairs[i] for i in idx]
        onehot = mdl.batch_onehot(pairs, labels) if config.semi_supervised else None
        tg = ad.Tensor(theta_g, requires_grad=True)
        with ad.record() as tape:
            total, report, _ = _batch_loss(tg, reg_layout, pairs, hp_fixed,
                                           config, onehot)
        ad.backward(total, tape)
        theta_g = adam_step(theta_g, tg.grad, state, config.learning_rate)
        rows.append(_curve_row(step, hp_fixed, report))
        recent.append(report.total)
        _check_divergence(recent)
        if progress and step % 100 == 0:
            progress(step, report.total)
    ckpt = Checkpoint(kind="baseline", params=theta_g,
                      reg_config=config.reg_config, hyper_config=None,
                      active=tuple(hp_fixed.active),
                      fixed_hp={"lam": hp_fixed.lam, "gamma": hp_fixed.gamma,
                                "ncc_window": hp_fixed.ncc_window,
                                "nmi_bins": hp_fixed.nmi_bins},
                      metric=config.metric, seed=config.seed, step=config.steps,
                      svf_steps=config.svf_steps,
                      label_subset=labels)
    return ckpt, rows
