"""Shared forward pipeline: pairs -> velocity -> diffeomorphism -> metrics.

Used by training, tuning, evaluation, and the HTTP server so every surface
computes registration through the identical code path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import deform
from .grid import PairRecord, one_hot
from .losses import HyperParams, hard_dice
from .networks import Checkpoint, regnet_forward


def batch_images(pairs: list[PairRecord]):
    """(moving, fixed) stacks shaped (N,1,H,W), float32."""
    m = np.stack([p.moving.data for p in pairs])[:, None]
    f = np.stack([p.fixed.data for p in pairs])[:, None]
    return m, f


def _restrict(seg, label_set):
    """Fold labels outside label_set into background before one-hot."""
    keep = np.isin(seg.labels, [l for l in label_set if l != 0])
    masked = np.where(keep, seg.labels, 0).astype(seg.labels.dtype)
    restricted = type(seg)(seg.height, seg.width, masked, list(label_set))
    return one_hot(restricted, label_set)


def batch_onehot(pairs: list[PairRecord], label_set):
    sm = np.stack([_restrict(p.moving_seg, label_set) for p in pairs])
    sf = np.stack([_restrict(p.fixed_seg, label_set) for p in pairs])
    return sm, sf


def velocities(theta_g: ad.Tensor, pairs, reg_config, layout) -> ad.Tensor:
    m, f = batch_images(pairs)
    x = ad.Tensor(np.concatenate([m, f], axis=1))
    return regnet_forward(theta_g, layout, x, reg_config)


@dataclass
class Registration:
    """Non-differentiable evaluation bundle for one batch of pairs."""
    disp: np.ndarray                 # (N,2,H,W)
    warped: np.ndarray               # (N,H,W) warped moving images
    warped_labels: list[np.ndarray]  # hard label maps
    dice: np.ndarray                 # (N, K_fg) per foreground label
    mean_disp: np.ndarray            # (N,)
    negdet_frac: np.ndarray          # (N,)
    min_det: np.ndarray              # (N,)


def register_pairs(ckpt: Checkpoint, pairs: list[PairRecord],
                   hp: HyperParams) -> Registration:
    """Run the trained model on pairs at the given hyperparameters."""
    layout = ckpt.reg_layout()
    with ad.no_grad():
        theta_g = ckpt.theta_g(hp)
        v = velocities(theta_g, pairs, ckpt.reg_config, layout)
        disp = deform.integrate_svf(v, ckpt.svf_steps)
        m, _ = batch_images(pairs)
        warped = ad.bilinear_sample(ad.Tensor(m), disp).data[:, 0]
    label_set = pairs[0].fixed_seg.label_set
    fg = [l for l in label_set if l != 0]
    warped_labels, dice, mean_disp, negdet, mindet = [], [], [], [], []
    for i, p in enumerate(pairs):
        hard, _ = deform.warp_labels_np(p.moving_seg, disp.data[i], label_set)
        warped_labels.append(hard.labels)
        dice.append(hard_dice(p.fixed_seg.labels, hard.labels, fg))
        mean_disp.append(float(np.abs(disp.data[i]).mean()))
        md, frac = deform.jacobian_stats(disp.data[i])
        negdet.append(frac)
        mindet.append(md)
    return Registration(disp=disp.data, warped=warped,
                        warped_labels=warped_labels, dice=np.array(dice),
                        mean_disp=np.array(mean_disp),
                        negdet_frac=np.array(negdet), min_det=np.array(mindet))
