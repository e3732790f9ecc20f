"""Training and validation objectives.

All differentiable paths run on autodiff Tensors shaped (N,C,H,W). The
composite losses combine a similarity term, the velocity-smoothness
regularizer, and (semi-supervised) a soft Dice overlap term:

  total = (1 - lam) * sim + lam * reg                      (unsupervised)
  total = (1-lam)(1-gamma) * sim + lam * reg
          + (1-lam) * gamma * seg                          (semi-supervised)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import deform

NCC_WINDOWS = (3, 5, 7, 9, 11, 13, 15)
MSE_SIGMA2 = 0.01      # assumed constant image-noise variance on [0,1] data
NCC_EPS = 1e-5
DICE_EPS = 1e-5


@dataclass
class HyperParams:
    """Loss hyperparameters; `active` lists the amortized entries."""
    lam: float = 0.5
    gamma: float = 0.0
    ncc_window: int = 9
    nmi_bins: int = 32
    active: tuple = ("lam",)

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam outside [0,1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma outside [0,1]")
        if self.ncc_window not in NCC_WINDOWS:
            raise ValueError(f"ncc_window must be odd in {NCC_WINDOWS}")
        if self.nmi_bins < 4:
            raise ValueError("nmi_bins must be >= 4")

    def to_vector(self) -> np.ndarray:
        """Normalized network-input vector, one entry per active hyperparameter."""
        self.validate()
        vals = {"lam": self.lam, "gamma": self.gamma,
                "ncc_window": self.ncc_window / 15.0,
                "nmi_bins": self.nmi_bins / 64.0}
        return np.array([vals[name] for name in self.active], dtype=np.float32)


@dataclass
class LossReport:
    total: float
    sim: float
    reg: float
    seg: float | None = None
    weights: dict = field(default_factory=dict)

    def check_recombines(self, tol=1e-6):
        lam = self.weights["lam"]
        gamma = self.weights.get("gamma", 0.0)
        expect = (1 - lam) * (1 - gamma) * self.sim + lam * self.reg
        if self.seg is not None:
            expect += (1 - lam) * gamma * self.seg
        if abs(expect - self.total) > tol * max(1.0, abs(self.total)):
            raise AssertionError(f"report total {self.total} != recombined {expect}")

    def to_json(self) -> str:
        return json.dumps({"total": self.total, "sim": self.sim, "reg": self.reg,
                           "seg": self.seg, "weights": self.weights})


# ---------------------------------------------------------------- similarity

def mse(f: ad.Tensor, warped: ad.Tensor, sigma2: float = MSE_SIGMA2) -> ad.Tensor:
    if f.shape != warped.shape:
        raise ValueError("mse shape mismatch")
    return ad.mean(ad.square(f - warped)) * (1.0 / sigma2)


def local_ncc(f: ad.Tensor, warped: ad.Tensor, window: int = 9) -> ad.Tensor:
    """1 - mean squared local correlation over window x window neighborhoods."""
    if window % 2 == 0 or window < 3:
        raise ValueError("NCC window must be odd and >= 3")
    if f.shape != warped.shape:
        raise ValueError("ncc shape mismatch")
    n, c, h, w = f.shape
    maps = ad.concat([f, warped, ad.square(f), ad.square(warped), f * warped], axis=1)
    flat = ad.reshape(maps, (n * 5 * c, 1, h, w))
    ones = ad.Tensor(np.ones((window, window, 1, 1), dtype=f.data.dtype))
    sums = ad.reshape(ad.conv2d(flat, ones), (n, 5 * c, h, w))
    # per-pixel valid-window counts so border statistics are exact
    with ad.no_grad():
        counts = ad.conv2d(ad.Tensor(np.ones((1, 1, h, w), dtype=f.data.dtype)),
                           ones).data
    inv_n = ad.Tensor(1.0 / counts)
    sf = _chan(sums, 0, c)
    sw = _chan(sums, c, c)
    sff = _chan(sums, 2 * c, c)
    sww = _chan(sums, 3 * c, c)
    sfw = _chan(sums, 4 * c, c)
    cross = sfw - sf * sw * inv_n
    # relu guards against tiny negative variances from float cancellation
    var_f = ad.relu(sff - ad.square(sf) * inv_n)
    var_w = ad.relu(sww - ad.square(sw) * inv_n)
    cc = ad.square(cross) / (var_f * var_w + NCC_EPS)
    return 1.0 - ad.mean(cc)


def _chan(t: ad.Tensor, start: int, count: int) -> ad.Tensor:
    n, c, h, w = t.shape
    flat = ad.reshape(t, (n * c * h * w,))
    # channels are contiguous per batch item only when n == 1; general path
    # slices each batch item and re-concatenates
    if n == 1:
        seg = ad.slice1d(flat, start * h * w, count * h * w)
        return ad.reshape(seg, (1, count, h, w))
    parts = []
    for b in range(n):
        off = (b * c + start) * h * w
        parts.append(ad.reshape(ad.slice1d(flat, off, count * h * w), (1, count, h, w)))
    return ad.concat(parts, axis=0)


def nmi(f: ad.Tensor, warped: ad.Tensor, bins: int = 32) -> ad.Tensor:
    """2 - NMI with a soft (Gaussian-kernel) joint histogram; NMI in [1,2]."""
    if bins < 4:
        raise ValueError("bins must be >= 4")
    for t in (f, warped):
        if t.data.min() < -1e-3 or t.data.max() > 1.0 + 1e-3:
            raise ValueError("nmi expects intensities in [0,1]")
    centers = (np.arange(bins, dtype=f.data.dtype) + 0.5) / bins
    sigma_b = 0.25 / bins  # quarter bin width: keeps NMI(f,f) near its 2.0 ceiling
    p = f.size
    wf = _parzen_weights(ad.reshape(f, (p, 1)), centers, sigma_b)
    ww = _parzen_weights(ad.reshape(warped, (p, 1)), centers, sigma_b)
    joint = ad.matmul(_transpose2d(wf), ww) * (1.0 / p)
    px = ad.sum_(joint, axis=1)
    py = ad.sum_(joint, axis=0)
    hx = -ad.sum_(px * ad.log(px))
    hy = -ad.sum_(py * ad.log(py))
    hxy = -ad.sum_(joint * ad.log(joint))
    return 2.0 - (hx + hy) / hxy


def _parzen_weights(x: ad.Tensor, centers: np.ndarray, sigma_b: float) -> ad.Tensor:
    c = ad.Tensor(centers[None, :])
    d = x - c
    w = ad.exp(ad.square(d) * (-0.5 / (sigma_b * sigma_b)))
    return w / (ad.sum_(w, axis=1, keepdims=True) + 1e-12)


def _transpose2d(t: ad.Tensor) -> ad.Tensor:
    out = ad.Tensor(t.data.T.copy())
    return ad._register(out, (t,), lambda g: (g.T.copy(),))


# ------------------------------------------------------------- regularization

def grad_energy(v: ad.Tensor) -> ad.Tensor:
    """Mean (1/2)||J_v||_F^2 via forward differences, replicate boundary."""
    n, c, h, w = v.shape
    dx, dy = ad.spatial_gradient(v)
    total = ad.sum_(ad.square(dx)) + ad.sum_(ad.square(dy))
    return total * (0.5 / (n * h * w))


# --------------------------------------------------------------------- dice

def soft_dice(seg_f: ad.Tensor, warped_soft: ad.Tensor, foreground=None):
    """(loss Tensor, per-label mean Dice array over foreground channels).

    Inputs are soft one-hot stacks (N,K,H,W) with matching channels.
    """
    if seg_f.shape != warped_soft.shape:
        raise ValueError("one-hot channel mismatch")
    n, k, h, w = seg_f.shape
    inter = ad.sum_(seg_f * warped_soft, axis=(2, 3))
    sa = ad.sum_(seg_f, axis=(2, 3))
    sb = ad.sum_(warped_soft, axis=(2, 3))
    dice = (inter * 2.0) / (sa + sb + DICE_EPS)          # (N,K)
    fg = list(range(1, k)) if foreground is None else list(foreground)
    mask = np.zeros((1, k), dtype=seg_f.data.dtype)
    mask[0, fg] = 1.0
    mean_dice = ad.sum_(dice * ad.Tensor(mask)) * (1.0 / (n * len(fg)))
    loss = 1.0 - mean_dice
    per_label = dice.data.mean(axis=0)[fg]
    return loss, per_label


def hard_dice(a: np.ndarray, b: np.ndarray, labels) -> np.ndarray:
    """Per-label Dice between two integer label maps."""
    out = np.zeros(len(labels))
    for i, lab in enumerate(labels):
        am, bm = a == lab, b == lab
        denom = am.sum() + bm.sum()
        out[i] = 2.0 * np.logical_and(am, bm).sum() / denom if denom else 1.0
    return out


# ---------------------------------------------------------------- composites

def similarity(f: ad.Tensor, warped: ad.Tensor, metric: str, hp: HyperParams) -> ad.Tensor:
    if metric == "mse":
        return mse(f, warped)
    if metric == "ncc":
        return local_ncc(f, warped, hp.ncc_window)
    if metric == "nmi":
        return nmi(f, warped, hp.nmi_bins)
    raise ValueError(f"unknown similarity metric {metric!r}")


def loss_unsupervised(f: ad.Tensor, m: ad.Tensor, v: ad.Tensor, hp: HyperParams,
                      metric: str = "mse", svf_steps: int = 7):
    """Velocity -> diffeomorphism -> warped moving -> weighted total.

    Returns (total Tensor, LossReport, displacement Tensor).
    """
    hp.validate()
    phi = deform.integrate_svf(v, svf_steps)
    warped = ad.bilinear_sample(m, phi)
    sim = similarity(f, warped, metric, hp)
    reg = grad_energy(v)
    total = sim * (1.0 - hp.lam) + reg * hp.lam
    report = LossReport(total=total.item(), sim=sim.item(), reg=reg.item(),
                        weights={"lam": hp.lam})
    return total, report, phi


def loss_semisupervised(f: ad.Tensor, m: ad.Tensor, soft_sf: np.ndarray,
                        soft_sm: np.ndarray, v: ad.Tensor, hp: HyperParams,
                        metric: str = "mse", svf_steps: int = 7,
                        foreground=None):
    """Semi-supervised composite; soft_s* are (N,K,H,W) one-hot stacks."""
    hp.validate()
    phi = deform.integrate_svf(v, svf_steps)
    warped = ad.bilinear_sample(m, phi)
    sim = similarity(f, warped, metric, hp)
    reg = grad_energy(v)
    warped_soft = ad.bilinear_sample(ad.Tensor(soft_sm), phi)
    seg, _ = soft_dice(ad.Tensor(soft_sf), warped_soft, foreground)
    total = (sim * ((1.0 - hp.lam) * (1.0 - hp.gamma))
             + reg * hp.lam
             + seg * ((1.0 - hp.lam) * hp.gamma))
    report = LossReport(total=total.item(), sim=sim.item(), reg=reg.item(),
                        seg=seg.item(), weights={"lam": hp.lam, "gamma": hp.gamma})
    return total, report, phi
