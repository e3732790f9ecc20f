"""Diffeomorphic deformation machinery.

Displacement convention throughout: a field u with phi(p) = p + u(p),
channels ordered (u_x, u_y) = (columns, rows), units of pixels.
Differentiable entry points take/return autodiff Tensors shaped (N,2,H,W);
*_np helpers wrap single fields as plain numpy arrays shaped (2,H,W).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .grid import Grid2D, LabelMap, one_hot


def integrate_svf(v: ad.Tensor, steps: int = 7) -> ad.Tensor:
    """Scaling and squaring: u0 = v / 2^steps, then `steps` self-compositions."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not np.all(np.isfinite(v.data)):
        raise ValueError("non-finite velocity field")
    u = v * (1.0 / (2 ** steps))
    for _ in range(steps):
        u = compose(u, u)
    return u


def compose(u1: ad.Tensor, u2: ad.Tensor) -> ad.Tensor:
    """phi1 o phi2 as displacements: u(p) = u2(p) + u1(p + u2(p))."""
    if u1.shape != u2.shape:
        raise ValueError("field dimensions disagree")
    return u2 + ad.bilinear_sample(u1, u2)


def sample_image(image: Grid2D, disp: np.ndarray) -> Grid2D:
    """Warp a Grid2D by a displacement field (non-differentiable convenience)."""
    with ad.no_grad():
        img = ad.Tensor(image.data[None, None])
        out = ad.bilinear_sample(img, ad.Tensor(disp[None]))
    return Grid2D.from_array(out.data[0, 0])


def warp_labels(seg: LabelMap, disp: ad.Tensor, label_set=None):
    """(hard LabelMap, soft one-hot Tensor (1,K,H,W)).

    Soft channels ride the differentiable sampling path; the hard map is
    the per-pixel argmax with ties broken toward the smallest label.
    """
    labels = label_set if label_set is not None else seg.label_set
    stack = one_hot(seg, labels)[None]  # (1,K,H,W)
    soft = ad.bilinear_sample(ad.Tensor(stack), disp)
    hard_idx = np.argmax(soft.data[0], axis=0)  # argmax takes first (smallest) on ties
    hard = np.asarray(labels, dtype=np.uint16)[hard_idx]
    return LabelMap(seg.height, seg.width, hard, list(labels)), soft


def warp_labels_np(seg: LabelMap, disp: np.ndarray, label_set=None):
    with ad.no_grad():
        hard, soft = warp_labels(seg, ad.Tensor(disp[None]), label_set)
    return hard, soft.data[0]


def integrate_svf_np(v: np.ndarray, steps: int = 7) -> np.ndarray:
    with ad.no_grad():
        u = integrate_svf(ad.Tensor(v[None]), steps)
    return u.data[0]


def compose_np(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return compose(ad.Tensor(u1[None]), ad.Tensor(u2[None])).data[0]


def jacobian_stats(disp: np.ndarray) -> tuple[float, float]:
    """(min det, fraction with det <= 0) of phi over interior pixels.

    Forward differences of phi(p) = p + u(p); disp is (2,H,W).
    """
    ux, uy = disp[0], disp[1]
    dux_dx = np.diff(ux, axis=1)[:-1, :]
    dux_dy = np.diff(ux, axis=0)[:, :-1]
    duy_dx = np.diff(uy, axis=1)[:-1, :]
    duy_dy = np.diff(uy, axis=0)[:, :-1]
    det = (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx
    interior = det[1:-1, 1:-1]
    return float(interior.min()), float(np.mean(interior <= 0.0))
