"""Grid and label-map types, synthetic dataset generation, on-disk formats.

Formats:
  HMG1 — ASCII magic ``HMG1\\n``, then ``height width\\n``, then
         height*width little-endian float32, row-major.
  HML1 — same header, uint16 payload.
Dataset manifests are JSON listing per-record file paths and tags.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass
class Grid2D:
    """H x W scalar field, nominal intensity range [0, 1]."""
    height: int
    width: int
    data: np.ndarray  # float32, shape (height, width)

    @classmethod
    def from_array(cls, arr) -> "Grid2D":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError("Grid2D expects a 2D array")
        return cls(arr.shape[0], arr.shape[1], arr)

    def validate(self):
        if self.data.shape != (self.height, self.width):
            raise ValueError("grid payload does not match dims")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("grid contains non-finite values")


@dataclass
class LabelMap:
    """Integer segmentation grid; 0 is background."""
    height: int
    width: int
    labels: np.ndarray  # uint16, shape (height, width)
    label_set: list[int] = field(default_factory=list)

    @classmethod
    def from_array(cls, arr) -> "LabelMap":
        arr = np.asarray(arr, dtype=np.uint16)
        return cls(arr.shape[0], arr.shape[1], arr, sorted(int(v) for v in np.unique(arr)))

    def validate(self):
        present = set(int(v) for v in np.unique(self.labels))
        if not present <= set(self.label_set):
            raise ValueError("labels outside declared label_set")


@dataclass
class PairRecord:
    moving: Grid2D
    fixed: Grid2D
    moving_seg: LabelMap
    fixed_seg: LabelMap
    subpopulation: str = "A"
    task: str = "cross-subject"       # cross-subject | within-subject
    modality_pair: str = "mono"       # mono | cross

    def validate(self):
        dims = (self.moving.height, self.moving.width)
        for g in (self.fixed, self.moving_seg, self.fixed_seg):
            if (g.height, g.width) != dims:
                raise ValueError("pair grids disagree on dimensions")


@dataclass
class SynthConfig:
    size: int = 64
    n_pairs: int = 40
    n_labels: int = 6                  # foreground labels, plus background 0
    warp_mag: float = 7.0              # max displacement magnitude, px
    noise: float = 0.03
    subpopulations: tuple = (("A", 6.0), ("B", 2.5))   # (name, sigma_warp)
    within_subject_frac: float = 0.0
    cross_modality_frac: float = 0.0
    split: tuple = (0.7, 0.15, 0.15)

    def validate(self):
        if self.n_pairs <= 0:
            raise ValueError("pair count must be positive")
        for _, sw in self.subpopulations:
            if sw <= 0:
                raise ValueError("sigma_warp must be positive")


@dataclass
class Dataset:
    records: list[PairRecord]
    split: list[str]                   # per-record: train | val | test
    seed: int
    config: SynthConfig

    def subset(self, name: str) -> list[PairRecord]:
        return [r for r, s in zip(self.records, self.split) if s == name]

    def label_set(self) -> list[int]:
        return self.records[0].fixed_seg.label_set


# --------------------------------------------------------------- file formats

def save_grid(grid: Grid2D, path):
    grid.validate()
    with open(path, "wb") as fh:
        fh.write(b"HMG1\n")
        fh.write(f"{grid.height} {grid.width}\n".encode())
        fh.write(grid.data.astype("<f4").tobytes())


def load_grid(path) -> Grid2D:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != b"HMG1\n":
            raise ValueError(f"bad magic {magic!r}")
        h, w = _read_dims(fh)
        payload = fh.read()
    if len(payload) != h * w * 4:
        raise ValueError(f"payload length {len(payload)} != {h}x{w} floats")
    return Grid2D(h, w, np.frombuffer(payload, dtype="<f4").reshape(h, w).copy())


def save_labelmap(seg: LabelMap, path):
    with open(path, "wb") as fh:
        fh.write(b"HML1\n")
        fh.write(f"{seg.height} {seg.width}\n".encode())
        fh.write(seg.labels.astype("<u2").tobytes())


def load_labelmap(path) -> LabelMap:
    with open(path, "rb") as fh:
        if fh.readline() != b"HML1\n":
            raise ValueError("bad magic")
        h, w = _read_dims(fh)
        payload = fh.read()
    if len(payload) != h * w * 2:
        raise ValueError("payload length mismatch")
    return LabelMap.from_array(np.frombuffer(payload, dtype="<u2").reshape(h, w))


def _read_dims(fh):
    parts = fh.readline().split()
    if len(parts) != 2:
        raise ValueError("malformed dimension header")
    h, w = int(parts[0]), int(parts[1])
    if h <= 0 or w <= 0:
        raise ValueError("non-positive dimensions")
    return h, w


def load_pgm(path) -> Grid2D:
    """Portable graymap (P2 ASCII or P5 binary), scaled to [0,1] by maxval."""
    raw = Path(path).read_bytes()
    tokens = []
    i = 0
    # header tokens with '#' comments; P5 payload starts after maxval whitespace
    while len(tokens) < 4 and i < len(raw):
        if raw[i:i + 1].isspace():
            i += 1
        elif raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i] not in b"\n":
                i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    if len(tokens) < 4:
        raise ValueError("truncated PGM header")
    magic = tokens[0]
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise ValueError("malformed PGM header") from e
    if magic not in (b"P2", b"P5") or w <= 0 or h <= 0 or not 0 < maxval <= 65535:
        raise ValueError("malformed PGM header")
    if magic == b"P2":
        try:
            vals = np.array(raw[i:].split(), dtype=np.int64)
        except ValueError as e:
            raise ValueError("malformed PGM payload") from e
        if vals.size != w * h:
            raise ValueError("truncated PGM payload")
    else:
        i += 1  # single whitespace after maxval
        dtype = "<u1" if maxval < 256 else ">u2"
        itemsize = 1 if maxval < 256 else 2
        payload = raw[i:i + w * h * itemsize]
        if len(payload) != w * h * itemsize:
            raise ValueError("truncated PGM payload")
        vals = np.frombuffer(payload, dtype=dtype).astype(np.int64)
    return Grid2D(h, w, (vals.reshape(h, w) / maxval).astype(np.float32))


# ------------------------------------------------------------------- one-hot

def one_hot(seg: LabelMap, label_set=None) -> np.ndarray:
    """(K, H, W) float32 stack; channels sum to 1 at every pixel."""
    labels = label_set if label_set is not None else seg.label_set
    present = set(int(v) for v in np.unique(seg.labels))
    if not present <= set(labels):
        raise ValueError(f"labels {present - set(labels)} outside label_set")
    stack = np.zeros((len(labels), seg.height, seg.width), dtype=np.float32)
    for i, lab in enumerate(labels):
        stack[i] = (seg.labels == lab)
    return stack


# ------------------------------------------------------------------ synthesis

def _smooth_noise(rng, size, sigma, channels=1):
    """Gaussian-smoothed white noise, renormalized to unit max magnitude."""
    raw = rng.standard_normal((channels, size, size))
    sm = np.stack([gaussian_filter(c, sigma, mode="nearest") for c in raw])
    peak = np.abs(sm).max()
    return sm / max(peak, 1e-12)


def _random_svf_displacement(rng, size, sigma_warp, magnitude):
    """Displacement from integrating a random smooth velocity field."""
    from . import deform
    v = _smooth_noise(rng, size, sigma_warp, channels=2) * magnitude
    return deform.integrate_svf_np(v.astype(np.float32), steps=7)


def _base_anatomy(rng, size, n_labels):
    """Nested wavy rings: labels 1..n from the center out, 0 outside."""
    c = size / 2 + rng.uniform(-2, 2, size=2)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    r = np.hypot(yy - c[0], xx - c[1])
    rmax = 0.44 * size
    # uneven ring spacing so some labels are thin, some fat
    edges = np.array([0.18, 0.34, 0.42, 0.62, 0.70, 1.0]) * rmax
    edges = edges[:n_labels]
    wobble = _smooth_noise(rng, size, size / 10)[0] * 0.06 * size
    f = r + wobble
    labels = np.zeros((size, size), dtype=np.uint16)
    prev = -np.inf
    for k, edge in enumerate(edges, start=1):
        labels[(f >= prev) & (f < edge)] = k
        prev = edge
    return labels


def _intensity_image(rng, labels, n_labels, noise):
    # per-label means spaced 0.13 apart so MSE/NCC stay informative
    means = np.array([0.04] + [0.95 - 0.13 * k for k in range(n_labels)], dtype=np.float32)
    img = means[np.minimum(labels, n_labels)]
    img = img + rng.normal(0.0, noise, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _warp_anatomy(labels, disp):
    from . import deform
    seg = LabelMap.from_array(labels)
    hard, _ = deform.warp_labels_np(seg, disp)
    return hard.labels


def synth_generate(config: SynthConfig, seed: int) -> Dataset:
    """Deterministic synthetic dataset of pre-warped blob anatomies."""
    config.validate()
    rng = np.random.default_rng(seed)
    size = config.size
    records = []
    n_sub = len(config.subpopulations)
    for i in range(config.n_pairs):
        sub_name, sigma_warp = config.subpopulations[i % n_sub]
        within = rng.random() < config.within_subject_frac
        cross_mod = rng.random() < config.cross_modality_frac
        base = _base_anatomy(rng, size, config.n_labels)
        mag = config.warp_mag * (0.4 if within else 1.0)
        disp_m = _random_svf_displacement(rng, size, sigma_warp, mag)
        disp_f = _random_svf_displacement(rng, size, sigma_warp, mag)
        lab_m = _warp_anatomy(base, disp_m) if mag > 0 else base.copy()
        lab_f = _warp_anatomy(base, disp_f) if mag > 0 else base.copy()
        img_m = _intensity_image(rng, lab_m, config.n_labels, config.noise)
        img_f = _intensity_image(rng, lab_f, config.n_labels, config.noise)
        if cross_mod:
            img_f = np.clip(img_f, 0.0, 1.0) ** 0.45  # monotone remap
            img_f = np.clip(img_f, 0.0, 1.0).astype(np.float32)
        full_set = list(range(config.n_labels + 1))
        rec = PairRecord(
            moving=Grid2D.from_array(img_m),
            fixed=Grid2D.from_array(img_f),
            moving_seg=LabelMap(size, size, lab_m, full_set),
            fixed_seg=LabelMap(size, size, lab_f, full_set),
            subpopulation=sub_name,
            task="within-subject" if within else "cross-subject",
            modality_pair="cross" if cross_mod else "mono",
        )
        rec.validate()
        records.append(rec)
    n = config.n_pairs
    n_train = int(round(config.split[0] * n))
    n_val = int(round(config.split[1] * n))
    split = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    return Dataset(records, split, seed, config)


def dice_floor(ds: Dataset) -> float:
    """Mean foreground Dice between unregistered moving/fixed segmentations."""
    from .losses import hard_dice
    vals = []
    for rec in ds.records:
        per = hard_dice(rec.fixed_seg.labels, rec.moving_seg.labels,
                        [l for l in rec.fixed_seg.label_set if l != 0])
        vals.append(np.mean(per))
    return float(np.mean(vals))


# ----------------------------------------------------------------- manifests

def save_dataset(ds: Dataset, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(ds.records):
        paths = {
            "moving": f"pair{i:04d}_m.hmg",
            "fixed": f"pair{i:04d}_f.hmg",
            "moving_seg": f"pair{i:04d}_sm.hml",
            "fixed_seg": f"pair{i:04d}_sf.hml",
        }
        save_grid(rec.moving, outdir / paths["moving"])
        save_grid(rec.fixed, outdir / paths["fixed"])
        save_labelmap(rec.moving_seg, outdir / paths["moving_seg"])
        save_labelmap(rec.fixed_seg, outdir / paths["fixed_seg"])
        entries.append({
            **paths,
            "subpopulation": rec.subpopulation,
            "task": rec.task,
            "modality_pair": rec.modality_pair,
            "split": ds.split[i],
        })
    cfg = asdict(ds.config)
    cfg["subpopulations"] = [list(s) for s in ds.config.subpopulations]
    cfg["split"] = list(ds.config.split)
    manifest = {"format": "hyperreg-dataset-v1", "seed": ds.seed,
                "config": cfg, "records": entries}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = dict(manifest["config"])
    cfg["subpopulations"] = tuple(tuple(s) for s in cfg["subpopulations"])
    cfg["split"] = tuple(cfg["split"])
    config = SynthConfig(**cfg)
    records, split = [], []
    for e in manifest["records"]:
        seg_m = load_labelmap(path / e["moving_seg"])
        seg_f = load_labelmap(path / e["fixed_seg"])
        full_set = list(range(config.n_labels + 1))
        seg_m.label_set = full_set
        seg_f.label_set = full_set
        records.append(PairRecord(
            moving=load_grid(path / e["moving"]),
            fixed=load_grid(path / e["fixed"]),
            moving_seg=seg_m,
            fixed_seg=seg_f,
            subpopulation=e["subpopulation"],
            task=e["task"],
            modality_pair=e["modality_pair"],
        ))
        split.append(e["split"])
    return Dataset(records, split, manifest["seed"], config)
