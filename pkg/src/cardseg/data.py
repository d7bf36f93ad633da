"""Case ingestion, preprocessing, augmentation and patient-level splitting.

A Case is one labeled 3-D volume of one cardiac phase.  The native on-disk
format is a directory per case: meta.json plus raw little-endian tensors
(image.f32, label.u8), row-major with dims as in the metadata.  The
preprocessing chain is resample in-plane to 1.25 mm -> center crop/pad ->
per-slice z-score; geometric augmentation warps image and label with the
same sampled field (bilinear vs nearest).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CorruptEntry, InvalidConfig, TooFewCases
from .ops import resize_matrix

PHASES = ("ED", "ES")
TARGET_SPACING_MM = 1.25
LABEL_VALUES = (0, 1, 2, 3)
NATIVE_FORMAT = "cardseg-case"
NATIVE_VERSION = 1


@dataclass
class Case:
    """One cardiac phase of one patient: image, label map and physical spacing."""

    case_id: str
    phase: str
    image: Optional[np.ndarray]  # (D,H,W) float32
    label: Optional[np.ndarray]  # (D,H,W) uint8, values in LABEL_VALUES
    spacing: tuple  # (slice, row, col) mm

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise InvalidConfig(f"phase must be one of {PHASES}, got {self.phase!r}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidConfig(f"spacing must be three positive mm values, got {self.spacing}")
        shapes = []
        if self.image is not None:
            if self.image.ndim != 3:
                raise InvalidConfig(f"image must be (D,H,W), got {self.image.shape}")
            shapes.append(self.image.shape)
        if self.label is not None:
            if self.label.ndim != 3:
                raise InvalidConfig(f"label must be (D,H,W), got {self.label.shape}")
            if not np.isin(self.label, LABEL_VALUES).all():
                raise InvalidConfig("label values outside {0,1,2,3}")
            shapes.append(self.label.shape)
        if len(shapes) == 2 and shapes[0] != shapes[1]:
            raise InvalidConfig(f"image/label shapes differ: {shapes[0]} vs {shapes[1]}")


# ------------------------------------------------------------- native format

def case_dir_name(case_id: str, phase: str) -> str:
    return f"{case_id}_{phase}"


def save_case(case: Case, root) -> Path:
    case.validate()
    d = Path(root) / case_dir_name(case.case_id, case.phase)
    d.mkdir(parents=True, exist_ok=True)
    dims = (case.image if case.image is not None else case.label).shape
    meta = {
        "format": NATIVE_FORMAT,
        "version": NATIVE_VERSION,
        "case_id": case.case_id,
        "phase": case.phase,
        "dims": list(dims),
        "spacing": [float(s) for s in case.spacing],
        "image_dtype": "float32",
        "label_dtype": "uint8",
        "has_image": case.image is not None,
        "has_label": case.label is not None,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1))
    if case.image is not None:
        (d / "image.f32").write_bytes(np.ascontiguousarray(case.image, dtype="<f4").tobytes())
    if case.label is not None:
        (d / "label.u8").write_bytes(np.ascontiguousarray(case.label, dtype=np.uint8).tobytes())
    return d


def load_case(path) -> Case:
    d = Path(path)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError:
        raise CorruptEntry(f"{d}: missing meta.json") from None
    if meta.get("format") != NATIVE_FORMAT:
        raise CorruptEntry(f"{d}: not a {NATIVE_FORMAT} directory")
    if meta.get("version") != NATIVE_VERSION:
        raise CorruptEntry(f"{d}: unsupported native version {meta.get('version')}")
    dims = tuple(meta["dims"])
    n = int(np.prod(dims))
    image = label = None
    if meta.get("has_image", True):
        raw = (d / "image.f32").read_bytes()
        if len(raw) != 4 * n:
            raise CorruptEntry(f"{d}: image.f32 has {len(raw)} bytes, expected {4 * n}")
        image = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if meta.get("has_label", True):
        raw = (d / "label.u8").read_bytes()
        if len(raw) != n:
            raise CorruptEntry(f"{d}: label.u8 has {len(raw)} bytes, expected {n}")
        label = np.frombuffer(raw, dtype=np.uint8).reshape(dims).copy()
    case = Case(meta["case_id"], meta["phase"], image, label, tuple(meta["spacing"]))
    case.validate()
    return case


def list_case_dirs(root) -> list:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())


def load_dataset(root) -> list:
    return [load_case(p) for p in list_case_dirs(root)]


# -------------------------------------------------------------- resampling

def _nearest_index(n_src: int, n_dst: int) -> np.ndarray:
    return np.clip(
        np.floor((np.arange(n_dst) + 0.5) * (n_src / n_dst)).astype(np.int64), 0, n_src - 1
    )


def resample_to_spacing(case: Case, target: float = TARGET_SPACING_MM) -> Case:
    """Resample rows/cols to the target in-plane spacing; slices untouched.

    Identity (bit-equal arrays) when the spacing already matches.
    """
    sz, sy, sx = case.spacing
    if sy == target and sx == target:
        return case
    ref = case.image if case.image is not None else case.label
    D, H, W = ref.shape
    H2 = max(1, int(round(H * sy / target)))
    W2 = max(1, int(round(W * sx / target)))
    image = label = None
    if case.image is not None:
        mh = resize_matrix(H, H2)
        mw = resize_matrix(W, W2)
        image = np.matmul(np.matmul(mh, case.image), mw.T).astype(np.float32)
    if case.label is not None:
        ys = _nearest_index(H, H2)
        xs = _nearest_index(W, W2)
        label = case.label[:, ys[:, None], xs[None, :]]
    return replace(case, image=image, label=label, spacing=(sz, target, target))


def center_crop_pad_2d(image: np.ndarray, label: Optional[np.ndarray], size: tuple):
    """Center crop when larger, symmetric pad when smaller (extra on the
    high-index side); zero fill for the image, background for the label."""
    th, tw = size

    def bounds(n, t):
        if n >= t:
            start = (n - t) // 2
            return (start, start + t), (0, 0)
        total = t - n
        return (0, n), (total // 2, total - total // 2)

    (y0, y1), (py0, py1) = bounds(image.shape[0], th)
    (x0, x1), (px0, px1) = bounds(image.shape[1], tw)

    def apply(arr, fill):
        out = arr[y0:y1, x0:x1]
        if py0 or py1 or px0 or px1:
            out = np.pad(out, ((py0, py1), (px0, px1)), constant_values=fill)
        return out

    img = apply(image, 0.0)
    lab = apply(label, 0) if label is not None else None
    return img, lab


def center_crop_pad_case(case: Case, size: tuple) -> Case:
    ref = case.image if case.image is not None else case.label
    if ref.shape[1:] == tuple(size):
        return case
    D = ref.shape[0]
    imgs, labs = [], []
    for z in range(D):
        img_z = case.image[z] if case.image is not None else np.zeros(ref.shape[1:], np.float32)
        lab_z = case.label[z] if case.label is not None else None
        i2, l2 = center_crop_pad_2d(img_z, lab_z, size)
        imgs.append(i2)
        labs.append(l2)
    image = np.stack(imgs).astype(np.float32) if case.image is not None else None
    label = np.stack(labs).astype(np.uint8) if case.label is not None else None
    return replace(case, image=image, label=label)


def zscore_slices(image: np.ndarray, clip_sigmas: float = 4.0) -> np.ndarray:
    """Per-slice z-score, clipped to +-clip_sigmas."""
    out = np.empty_like(image, dtype=np.float32)
    for z in range(image.shape[0]):
        sl = image[z]
        std = float(sl.std())
        if std < 1e-8:
            out[z] = 0.0
        else:
            out[z] = np.clip((sl - sl.mean()) / std, -clip_sigmas, clip_sigmas)
    return out


def preprocess_case(case: Case, size: tuple, target: float = TARGET_SPACING_MM,
                    zscore: bool = True) -> Case:
    """resample -> center crop/pad -> per-slice intensity normalization."""
    c = center_crop_pad_case(resample_to_spacing(case, target), size)
    if zscore and c.image is not None:
        c = replace(c, image=zscore_slices(c.image))
    return c


# ------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    shift_px: float = 10.0
    shear_deg: float = 5.0
    elastic_sigma: float = 10.0
    elastic_alpha: tuple = (0.0, 20.0)
    sharpen_amount: tuple = (0.0, 0.5)
    contrast_clip_sigmas: float = 4.0
    p_affine: float = 0.5
    p_elastic: float = 0.25
    p_sharpen: float = 0.25
    p_contrast: float = 1.0

    def validate(self) -> None:
        vals = [self.rotation_deg, *self.scale_range, self.shift_px, self.shear_deg,
                self.elastic_sigma, *self.elastic_alpha, *self.sharpen_amount,
                self.contrast_clip_sigmas]
        if not all(math.isfinite(v) for v in vals):
            raise InvalidConfig("augmentation ranges must be finite")
        for p in (self.p_affine, self.p_elastic, self.p_sharpen, self.p_contrast):
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"probability {p} outside [0,1]")

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(p_affine=0.0, p_elastic=0.0, p_sharpen=0.0, p_contrast=0.0)


def gaussian_blur_2d(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; kernel radius 3 sigma."""
    if sigma <= 0:
        return img.astype(np.float32, copy=True)
    radius = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    out = img.astype(np.float64)
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, -1)
        padded = np.pad(moved, [(0, 0)] * (moved.ndim - 1) + [(radius, radius)], mode="reflect")
        windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1, axis=-1)
        moved = windows @ kernel
        out = np.moveaxis(moved, -1, axis)
    return out.astype(np.float32)


def _sample_bilinear(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    H, W = img.shape
    valid = (sy >= 0) & (sy <= H - 1) & (sx >= 0) & (sx <= W - 1)
    cy = np.clip(sy, 0, H - 1)
    cx = np.clip(sx, 0, W - 1)
    y0 = np.clip(np.floor(cy).astype(np.int64), 0, H - 2) if H > 1 else np.zeros_like(cy, np.int64)
    x0 = np.clip(np.floor(cx).astype(np.int64), 0, W - 2) if W > 1 else np.zeros_like(cx, np.int64)
    fy = cy - y0
    fx = cx - x0
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    out = (
        (1 - fy) * (1 - fx) * img[y0, x0]
        + (1 - fy) * fx * img[y0, x1]
        + fy * (1 - fx) * img[y1, x0]
        + fy * fx * img[y1, x1]
    )
    return np.where(valid, out, 0.0).astype(np.float32)


def _sample_nearest(lab: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    H, W = lab.shape
    iy = np.floor(sy + 0.5).astype(np.int64)
    ix = np.floor(sx + 0.5).astype(np.int64)
    valid = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
    out = lab[np.clip(iy, 0, H - 1), np.clip(ix, 0, W - 1)]
    return np.where(valid, out, 0).astype(lab.dtype)


def _affine_source_coords(shape, angle_deg, scale, shift, shear_deg):
    H, W = shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    a = math.radians(angle_deg)
    sh = math.radians(shear_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    shear = np.array([[1.0, math.tan(sh)], [0.0, 1.0]])
    fwd = rot @ shear * scale
    inv = np.linalg.inv(fwd)
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                         indexing="ij")
    q = np.stack([yy - cy - shift[0], xx - cx - shift[1]])
    src = np.einsum("ij,jhw->ihw", inv, q)
    return src[0] + cy, src[1] + cx


def affine_warp(image, label, angle_deg=0.0, scale=1.0, shift=(0.0, 0.0), shear_deg=0.0):
    """Center-anchored rotate/shear/scale/translate; bilinear image, nearest label."""
    sy, sx = _affine_source_coords(image.shape, angle_deg, scale, shift, shear_deg)
    img = _sample_bilinear(image, sy, sx)
    lab = _sample_nearest(label, sy, sx) if label is not None else None
    return img, lab


def augment_slice(image: np.ndarray, label: np.ndarray, cfg: AugmentConfig, seed):
    """Deterministic augmentation of one 2-D slice under (slice, cfg, seed)."""
    cfg.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    H, W = image.shape
    img = image.astype(np.float32, copy=True)
    lab = label.copy()

    warped = False
    sy = sx = None
    if rng.random() < cfg.p_affine:
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        scale = rng.uniform(*cfg.scale_range)
        shift = (rng.uniform(-cfg.shift_px, cfg.shift_px),
                 rng.uniform(-cfg.shift_px, cfg.shift_px))
        shear = rng.uniform(-cfg.shear_deg, cfg.shear_deg)
        sy, sx = _affine_source_coords((H, W), angle, scale, shift, shear)
        warped = True
    if rng.random() < cfg.p_elastic:
        alpha = rng.uniform(*cfg.elastic_alpha)
        dy = gaussian_blur_2d(rng.uniform(-1, 1, (H, W)), cfg.elastic_sigma)
        dx = gaussian_blur_2d(rng.uniform(-1, 1, (H, W)), cfg.elastic_sigma)
        for d in (dy, dx):
            peak = np.abs(d).max()
            if peak > 0:
                d *= alpha / peak
        if not warped:
            yy, xx = np.meshgrid(np.arange(H, dtype=np.float64),
                                 np.arange(W, dtype=np.float64), indexing="ij")
            sy, sx = yy, xx
        sy = sy + dy
        sx = sx + dx
        warped = True
    if warped:
        img = _sample_bilinear(img, sy, sx)
        lab = _sample_nearest(lab, sy, sx)
    if rng.random() < cfg.p_sharpen:
        amount = rng.uniform(*cfg.sharpen_amount)
        img = img + amount * (img - gaussian_blur_2d(img, 1.0))
    if rng.random() < cfg.p_contrast:
        std = float(img.std())
        if std > 1e-8:
            img = np.clip((img - img.mean()) / std,
                          -cfg.contrast_clip_sigmas, cfg.contrast_clip_sigmas)
        else:
            img = img - img.mean()
    return img.astype(np.float32), lab


# ---------------------------------------------------------------- splitting

def split_train_val(case_ids: Sequence[str], ratio: float = 0.8, seed: int = 0):
    """Split by patient id (never by slice); deterministic under seed."""
    ids = sorted(set(case_ids))
    n = len(ids)
    if n < 2:
        raise TooFewCases(f"need at least 2 cases to split, got {n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    k = int(math.floor(ratio * n + 0.5))
    k = min(max(k, 1), n - 1)
    train = sorted(ids[i] for i in order[:k])
    val = sorted(ids[i] for i in order[k:])
    return train, val


# ------------------------------------------------------------------- slices

@dataclass
class SliceSet:
    """Flat 2-D training view over a list of preprocessed cases."""

    images: np.ndarray  # (M,H,W) float32
    labels: np.ndarray  # (M,H,W) uint8
    case_ids: list = field(default_factory=list)
    phases: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


def extract_slices(cases: Sequence[Case]) -> SliceSet:
    images, labels, ids, phases = [], [], [], []
    for case in cases:
        if case.image is None or case.label is None:
            raise InvalidConfig(f"case {case.case_id}/{case.phase} missing image or label")
        for z in range(case.image.shape[0]):
            images.append(case.image[z])
            labels.append(case.label[z])
            ids.append(case.case_id)
            phases.append(case.phase)
    if not images:
        raise TooFewCases("no slices extracted")
    return SliceSet(np.stack(images), np.stack(labels), ids, phases)
