"""Adam training loop, validation-ranked top-5 retention, ensembling,
and binary checkpoint serialization.

Checkpoint file layout: magic "CSEG", u32 version, u32 entry count; each
entry is u16 name length + UTF-8 name, u8 dtype code (0 = float32),
u8 ndim, ndim x u32 dims, little-endian payload; then one length-prefixed
UTF-8 JSON metadata block (config echo, validation score, epoch, optimizer
scalars).  Optimizer moment tensors are stored as "opt.m.*"/"opt.v.*"
entries so a checkpoint can resume training.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import AugmentConfig, Case, SliceSet, augment_slice, preprocess_case
from .errors import (
    BadMagic,
    ConfigMismatch,
    CorruptEntry,
    NonFiniteGradient,
    VersionUnsupported,
)
from .losses import combined_loss, one_hot
from .metrics import FOREGROUND_CLASSES
from .model import CSegNet, ModelConfig
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"CSEG"
CHECKPOINT_VERSION = 1

LOG_COLUMNS = ("epoch", "train_loss", "val_dice_rvc", "val_dice_lvm", "val_dice_lvc",
               "val_dice_mean")


# ---------------------------------------------------------------------- adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update over every requires_grad parameter.

    Raises NonFiniteGradient before touching any state when a gradient is
    not finite; a missing gradient counts as zero.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.epsilon)


# ---------------------------------------------------------------- checkpoint

@dataclass(eq=False)  # identity semantics; field-wise eq breaks on ndarrays
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> float32 ndarray
    val_dice: float
    epoch: int
    adam: Optional[AdamState] = None
    version: int = CHECKPOINT_VERSION


def snapshot_params(params: dict) -> dict:
    return {name: np.array(t.data, dtype=np.float32) for name, t in params.items()}


def params_to_tensors(raw: dict) -> dict:
    """Rebuild the live tensor map; running-stat buffers stay gradient-free."""
    out = {}
    for name, arr in raw.items():
        buffer = name.endswith(".running_mean") or name.endswith(".running_var")
        out[name] = Tensor(np.array(arr, dtype=np.float32), requires_grad=not buffer)
    return out


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", 0, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = [(name, ckpt.params[name]) for name in sorted(ckpt.params)]
    if ckpt.adam is not None:
        entries += [(f"opt.m.{n}", ckpt.adam.m[n]) for n in sorted(ckpt.adam.m)]
        entries += [(f"opt.v.{n}", ckpt.adam.v[n]) for n in sorted(ckpt.adam.v)]
    meta = {
        "config": ckpt.config.to_dict(),
        "val_dice": float(ckpt.val_dice),
        "epoch": int(ckpt.epoch),
        "adam": None if ckpt.adam is None else {
            "lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
            "epsilon": ckpt.adam.epsilon, "t": ckpt.adam.t,
        },
    }
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", ckpt.version, len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptEntry(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a CSEG checkpoint")
    version, count = struct.unpack("<II", r.take(8))
    if version != CHECKPOINT_VERSION:
        raise VersionUnsupported(f"{path}: version {version}, supported {CHECKPOINT_VERSION}")
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2))
        name = r.take(nlen).decode("utf-8")
        dtype_code, ndim = struct.unpack("<BB", r.take(2))
        if dtype_code != 0:
            raise CorruptEntry(f"{path}: unknown dtype code {dtype_code} for {name}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
        entries[name] = arr
    (mlen,) = struct.unpack("<I", r.take(4))
    meta = json.loads(r.take(mlen).decode("utf-8"))
    if r.pos != len(data):
        raise CorruptEntry(f"{path}: {len(data) - r.pos} trailing bytes")
    params = {n: a for n, a in entries.items() if not n.startswith("opt.")}
    adam = None
    if meta.get("adam") is not None:
        a = meta["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                         epsilon=a["epsilon"], t=a["t"])
        adam.m = {n[len("opt.m."):]: a2 for n, a2 in entries.items() if n.startswith("opt.m.")}
        adam.v = {n[len("opt.v."):]: a2 for n, a2 in entries.items() if n.startswith("opt.v.")}
    return Checkpoint(
        config=ModelConfig.from_dict(meta["config"]),
        params=params,
        val_dice=meta["val_dice"],
        epoch=meta["epoch"],
        adam=adam,
        version=version,
    )


# -------------------------------------------------------------- top-k keeper

class TopKRegistry:
    """Keeps the k best checkpoints by validation score, earlier epoch on ties."""

    def __init__(self, k: int = 5):
        self.k = k
        self.entries: list = []

    def offer(self, ckpt: Checkpoint) -> bool:
        self.entries.append(ckpt)
        self.entries.sort(key=lambda c: (-c.val_dice, c.epoch))
        del self.entries[self.k :]
        return any(c is ckpt for c in self.entries)

    def best(self) -> Optional[Checkpoint]:
        return self.entries[0] if self.entries else None

    def scores(self) -> list:
        return [c.val_dice for c in self.entries]


# ------------------------------------------------------------------ training

def _slice_dice(pred: np.ndarray, truth: np.ndarray) -> dict:
    """Per-slice per-class 2-D Dice, empty/empty = 1, averaged over slices."""
    out = {}
    for cid in FOREGROUND_CLASSES:
        p = pred == cid
        t = truth == cid
        inter = (p & t).sum(axis=(1, 2))
        size = p.sum(axis=(1, 2)) + t.sum(axis=(1, 2))
        scores = np.where(size > 0, 2.0 * inter / np.maximum(size, 1), 1.0)
        out[cid] = float(scores.mean())
    return out


def evaluate_slices(model: CSegNet, params: dict, slices: SliceSet, batch_size: int = 8) -> dict:
    """Mean foreground Dice of eval-mode predictions over a slice set."""
    M = len(slices)
    preds = np.empty((M,) + slices.images.shape[1:], dtype=np.uint8)
    for lo in range(0, M, batch_size):
        x = Tensor(slices.images[lo : lo + batch_size, None])
        probs = model.predict_proba(params, x)
        preds[lo : lo + batch_size] = probs.argmax(axis=1).astype(np.uint8)
    scores = _slice_dice(preds, slices.labels)
    scores["mean"] = float(np.mean([scores[c] for c in FOREGROUND_CLASSES]))
    return scores


def train(
    config: ModelConfig,
    train_slices: SliceSet,
    val_slices: SliceSet,
    epochs: int,
    seed: int,
    batch_size: int = 8,
    lr: float = 1e-3,
    augment: Optional[AugmentConfig] = None,
    keep_top: int = 5,
    verbose: bool = False,
):
    """Seeded mini-batch training with per-epoch validation and top-k retention.

    Returns (TopKRegistry, log rows).  Aborts with NonFiniteGradient after
    two consecutive rejected steps.
    """
    config.validate()
    model = CSegNet(config)
    params = model.init_params(seed)
    state = AdamState(lr=lr)
    registry = TopKRegistry(k=keep_top)
    log: list = []
    weights = config.head_weights()
    num_classes = config.num_classes
    M = len(train_slices)
    for epoch in range(int(epochs)):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))
        order = rng.permutation(M)
        losses = []
        bad_streak = 0
        for lo in range(0, M, batch_size):
            idx = order[lo : lo + batch_size]
            imgs = []
            labs = []
            for i in idx:
                img = train_slices.images[i]
                lab = train_slices.labels[i]
                if augment is not None:
                    img, lab = augment_slice(img, lab, augment, rng)
                imgs.append(img)
                labs.append(lab)
            x = Tensor(np.stack(imgs)[:, None])
            target = one_hot(np.stack(labs).astype(np.int64), num_classes)
            with Tape() as tape:
                main, aux = model.forward(params, x, training=True)
                loss = combined_loss(main, aux, target, weights)
            grads_by_tensor = tape.backward(loss)
            grads = {
                name: grads_by_tensor.get(p)
                for name, p in params.items()
                if p.requires_grad
            }
            try:
                adam_step(params, grads, state)
            except NonFiniteGradient:
                bad_streak += 1
                if bad_streak >= 2:
                    raise NonFiniteGradient(
                        f"two consecutive non-finite gradients at epoch {epoch}"
                    )
                continue
            bad_streak = 0
            losses.append(loss.item())
        scores = evaluate_slices(model, params, val_slices, batch_size)
        registry.offer(
            Checkpoint(
                config=config,
                params=snapshot_params(params),
                val_dice=scores["mean"],
                epoch=epoch,
                adam=None,
            )
        )
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_dice_rvc": scores[1],
            "val_dice_lvm": scores[2],
            "val_dice_lvc": scores[3],
            "val_dice_mean": scores["mean"],
        }
        log.append(row)
        if verbose:
            print(
                f"epoch {epoch:3d}  loss {row['train_loss']:.4f}  "
                f"val dice {row['val_dice_mean']:.4f}",
                flush=True,
            )
    return registry, log


def write_training_log(log: Sequence[dict], path) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for row in log:
        lines.append(",".join(repr(row[c]) if c != "epoch" else str(row[c])
                              for c in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------- ensemble

def _check_same_config(checkpoints: Sequence[Checkpoint]) -> ModelConfig:
    if not checkpoints:
        raise ConfigMismatch("need at least one checkpoint")
    first = checkpoints[0].config.to_dict()
    for c in checkpoints[1:]:
        if c.config.to_dict() != first:
            raise ConfigMismatch("checkpoints were trained with different configs")
    return checkpoints[0].config


def ensemble_probs(checkpoints: Sequence[Checkpoint], x, model: Optional[CSegNet] = None):
    """Per-pixel arithmetic mean of the members' softmax probability maps."""
    config = _check_same_config(checkpoints)
    if model is None:
        model = CSegNet(config)
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    acc = None
    for ckpt in checkpoints:
        probs = model.predict_proba(params_to_tensors(ckpt.params), x)
        acc = probs if acc is None else acc + probs
    return acc / len(checkpoints)


def ensemble_predict(checkpoints: Sequence[Checkpoint], x, model: Optional[CSegNet] = None):
    """Mean-probability label map; argmax ties resolve to the lowest class."""
    return ensemble_probs(checkpoints, x, model).argmax(axis=1).astype(np.uint8)


def predict_case(checkpoints: Sequence[Checkpoint], case: Case, batch_size: int = 8) -> Case:
    """Preprocess a case to the model grid and ensemble-label every slice."""
    config = _check_same_config(checkpoints)
    model = CSegNet(config)
    prepped = preprocess_case(case, config.input_size)
    D = prepped.image.shape[0]
    labels = np.empty(prepped.image.shape, dtype=np.uint8)
    for lo in range(0, D, batch_size):
        chunk = prepped.image[lo : lo + batch_size, None]
        labels[lo : lo + batch_size] = ensemble_predict(checkpoints, chunk, model)
    return Case(case.case_id, case.phase, None, labels, prepped.spacing)
