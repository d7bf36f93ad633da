"""Geometric (Dice, Hausdorff) and clinical (volume, EF, mass) evaluation.

All distances are physical: voxel coordinates are scaled by the spacing
triple before any Euclidean computation.  Hausdorff is the symmetric max
over boundary voxels of 3-D volumes (slice predictions are stacked into
volumes before scoring).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateVariance, EmptyMask, ShapeMismatch, TooFewCases, ZeroEDV

CLASS_NAMES = {0: "BG", 1: "RVC", 2: "LVM", 3: "LVC"}
FOREGROUND_CLASSES = (1, 2, 3)
MYOCARDIUM_DENSITY_G_PER_ML = 1.05


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a n b| / (|a|+|b|); defined as 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    sa = int(a.sum())
    sb = int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a six-connected background neighbor or on the volume edge."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 3:
        raise ShapeMismatch(f"boundary_mask expects a 3-D mask, got ndim {m.ndim}")
    interior = m.copy()
    for axis in range(3):
        prev_fg = np.zeros_like(m)
        next_fg = np.zeros_like(m)
        head = [slice(None)] * 3
        tail = [slice(None)] * 3
        head[axis] = slice(1, None)
        tail[axis] = slice(None, -1)
        # neighbors beyond the volume edge stay False (count as background)
        prev_fg[tuple(head)] = m[tuple(tail)]
        next_fg[tuple(tail)] = m[tuple(head)]
        interior &= prev_fg & next_fg
    return m & ~interior


def _boundary_points_mm(mask: np.ndarray, spacing) -> np.ndarray:
    pts = np.argwhere(boundary_mask(mask)).astype(np.float64)
    return pts * np.asarray(spacing, dtype=np.float64)


def _directed_hausdorff_sq(src: np.ndarray, dst: np.ndarray, chunk: int = 256) -> float:
    worst = 0.0
    for lo in range(0, src.shape[0], chunk):
        block = src[lo : lo + chunk]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(d2.min(axis=1).max()))
    return worst


def hausdorff_mm(a: np.ndarray, b: np.ndarray, spacing) -> float:
    """Symmetric Hausdorff distance between boundary voxel centers, in mm."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise EmptyMask("hausdorff undefined for an empty mask")
    pa = _boundary_points_mm(a, spacing)
    pb = _boundary_points_mm(b, spacing)
    return math.sqrt(max(_directed_hausdorff_sq(pa, pb), _directed_hausdorff_sq(pb, pa)))


def volume_ml(mask: np.ndarray, spacing) -> float:
    """Voxel count times voxel volume, in milliliters."""
    sz, sy, sx = (float(s) for s in spacing)
    return int(np.asarray(mask, dtype=bool).sum()) * (sz * sy * sx) / 1000.0


def ef_percent(edv: float, esv: float) -> float:
    """Ejection fraction 100*(EDV-ESV)/EDV."""
    if edv <= 0:
        raise ZeroEDV(f"EDV must be positive, got {edv}")
    return 100.0 * (edv - esv) / edv


def mass_g(myo_volume_ml: float) -> float:
    return MYOCARDIUM_DENSITY_G_PER_ML * myo_volume_ml


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.size < 2:
        raise TooFewCases("pearson needs two equal-length samples of size >= 2")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    vx = float((dx * dx).sum())
    vy = float((dy * dy).sum())
    if vx == 0.0 or vy == 0.0:
        raise DegenerateVariance("zero variance sample")
    return float((dx * dy).sum() / math.sqrt(vx * vy))


def cohort_stats(pred_values: Sequence[float], true_values: Sequence[float]):
    """(Pearson correlation, mean bias); correlation is None when variance degenerates."""
    pred = np.asarray(pred_values, dtype=np.float64)
    true = np.asarray(true_values, dtype=np.float64)
    if pred.shape != true.shape or pred.size < 2:
        raise TooFewCases("cohort_stats needs two equal-length samples of size >= 2")
    bias = float((pred - true).mean())
    try:
        corr: Optional[float] = pearson(pred, true)
    except DegenerateVariance:
        corr = None
    return corr, bias


@dataclass
class CaseClassMetrics:
    case_id: str
    phase: str
    class_id: int
    dice: float
    hausdorff_mm: Optional[float]
    volume_pred_ml: float
    volume_true_ml: float

    @property
    def class_name(self) -> str:
        return CLASS_NAMES.get(self.class_id, str(self.class_id))


@dataclass
class MetricsReport:
    """Per-case geometric rows plus cohort-level clinical statistics."""

    rows: list = field(default_factory=list)
    cohort: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["case_id", "phase", "class", "dice", "hausdorff_mm",
                 "volume_pred_ml", "volume_true_ml"]
            )
            for r in self.rows:
                hd = "" if r.hausdorff_mm is None else f"{r.hausdorff_mm:.6f}"
                w.writerow(
                    [r.case_id, r.phase, r.class_name, f"{r.dice:.6f}", hd,
                     f"{r.volume_pred_ml:.6f}", f"{r.volume_true_ml:.6f}"]
                )

    def mean_dice(self, class_id: int, phase: Optional[str] = None) -> float:
        vals = [r.dice for r in self.rows
                if r.class_id == class_id and (phase is None or r.phase == phase)]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_foreground_dice(self) -> float:
        return float(np.mean([self.mean_dice(c) for c in FOREGROUND_CLASSES]))

    def summary_table(self) -> str:
        def fmt(v, nd=3):
            return "  n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:>6.{nd}f}"

        lines = [
            "Structure   Dice ED  Dice ES    HD ED    HD ES  EF corr  EF bias  Vol corr  Vol bias",
        ]
        for cid in FOREGROUND_CLASSES:
            name = CLASS_NAMES[cid]
            stats = self.cohort.get(name, {})
            hd_ed = [r.hausdorff_mm for r in self.rows
                     if r.class_id == cid and r.phase == "ED" and r.hausdorff_mm is not None]
            hd_es = [r.hausdorff_mm for r in self.rows
                     if r.class_id == cid and r.phase == "ES" and r.hausdorff_mm is not None]
            lines.append(
                f"{name:<10}{fmt(self.mean_dice(cid, 'ED')):>9}{fmt(self.mean_dice(cid, 'ES')):>9}"
                f"{fmt(float(np.mean(hd_ed)) if hd_ed else None):>9}"
                f"{fmt(float(np.mean(hd_es)) if hd_es else None):>9}"
                f"{fmt(stats.get('ef_corr')):>9}{fmt(stats.get('ef_bias')):>9}"
                f"{fmt(stats.get('vol_ed_corr')):>10}{fmt(stats.get('vol_ed_bias')):>10}"
            )
        return "\n".join(lines)


def evaluate_cases(pred_cases, truth_cases) -> MetricsReport:
    """Score predicted label volumes against ground truth, case by case.

    Cases are matched on (case_id, phase); each needs .label, .spacing,
    .case_id and .phase.  EF statistics use patients with both phases.
    """
    truth_by_key = {(c.case_id, c.phase): c for c in truth_cases}
    report = MetricsReport()
    volumes: dict = {}
    for pred in pred_cases:
        key = (pred.case_id, pred.phase)
        truth = truth_by_key.get(key)
        if truth is None:
            raise TooFewCases(f"no ground truth for case {key}")
        if pred.label.shape != truth.label.shape:
            raise ShapeMismatch(f"case {key}: pred {pred.label.shape} vs truth {truth.label.shape}")
        for cid in FOREGROUND_CLASSES:
            pm = pred.label == cid
            tm = truth.label == cid
            try:
                hd = hausdorff_mm(pm, tm, truth.spacing)
            except EmptyMask:
                hd = None
            row = CaseClassMetrics(
                case_id=pred.case_id,
                phase=pred.phase,
                class_id=cid,
                dice=dice(pm, tm),
                hausdorff_mm=hd,
                volume_pred_ml=volume_ml(pm, pred.spacing),
                volume_true_ml=volume_ml(tm, truth.spacing),
            )
            report.rows.append(row)
            volumes[(pred.case_id, pred.phase, cid)] = (row.volume_pred_ml, row.volume_true_ml)

    case_ids = sorted({c.case_id for c in pred_cases})
    for cid in FOREGROUND_CLASSES:
        name = CLASS_NAMES[cid]
        stats: dict = {}
        ed = [(volumes[(i, "ED", cid)]) for i in case_ids if (i, "ED", cid) in volumes]
        if len(ed) >= 2:
            corr, bias = cohort_stats([v[0] for v in ed], [v[1] for v in ed])
            stats["vol_ed_corr"] = corr
            stats["vol_ed_bias"] = bias
        ef_pred, ef_true = [], []
        for i in case_ids:
            kd, ks = (i, "ED", cid), (i, "ES", cid)
            if kd in volumes and ks in volumes:
                try:
                    ef_pred.append(ef_percent(volumes[kd][0], volumes[ks][0]))
                    ef_true.append(ef_percent(volumes[kd][1], volumes[ks][1]))
                except ZeroEDV:
                    continue
        if len(ef_pred) >= 2:
            corr, bias = cohort_stats(ef_pred, ef_true)
            stats["ef_corr"] = corr
            stats["ef_bias"] = bias
        if cid == 2 and len(ed) >= 2:
            stats["mass_ed_bias"] = float(
                np.mean([mass_g(v[0]) - mass_g(v[1]) for v in ed])
            )
        if stats:
            report.cohort[name] = stats
    return report
