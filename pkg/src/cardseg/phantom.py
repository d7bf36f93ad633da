"""Synthetic short-axis cardiac phantoms with analytically known truth.

Each patient is an ED/ES pair sharing geometry: a bright LV cavity disk
(label 3) inside a myocardial ring (label 2) with an RV crescent (label 1)
hugging the septal side.  ES shrinks the cavity radii by a scale factor s,
so the target ejection fraction 100*(1 - s^2) is known in closed form; the
manifest additionally reports volumes and EF measured on the emitted
discrete masks, which is what predictions are scored against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Case, gaussian_blur_2d
from .errors import InvalidGeometry
from .metrics import volume_ml

DEFAULT_SPACING = (10.0, 1.25, 1.25)


@dataclass
class PhantomConfig:
    size: int = 128
    slices_range: tuple = (4, 6)
    lvc_radius_frac: tuple = (0.09, 0.14)
    lvm_thickness_frac: tuple = (0.05, 0.08)
    rvc_thickness_frac: tuple = (0.06, 0.10)
    rvc_halfangle_deg: tuple = (55.0, 80.0)
    es_scale_range: tuple = (0.56, 0.78)  # target EF = 100*(1-s^2) in ~[39, 69]%
    es_rv_scale_range: tuple = (0.6, 0.85)
    center_jitter_frac: float = 0.05
    taper: float = 0.35
    intensities: tuple = (0.15, 0.80, 0.45, 0.90)  # BG, RVC, LVM, LVC means
    noise_sigma: float = 0.05
    edge_blur_sigma: float = 0.8
    spacing: tuple = DEFAULT_SPACING

    def validate(self) -> None:
        if self.size < 32:
            raise InvalidGeometry(f"size {self.size} too small for the phantom geometry")
        if self.slices_range[0] < 1 or self.slices_range[0] > self.slices_range[1]:
            raise InvalidGeometry(f"bad slices_range {self.slices_range}")
        if self.lvc_radius_frac[0] * self.size < 3:
            raise InvalidGeometry("LV cavity radius below 3 px; enlarge size or radius range")
        if self.lvm_thickness_frac[0] * self.size < 2:
            raise InvalidGeometry("myocardium thickness below 2 px")
        if not (0 < self.es_scale_range[0] <= self.es_scale_range[1] < 1):
            raise InvalidGeometry("ES scale must shrink the cavity")


def _slice_profile(n_slices: int, taper: float) -> np.ndarray:
    if n_slices == 1:
        return np.ones(1)
    z = np.linspace(-1.0, 1.0, n_slices)
    return np.sqrt(np.maximum(1.0 - taper * z**2, 0.4))


def _render_phase(cfg, geo, cavity_scale, rv_scale, rng):
    """Label volume plus noisy intensity volume for one phase."""
    S = cfg.size
    yy, xx = np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64),
                         indexing="ij")
    d_lv = np.hypot(yy - geo["cy"], xx - geo["cx"])
    angles = np.arctan2(yy - geo["cy"], xx - geo["cx"])
    ang_dist = np.abs(np.angle(np.exp(1j * (angles - geo["rv_angle"]))))

    labels = np.zeros((geo["n_slices"], S, S), dtype=np.uint8)
    images = np.zeros((geo["n_slices"], S, S), dtype=np.float32)
    bg, i_rvc, i_lvm, i_lvc = cfg.intensities
    for z, rho in enumerate(geo["profile"]):
        r_cav = geo["r_lvc"] * rho * cavity_scale
        r_out = geo["r_lvc"] * rho + geo["t_lvm"]
        rv_in = r_out + geo["rv_gap"]
        rv_out = rv_in + geo["t_rvc"] * rho * rv_scale
        lab = np.zeros((S, S), dtype=np.uint8)
        lab[(d_lv < r_out)] = 2
        lab[(d_lv < r_cav)] = 3
        lab[(d_lv >= rv_in) & (d_lv < rv_out) & (ang_dist <= geo["rv_halfangle"])] = 1
        if not (lab == 1).any() or not (lab == 3).any():
            raise InvalidGeometry("degenerate phantom slice")
        labels[z] = lab
        img = np.full((S, S), bg, dtype=np.float32)
        img[lab == 1] = i_rvc
        img[lab == 2] = i_lvm
        img[lab == 3] = i_lvc
        img = gaussian_blur_2d(img, cfg.edge_blur_sigma)
        img += rng.normal(0.0, cfg.noise_sigma, size=img.shape).astype(np.float32)
        images[z] = img
    return labels, images


def generate_phantom(cfg: PhantomConfig, n: int, seed: int = 0):
    """n ED/ES case pairs plus a manifest of per-patient true volumes and EF."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    S = cfg.size
    cases = []
    manifest = {"seed": int(seed), "count": int(n), "size": int(S),
                "spacing": list(cfg.spacing), "cases": []}
    for i in range(n):
        case_id = f"phantom{i:04d}"
        jitter = cfg.center_jitter_frac * S
        n_slices = int(rng.integers(cfg.slices_range[0], cfg.slices_range[1] + 1))
        geo = {
            "n_slices": n_slices,
            "profile": _slice_profile(n_slices, cfg.taper),
            "cy": S / 2 + rng.uniform(-jitter, jitter),
            "cx": S / 2 + rng.uniform(-jitter, jitter),
            "r_lvc": rng.uniform(*cfg.lvc_radius_frac) * S,
            "t_lvm": rng.uniform(*cfg.lvm_thickness_frac) * S,
            "t_rvc": rng.uniform(*cfg.rvc_thickness_frac) * S,
            "rv_gap": 1.5,
            "rv_angle": rng.uniform(math.radians(150), math.radians(210)),
            "rv_halfangle": math.radians(rng.uniform(*cfg.rvc_halfangle_deg)),
        }
        es_scale = rng.uniform(*cfg.es_scale_range)
        es_rv = rng.uniform(*cfg.es_rv_scale_range)
        ed_labels, ed_images = _render_phase(cfg, geo, 1.0, 1.0, rng)
        es_labels, es_images = _render_phase(cfg, geo, es_scale, es_rv, rng)
        cases.append(Case(case_id, "ED", ed_images, ed_labels, cfg.spacing))
        cases.append(Case(case_id, "ES", es_images, es_labels, cfg.spacing))

        vols = {}
        for tag, lab in (("ed", ed_labels), ("es", es_labels)):
            vols[tag] = {
                "RVC": volume_ml(lab == 1, cfg.spacing),
                "LVM": volume_ml(lab == 2, cfg.spacing),
                "LVC": volume_ml(lab == 3, cfg.spacing),
            }
        entry = {
            "case_id": case_id,
            "slices": n_slices,
            "ed_volumes_ml": vols["ed"],
            "es_volumes_ml": vols["es"],
            "ef_percent": {
                "LVC": 100.0 * (1.0 - vols["es"]["LVC"] / vols["ed"]["LVC"]),
                "RVC": 100.0 * (1.0 - vols["es"]["RVC"] / vols["ed"]["RVC"]),
            },
            "lvc_ef_target_percent": 100.0 * (1.0 - es_scale**2),
        }
        manifest["cases"].append(entry)
    return cases, manifest
