"""Input validation helpers for the estimator facade and the CLI."""
from __future__ import annotations

import numbers
from typing import Sequence

import numpy as np

from .data import LABEL_VALUES, Case
from .errors import CardsegError, InvalidConfig, TooFewCases


class NotFittedError(CardsegError, AttributeError):
    """Raised when predict/score is called before fit."""


def check_is_fitted(estimator, attributes: Sequence[str]) -> None:
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first "
            f"(missing {', '.join(missing)})"
        )


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral):
        raise InvalidConfig(f"seed must be an integer, got {seed!r}")
    return int(seed)


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise InvalidConfig(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_fraction(value, name: str) -> float:
    v = float(value)
    if not 0.0 < v < 1.0:
        raise InvalidConfig(f"{name} must lie strictly between 0 and 1, got {value!r}")
    return v


def check_spacing(spacing) -> tuple:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or any(s <= 0 or not np.isfinite(s) for s in sp):
        raise InvalidConfig(f"spacing must be three positive mm values, got {spacing!r}")
    return sp


def check_volume(arr, name: str = "volume") -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.size == 0:
        raise InvalidConfig(f"{name} must be a non-empty (D,H,W) array, got shape {a.shape}")
    a = a.astype(np.float32, copy=False)
    if not np.isfinite(a).all():
        raise InvalidConfig(f"{name} contains non-finite values")
    return a


def check_label_volume(arr, name: str = "label") -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise InvalidConfig(f"{name} must be (D,H,W), got shape {a.shape}")
    if not np.isin(a, LABEL_VALUES).all():
        raise InvalidConfig(f"{name} has values outside {LABEL_VALUES}")
    return a.astype(np.uint8, copy=False)


def check_cases(cases, require_image: bool = True, require_label: bool = True,
                minimum: int = 1) -> list:
    if isinstance(cases, Case):
        cases = [cases]
    out = list(cases)
    if len(out) < minimum:
        raise TooFewCases(f"need at least {minimum} case(s), got {len(out)}")
    for c in out:
        if not isinstance(c, Case):
            raise InvalidConfig(f"expected Case objects, got {type(c).__name__}")
        c.validate()
        if require_image and c.image is None:
            raise InvalidConfig(f"case {c.case_id}/{c.phase} lacks an image volume")
        if require_label and c.label is None:
            raise InvalidConfig(f"case {c.case_id}/{c.phase} lacks a label volume")
    return out
