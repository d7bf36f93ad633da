"""Scikit-learn style estimator facade over the segmentation stack.

`CSegNetSegmenter` follows the estimator protocol without importing
sklearn: constructor arguments are stored verbatim, `get_params` /
`set_params` expose them for search tooling, fitted state lives in
trailing-underscore attributes, and `fit` returns self.  X is a list of
labeled `Case` volumes rather than a feature matrix; `predict` maps a case
(or raw volume) to a label volume on the model grid.
"""
from __future__ import annotations

import inspect
from typing import Optional, Sequence

import numpy as np

from .data import AugmentConfig, Case, extract_slices, preprocess_case, split_train_val
from .errors import InvalidConfig
from .metrics import FOREGROUND_CLASSES
from .model import ModelConfig
from .train import predict_case, train
from .validation import (
    check_cases,
    check_fraction,
    check_is_fitted,
    check_positive_int,
    check_seed,
    check_spacing,
    check_volume,
)


class CSegNetSegmenter:
    """Cardiac structure segmenter with a fit/predict/score interface.

    Trains the dilated-pyramid-pooling U-net (or its plain U-net baseline)
    on labeled cases and predicts with the arithmetic-mean ensemble of the
    best validation checkpoints.
    """

    def __init__(
        self,
        num_classes: int = 4,
        stages: int = 4,
        base_channels: int = 8,
        input_size: int = 128,
        variant: str = "csegnet",
        epochs: int = 10,
        batch_size: int = 8,
        learning_rate: float = 1e-3,
        val_fraction: float = 0.2,
        ensemble_size: int = 5,
        augment: bool = True,
        seed: int = 0,
        verbose: bool = False,
    ):
        self.num_classes = num_classes
        self.stages = stages
        self.base_channels = base_channels
        self.input_size = input_size
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.val_fraction = val_fraction
        self.ensemble_size = ensemble_size
        self.augment = augment
        self.seed = seed
        self.verbose = verbose

    # ------------------------------------------------------------- params

    @classmethod
    def _param_names(cls) -> list:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "CSegNetSegmenter":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise InvalidConfig(
                    f"invalid parameter {key!r} for {type(self).__name__}; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, key, value)
        return self

    # -------------------------------------------------------------- config

    def model_config(self) -> ModelConfig:
        size = self.input_size
        if isinstance(size, int):
            size = (size, size)
        cfg = ModelConfig(
            num_classes=self.num_classes,
            stages=self.stages,
            base_channels=self.base_channels,
            input_size=tuple(size),
            variant=self.variant,
        )
        cfg.validate()
        return cfg

    # ----------------------------------------------------------------- fit

    def fit(self, cases: Sequence[Case], val_cases: Optional[Sequence[Case]] = None):
        """Train on labeled cases; splits off a validation cohort by patient
        unless one is supplied explicitly."""
        cfg = self.model_config()
        seed = check_seed(self.seed)
        check_positive_int(self.epochs, "epochs")
        check_positive_int(self.batch_size, "batch_size")
        cases = check_cases(cases, minimum=2)
        prepped = [preprocess_case(c, cfg.input_size) for c in cases]
        if val_cases is None:
            frac = check_fraction(self.val_fraction, "val_fraction")
            train_ids, val_ids = split_train_val(
                [c.case_id for c in prepped], ratio=1.0 - frac, seed=seed
            )
            train_cases = [c for c in prepped if c.case_id in set(train_ids)]
            valid_cases = [c for c in prepped if c.case_id in set(val_ids)]
        else:
            val_cases = check_cases(val_cases, minimum=1)
            train_ids = sorted({c.case_id for c in prepped})
            val_ids = sorted({c.case_id for c in val_cases})
            train_cases = prepped
            valid_cases = [preprocess_case(c, cfg.input_size) for c in val_cases]
        registry, log = train(
            cfg,
            extract_slices(train_cases),
            extract_slices(valid_cases),
            epochs=self.epochs,
            seed=seed,
            batch_size=self.batch_size,
            lr=float(self.learning_rate),
            augment=AugmentConfig() if self.augment else None,
            keep_top=check_positive_int(self.ensemble_size, "ensemble_size"),
            verbose=self.verbose,
        )
        self.config_ = cfg
        self.registry_ = registry
        self.checkpoints_ = registry.entries
        self.history_ = log
        self.train_ids_ = list(train_ids)
        self.val_ids_ = list(val_ids)
        self.best_val_dice_ = registry.best().val_dice if registry.best() else None
        return self

    # ------------------------------------------------------------- predict

    def _as_case(self, x, spacing) -> Case:
        if isinstance(x, Case):
            return x
        vol = check_volume(x)
        if spacing is None:
            spacing = (10.0, 1.25, 1.25)
        return Case("input", "ED", vol, None, check_spacing(spacing))

    def predict(self, x, spacing=None) -> np.ndarray:
        """Label volume (D,H,W) on the model grid for a Case or raw volume."""
        check_is_fitted(self, ["checkpoints_"])
        case = self._as_case(x, spacing)
        return predict_case(self.checkpoints_, case, batch_size=self.batch_size).label

    def predict_case(self, case: Case) -> Case:
        check_is_fitted(self, ["checkpoints_"])
        return predict_case(self.checkpoints_, case, batch_size=self.batch_size)

    def score(self, cases: Sequence[Case]) -> float:
        """Mean foreground Dice of ensemble predictions over the cases' slices."""
        check_is_fitted(self, ["checkpoints_"])
        cases = check_cases(cases)
        dices = []
        for case in cases:
            prepped = preprocess_case(case, self.config_.input_size)
            pred = predict_case(self.checkpoints_, case, batch_size=self.batch_size)
            for z in range(pred.label.shape[0]):
                per_class = []
                for cid in FOREGROUND_CLASSES:
                    p = pred.label[z] == cid
                    t = prepped.label[z] == cid
                    denom = int(p.sum()) + int(t.sum())
                    per_class.append(1.0 if denom == 0 else 2.0 * int((p & t).sum()) / denom)
                dices.append(float(np.mean(per_class)))
        return float(np.mean(dices))
