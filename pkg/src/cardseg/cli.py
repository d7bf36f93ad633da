"""Command-line entry point: the whole workflow as batch subcommands.

    cardseg phantom   --out data/ --count 250 --size 128 --seed 7
    cardseg train     --data data/ --out run/ --epochs 10 --seed 7
    cardseg predict   --ckpt run/ckpt_rank1.cseg --in data/ --out pred/
    cardseg evaluate  --pred pred/ --truth data/ --out report.csv
    cardseg convert   --nifti case.nii --label case_gt.nii --out data/
    cardseg gradcheck

Every subcommand that takes --seed is bit-reproducible, writes only inside
its --out directory, and records a run manifest there before any long
computation starts.  Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure, 4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, errors
from .data import (
    AugmentConfig,
    Case,
    extract_slices,
    load_case,
    load_dataset,
    list_case_dirs,
    preprocess_case,
    save_case,
    split_train_val,
)
from .gradsuite import TOLERANCE, run_grad_suite
from .metrics import evaluate_cases
from .model import CSegNet, ModelConfig
from .nifti import parse_nifti
from .phantom import PhantomConfig, generate_phantom
from .train import (
    load_checkpoint,
    predict_case,
    save_checkpoint,
    train,
    write_training_log,
)
from .validation import check_label_volume

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_INTERNAL = 4

DATA_ERRORS = (
    errors.BadMagic,
    errors.TruncatedPayload,
    errors.UnsupportedDatatype,
    errors.CorruptEntry,
    errors.VersionUnsupported,
    errors.TooFewCases,
    errors.InvalidConfig,
    errors.InvalidGeometry,
    errors.ConfigMismatch,
)
NUMERIC_ERRORS = (
    errors.NonFiniteGradient,
    errors.NonFiniteEvaluation,
    errors.DivisionDomain,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error code={EXIT_USAGE} kind=usage msg={message}\n")
        raise SystemExit(EXIT_USAGE)


def _write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                if k != "func"}
    manifest = {
        "tool": "cardseg",
        "version": __version__,
        "subcommand": subcommand,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "args": resolved,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1))


# ------------------------------------------------------------- config files

def _coerce(raw: str, kind):
    raw = raw.strip()
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    if kind is tuple:
        parts = raw.replace("x", ",").split(",")
        nums = [float(p) if "." in p else int(p) for p in parts if p.strip()]
        return tuple(nums)
    raise errors.InvalidConfig(f"cannot parse config value {raw!r}")


def parse_config_file(path) -> tuple:
    """Flat key=value overrides for ModelConfig and AugmentConfig fields."""
    model_fields = {f.name: f for f in fields(ModelConfig)}
    aug_fields = {f.name: f for f in fields(AugmentConfig)}
    model_kw: dict = {}
    aug_kw: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise errors.InvalidConfig(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in model_fields:
            default = getattr(ModelConfig, key, None)
            kind = type(default) if default is not None else tuple
            if key in ("input_size", "stem_strides", "deep_supervision_weights"):
                kind = tuple
            model_kw[key] = _coerce(raw, kind)
        elif key in aug_fields:
            default = getattr(AugmentConfig(), key)
            kind = tuple if isinstance(default, tuple) else type(default)
            aug_kw[key] = _coerce(raw, kind)
        else:
            raise errors.InvalidConfig(f"{path}:{lineno}: unknown config key {key!r}")
    if "input_size" in model_kw and len(model_kw["input_size"]) == 1:
        model_kw["input_size"] = model_kw["input_size"] * 2
    return ModelConfig(**model_kw), AugmentConfig(**aug_kw)


# -------------------------------------------------------------- subcommands

def cmd_phantom(args) -> int:
    out = Path(args.out)
    _write_manifest(out, "phantom", args)
    cfg = PhantomConfig(size=args.size, slices_range=(args.slices_min, args.slices_max))
    cases, manifest = generate_phantom(cfg, args.count, seed=args.seed)
    for case in cases:
        save_case(case, out)
    (out / "phantom_manifest.json").write_text(json.dumps(manifest, indent=1))
    print(f"wrote {len(cases)} case volumes ({args.count} ED/ES pairs) to {out}")
    return EXIT_OK


def _default_model_config(size: int = 128) -> ModelConfig:
    return ModelConfig(num_classes=4, stages=4, base_channels=8, input_size=(size, size))


def cmd_train(args) -> int:
    out = Path(args.out)
    _write_manifest(out, "train", args)
    if args.config:
        model_cfg, aug_cfg = parse_config_file(args.config)
    else:
        model_cfg, aug_cfg = _default_model_config(), AugmentConfig()
    model_cfg.validate()
    cases = load_dataset(args.data)
    if not cases:
        raise errors.TooFewCases(f"no cases found under {args.data}")
    prepped = [preprocess_case(c, model_cfg.input_size) for c in cases]
    train_ids, val_ids = split_train_val(
        [c.case_id for c in prepped], ratio=1.0 - args.val_fraction, seed=args.seed
    )
    tr = extract_slices([c for c in prepped if c.case_id in set(train_ids)])
    va = extract_slices([c for c in prepped if c.case_id in set(val_ids)])
    print(f"training on {len(tr)} slices from {len(train_ids)} cases; "
          f"validating on {len(va)} slices from {len(val_ids)} cases")
    print(f"model: {model_cfg.variant}, {CSegNet(model_cfg).learnable_count():,} "
          "learnable parameters")
    registry, log = train(
        model_cfg, tr, va,
        epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
        lr=args.lr, augment=None if args.no_augment else aug_cfg,
        keep_top=args.keep_top, verbose=not args.quiet,
    )
    write_training_log(log, out / "training_log.csv")
    (out / "split.json").write_text(json.dumps({"train": train_ids, "val": val_ids}, indent=1))
    for rank, ckpt in enumerate(registry.entries, start=1):
        save_checkpoint(ckpt, out / f"ckpt_rank{rank}_epoch{ckpt.epoch:03d}.cseg")
    best = registry.best()
    if best is not None:
        print(f"best validation mean foreground dice: {best.val_dice:.4f} (epoch {best.epoch})")
    return EXIT_OK


def cmd_predict(args) -> int:
    out = Path(args.out)
    _write_manifest(out, "predict", args)
    if not 1 <= len(args.ckpt) <= 5:
        raise errors.ConfigMismatch(f"predict takes 1 to 5 checkpoints, got {len(args.ckpt)}")
    checkpoints = [load_checkpoint(p) for p in args.ckpt]
    case_dirs = list_case_dirs(args.input)
    if not case_dirs:
        raise errors.TooFewCases(f"no cases found under {args.input}")
    for d in case_dirs:
        case = load_case(d)
        if case.image is None:
            raise errors.InvalidConfig(f"{d} has no image volume to segment")
        pred = predict_case(checkpoints, case, batch_size=args.batch_size)
        save_case(pred, out)
    print(f"wrote {len(case_dirs)} predicted label volumes to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    pred_cases = load_dataset(args.pred)
    truth_cases = load_dataset(args.truth)
    if not pred_cases or not truth_cases:
        raise errors.TooFewCases("both --pred and --truth must contain cases")
    # put the ground truth onto each prediction's grid before scoring
    by_key = {(c.case_id, c.phase): c for c in truth_cases}
    aligned = []
    for pred in pred_cases:
        key = (pred.case_id, pred.phase)
        if key not in by_key:
            raise errors.TooFewCases(f"no ground truth for case {key}")
        truth = by_key[key]
        truth = preprocess_case(truth, pred.label.shape[1:], target=pred.spacing[1],
                                zscore=False)
        aligned.append(truth)
    report = evaluate_cases(pred_cases, aligned)
    report.to_csv(out_csv)
    summary = report.summary_table()
    (out_csv.with_suffix(".summary.txt")).write_text(summary + "\n")
    print(summary)
    print(f"mean foreground dice: {report.mean_foreground_dice():.4f}")
    return EXIT_OK


def cmd_convert(args) -> int:
    out = Path(args.out)
    _write_manifest(out, "convert", args)
    volume, spacing = parse_nifti(Path(args.nifti).read_bytes())
    label = None
    if args.label:
        lab_vol, lab_spacing = parse_nifti(Path(args.label).read_bytes())
        if lab_vol.shape != volume.shape:
            raise errors.ConfigMismatch(
                f"label shape {lab_vol.shape} differs from image shape {volume.shape}"
            )
        label = check_label_volume(np.rint(lab_vol))
    case_id = args.case_id or Path(args.nifti).stem.split(".")[0]
    case = Case(case_id, args.phase, volume, label, spacing)
    d = save_case(case, out)
    print(f"wrote {d} (dims {volume.shape}, spacing {tuple(round(s, 4) for s in spacing)})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_grad_suite(seed=args.seed)
    failed = False
    for name, err in results:
        status = "PASS" if err < TOLERANCE else "FAIL"
        failed = failed or status == "FAIL"
        print(f"{name:20s} max rel err {err:.3e}  {status}")
    if failed:
        raise errors.NonFiniteEvaluation("gradient check exceeded tolerance")
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> _Parser:
    parser = _Parser(prog="cardseg",
                     description="Cardiac MRI structure segmentation workflows")
    parser.add_argument("--version", action="version", version=f"cardseg {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("phantom", parents=[], help="generate a synthetic phantom dataset",
                       description="Write --count ED/ES case pairs in the native format plus "
                                   "a manifest with per-case true volumes and ejection fractions.")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=250, help="number of ED/ES case pairs (default 250)")
    p.add_argument("--size", type=int, default=128, help="square image size in px (default 128)")
    p.add_argument("--slices-min", type=int, default=4, help="min slices per volume (default 4)")
    p.add_argument("--slices-max", type=int, default=6, help="max slices per volume (default 6)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train on a native-format dataset",
                       description="Split cases 0.8:0.2 by patient, train with Adam and the "
                                   "generalized Dice loss, and keep the top-5 checkpoints by "
                                   "validation mean foreground Dice.")
    p.add_argument("--data", required=True, help="dataset directory (native cases)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", default=None,
                   help="key=value config file overriding model/augmentation defaults")
    p.add_argument("--epochs", type=int, default=10, help="training epochs (default 10)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--batch-size", type=int, default=8, help="mini-batch size (default 8)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 0.001)")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="validation fraction of cases (default 0.2)")
    p.add_argument("--keep-top", type=int, default=5,
                   help="checkpoints retained by validation score (default 5)")
    p.add_argument("--no-augment", action="store_true", help="disable data augmentation")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment cases with a checkpoint ensemble",
                       description="Average the softmax probabilities of 1-5 checkpoints "
                                   "per pixel and write argmax label volumes (native format, "
                                   "label only) on the model grid.")
    p.add_argument("--ckpt", action="append", required=True,
                   help="checkpoint file; repeat for an ensemble (1-5)")
    p.add_argument("--in", dest="input", required=True, help="input dataset directory")
    p.add_argument("--out", required=True, help="output directory for label volumes")
    p.add_argument("--batch-size", type=int, default=8, help="inference batch size (default 8)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth",
                       description="Write a per-case CSV with columns case_id,phase,class,dice,"
                                   "hausdorff_mm,volume_pred_ml,volume_true_ml plus a summary "
                                   "table with cohort EF/volume correlation and bias. Ground "
                                   "truth is resampled/cropped onto each prediction's grid.")
    p.add_argument("--pred", required=True, help="directory of predicted cases")
    p.add_argument("--truth", required=True, help="directory of ground-truth cases")
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("convert", help="convert a NIfTI-1 volume to the native format",
                       description="Parse an uncompressed NIfTI-1 file (both byte orders) and "
                                   "write a native case directory; optional --label adds the "
                                   "segmentation volume.")
    p.add_argument("--nifti", required=True, help="input .nii file (not gzipped)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--label", default=None, help="optional NIfTI label volume")
    p.add_argument("--case-id", default=None, help="case id (default: file stem)")
    p.add_argument("--phase", default="ED", choices=["ED", "ES"], help="cardiac phase")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op",
                       description="Run the gradient verification suite (64-bit, h=1e-3, "
                                   "tolerance 1e-4) and exit nonzero on any failure.")
    p.add_argument("--seed", type=int, default=20240101, help="suite seed")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except DATA_ERRORS as e:
        sys.stderr.write(f"error code={EXIT_DATA} kind={type(e).__name__} msg={e}\n")
        return EXIT_DATA
    except OSError as e:
        sys.stderr.write(f"error code={EXIT_DATA} kind=io msg={e}\n")
        return EXIT_DATA
    except NUMERIC_ERRORS as e:
        sys.stderr.write(f"error code={EXIT_NUMERIC} kind={type(e).__name__} msg={e}\n")
        return EXIT_NUMERIC
    except errors.CardsegError as e:
        sys.stderr.write(f"error code={EXIT_INTERNAL} kind={type(e).__name__} msg={e}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
