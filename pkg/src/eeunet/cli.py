"""Command-line entry point: ``eeunet <subcommand> [flags]``.

Every subcommand prints its resolved configuration as JSON before doing any
work. Configuration comes from an optional INI file (``[train]`` and
``[arch]`` sections), then ``--set key=value`` overrides, then dedicated
flags, with later sources winning.
"""
import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import set_threads
from .dataset import (
    IMAGE_SIZE,
    SliceDataset,
    gen_phantom,
    load_acdc_patient,
    load_dataset,
    make_folds,
    normalize_slice,
    resize,
    save_dataset,
)
from .errors import DataError, EEUNetError, IoFailure, UsageError
from .metrics import aggregate, records_to_csv, render_csv, render_text
from .model import ArchSpec, forward, load_checkpoint, predict_mask
from .nifti import Volume, read_nifti, write_nifti
from .trainer import TrainConfig, cross_validate, evaluate, log_to_jsonl, train

log = logging.getLogger("eeunet")

_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "arch"}
_ARCH_KEYS = {f.name: f.type for f in fields(ArchSpec)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _coerce(value, kind, key):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = str(value).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except ValueError:
        raise UsageError(f"bad value {value!r} for {key}") from None


def resolve_config(args):
    """Merge config file, ``--set`` overrides and flags into a TrainConfig."""
    train_kv, arch_kv = {}, {}
    if args.config:
        cp = configparser.ConfigParser()
        try:
            with open(args.config) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise IoFailure(f"cannot read config {args.config}: {exc}") from exc
        except configparser.Error as exc:
            raise UsageError(f"malformed config {args.config}: {exc}") from exc
        unknown = set(cp.sections()) - {"train", "arch"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        if cp.has_section("train"):
            train_kv.update(cp.items("train"))
        if cp.has_section("arch"):
            arch_kv.update(cp.items("arch"))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        section, _, name = key.strip().rpartition(".")
        target = arch_kv if section == "arch" or (not section and name in _ARCH_KEYS) else train_kv
        target[name] = value.strip()
    for kv, known, label in ((train_kv, _TRAIN_KEYS, "train"), (arch_kv, _ARCH_KEYS, "arch")):
        bad = set(kv) - set(known)
        if bad:
            raise UsageError(f"unknown {label} keys: {sorted(bad)}")

    train_vals = {k: _coerce(v, _TRAIN_KEYS[k], k) for k, v in train_kv.items()}
    arch_vals = {k: _coerce(v, _ARCH_KEYS[k], k) for k, v in arch_kv.items()}
    if args.seed is not None:
        train_vals["seed"] = args.seed
    if getattr(args, "fold", None) is not None:
        train_vals["fold_index"] = args.fold
    if getattr(args, "augment", False):
        train_vals["augment"] = True
    if getattr(args, "weights", None):
        train_vals["weights_mode"] = args.weights
    if getattr(args, "base_width", None) is not None:
        arch_vals["base_width"] = args.base_width
    if getattr(args, "no_edge_infusion", False):
        arch_vals["edge_infusion"] = False
    try:
        return TrainConfig(arch=ArchSpec(**arch_vals), **train_vals)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _print_config(command, args, cfg=None, **extra):
    shown = {"command": command, "version": __version__}
    for key in ("data", "out", "ckpt", "input", "count", "slice", "k_folds"):
        value = getattr(args, key, None)
        if value is not None:
            shown[key] = str(value)
    if cfg is not None:
        shown["config"] = asdict(cfg)
    shown.update(extra)
    print(json.dumps(shown, sort_keys=True))
    sys.stdout.flush()


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _out_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {path}: {exc}") from exc
    return path


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# subcommands


def cmd_phantom(args):
    seed = 0 if args.seed is None else args.seed
    _print_config("phantom", args, seed=seed)
    _require(args, "out")
    samples = gen_phantom(seed, args.count)
    plan = make_folds([(s.meta.patient_id, s.meta.pathology) for s in samples], args.k_folds, seed)
    save_dataset(SliceDataset(samples, plan, {"source": "phantom"}), _out_dir(args.out))
    print(f"wrote {len(samples)} phantom slices to {args.out}")


def cmd_preprocess(args):
    seed = 0 if args.seed is None else args.seed
    _print_config("preprocess", args, seed=seed)
    _require(args, "input", "out")
    root = Path(args.input)
    patient_dirs = sorted(p for p in root.iterdir() if (p / "Info.cfg").exists()) if root.is_dir() else []
    if not patient_dirs:
        raise DataError(f"no patient folders with Info.cfg under {root}")
    samples = []
    for d in patient_dirs:
        samples += load_acdc_patient(d)
    plan = make_folds(SliceDataset(samples).patients(), args.k_folds, seed)
    save_dataset(SliceDataset(samples, plan, {"source": str(root)}), _out_dir(args.out))
    print(f"wrote {len(samples)} slices from {len(patient_dirs)} patients to {args.out}")


def _load_split(args, cfg):
    ds = load_dataset(args.data)
    if ds.plan is None:
        raise DataError(f"{args.data} has no fold assignment")
    if not 0 <= cfg.fold_index < ds.plan.k:
        raise UsageError(f"--fold must be in [0, {ds.plan.k})")
    return ds.split(cfg.fold_index)


def cmd_train(args):
    cfg = resolve_config(args)
    _print_config("train", args, cfg)
    _require(args, "data")
    train_set, val_set = _load_split(args, cfg)
    out = _out_dir(args.out) if args.out else None
    ckpt = args.ckpt or (str(out / "model.ckpt") if out else "model.ckpt")

    def stream(rec):
        print(json.dumps(rec, sort_keys=True))
        sys.stdout.flush()

    params, tlog = train(train_set, cfg, val_set, ckpt, stream)
    if out is not None:
        _write_text(out / "train_log.jsonl", log_to_jsonl(tlog))
    print(f"best epoch {tlog.best_epoch} (mean val DSC {tlog.best_dsc:.4f}); checkpoint {ckpt}")


def cmd_eval(args):
    cfg = resolve_config(args)
    _print_config("eval", args, cfg)
    _require(args, "data", "ckpt")
    _, test_set = _load_split(args, cfg)
    params, _, _ = load_checkpoint(args.ckpt)
    records = evaluate(params, test_set)
    report = aggregate(records)
    print(render_text(report), end="")
    if args.out:
        out = _out_dir(args.out)
        _write_text(out / "report.csv", render_csv(report))
        _write_text(out / "records.csv", records_to_csv(records))


def cmd_cross_validate(args):
    cfg = resolve_config(args)
    _print_config("cross-validate", args, cfg)
    _require(args, "data")
    ds = load_dataset(args.data)
    out = _out_dir(args.out) if args.out else None

    def stream(rec):
        print(json.dumps(rec, sort_keys=True))
        sys.stdout.flush()

    plan = ds.plan if ds.plan is not None and ds.plan.k == cfg.k_folds else None
    result = cross_validate(ds.samples, cfg, plan, str(out) if out else None, stream)
    print(render_text(result.report), end="")
    if out is not None:
        _write_text(out / "report.csv", render_csv(result.report))
        _write_text(out / "records.csv", records_to_csv(result.records))
        _write_text(out / "report.txt", render_text(result.report))


def cmd_segment(args):
    _print_config("segment", args)
    _require(args, "ckpt", "input", "out")
    params, _, _ = load_checkpoint(args.ckpt)
    vol = read_nifti(args.input)
    data = vol.data if vol.data.ndim == 3 else vol.data[..., args.frame or 0]
    nx, ny, nz = data.shape
    labels = np.zeros((nx, ny, nz), dtype=np.uint8)
    dtype = params.dtype
    for z in range(nz):
        img = resize(normalize_slice(data[:, :, z]), (IMAGE_SIZE, IMAGE_SIZE), "bilinear")
        logits, _ = forward(params, img[None, None].astype(dtype), "eval")
        pred = predict_mask(logits)[0]
        labels[:, :, z] = resize(pred, (nx, ny), "nearest")
    write_nifti(Volume(labels, vol.spacing[:3]), args.out)
    print(f"wrote {args.out}: labels {sorted(int(v) for v in np.unique(labels))}")


def _load_grid(path, slice_index):
    path = Path(path)
    if path.suffix == ".npy":
        try:
            grid = np.load(path)
        except (OSError, ValueError) as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
        spacing = (1.0, 1.0)
    else:
        vol = read_nifti(path)
        grid, spacing = vol.data, vol.spacing[:2]
    while grid.ndim > 2:
        grid = grid[..., min(slice_index, grid.shape[-1] - 1)] if grid.ndim == 3 else grid[..., 0]
    if grid.ndim != 2:
        raise DataError(f"{path} is not a 2D/3D grid")
    return np.asarray(grid, dtype=np.float64), spacing


def cmd_edges(args):
    from .edge import edge_extract

    _print_config("edges", args)
    _require(args, "input", "out")
    grid, spacing = _load_grid(args.input, args.slice or 0)
    e = edge_extract(grid)
    out = _out_dir(args.out)
    for name, arr in (
        ("binary", e.binary.astype(np.uint8)),
        ("magnitude", e.magnitude.astype(np.float32)),
        ("orientation", e.orientation.astype(np.float32)),
    ):
        write_nifti(Volume(arr[:, :, None], (*spacing, 1.0)), out / f"{name}.nii.gz")
    print(f"{int(e.binary.sum())} edge pixels; thresholds low={e.low:.6g} high={e.high:.6g}")


def cmd_grad_check(args):
    from .gradsuite import full_suite

    seeds = range(args.seeds)
    _print_config("grad-check", args, seeds=args.seeds)
    reports = full_suite(seeds)
    for r in reports:
        print(r)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


# ----------------------------------------------------------------------------
# parser


def _common(p, training=False):
    p.add_argument("--config", help="INI file with [train] and [arch] sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    if training:
        p.add_argument("--data", help="preprocessed dataset directory")
        p.add_argument("--fold", type=int)
        p.add_argument("--base-width", type=int)
        p.add_argument("--no-edge-infusion", action="store_true")
        p.add_argument("--augment", action="store_true")
        p.add_argument("--weights", choices=("invfreq", "uniform"))


def build_parser():
    parser = _Parser(prog="eeunet", description="Edge-infused U-Net cardiac segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"eeunet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    _common(p)
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--k-folds", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="convert an ACDC training folder into slice records")
    _common(p)
    p.add_argument("--in", dest="input")
    p.add_argument("--k-folds", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_preprocess)

    for name, func, helptext in (
        ("train", cmd_train, "train on the other folds, validate on --fold"),
        ("eval", cmd_eval, "score a checkpoint on the held-out fold"),
        ("cross-validate", cmd_cross_validate, "k-fold cross-validation"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p, training=True)
        p.add_argument("--out")
        p.add_argument("--ckpt")
        p.set_defaults(func=func)

    p = sub.add_parser("segment", help="segment every slice of a NIfTI volume")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    p.add_argument("--frame", type=int, help="time index for 4D input")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("edges", help="edge maps of one slice (.nii, .nii.gz or .npy)")
    _common(p)
    p.add_argument("--in", dest="input")
    p.add_argument("--slice", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_edges)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_grad_check)
    return parser


def run(argv=None):
    """Parse ``argv`` and dispatch; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        threads = os.environ.get("EEUNET_THREADS")
        if threads:
            try:
                set_threads(int(threads))
            except ValueError:
                raise UsageError(f"EEUNET_THREADS must be an integer, got {threads!r}") from None
        if args.command is None:
            parser.print_help(sys.stderr)
            raise UsageError("a subcommand is required")
        code = args.func(args)
        return 0 if code is None else code
    except EEUNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IoFailure.exit_code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
