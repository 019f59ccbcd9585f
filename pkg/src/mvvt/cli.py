"""``mvvt`` command line: generate, train, eval, gradcheck, report.

Exit codes: 0 success, 1 configuration error (including checkpoint/config
mismatch and malformed metric files), 2 I/O error, 3 numeric failure,
4 gradient-check threshold violation.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

from . import gradcheck
from .data import DatasetError, Manifest, make_splits, scan_layout
from .model import CheckpointError, ConfigError, MvvtConfig, init_params, load_checkpoint
from .plantgen import CROPS, RenderConfig, archetype_specs, generate_crop, load_archetypes
from .runconfig import RunConfig, dump_run_config, parse_run_config
from .train import TASKS, MetricsReport, NumericError, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4

log = logging.getLogger("mvvt")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- shared plumbing ---------------------------------------------------------


def _prepare_out(out: Path, force: bool, keep: Sequence[str] = ()) -> None:
    """Refuse to write into a nonempty ``out`` unless ``force``."""
    if out.exists() and not out.is_dir():
        raise CliError(EXIT_IO, f"--out {out} exists and is not a directory")
    if out.exists() and any(p.name not in keep for p in out.iterdir()) and not force:
        raise CliError(EXIT_IO, f"{out} already has outputs; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _write_resolved(out: Path, cfg: RunConfig) -> None:
    (out / "resolved.cfg").write_text(dump_run_config(cfg))


def _load_config(args) -> RunConfig:
    cfg = parse_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _manifest(cfg: RunConfig) -> Manifest:
    manifest = scan_layout(cfg.data)
    if cfg.crops:
        missing = [c for c in cfg.crops if c not in manifest.crops()]
        if missing:
            raise DatasetError(f"crops {missing} not found under {cfg.data} (found {manifest.crops()})")
        manifest = Manifest([r for r in manifest if r.crop in cfg.crops])
    return manifest


def _one_crop(manifest: Manifest, crop: str) -> Manifest:
    return Manifest([r for r in manifest if r.crop == crop])


def _config_lines(cfg: MvvtConfig, other: MvvtConfig) -> list:
    a, b = asdict(cfg), asdict(other)
    return [f"  {k} = {v}" + ("   <-- differs" if b[k] != v else "") for k, v in a.items()]


# --- commands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    gen = cfg.generate
    if args.plants is not None:
        gen = replace(gen, plants=args.plants)
    if args.days is not None:
        gen = replace(gen, days=args.days)
    if args.size is not None:
        gen = replace(gen, height=args.size, width=args.size)
    crops = tuple(args.crop) if args.crop else (cfg.crops or ("radish",))
    out = Path(args.out or cfg.data).resolve()
    cfg = replace(cfg, generate=gen, crops=crops, data=str(out))
    try:
        archetypes = load_archetypes(gen.archetypes)
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"bad archetype table: {exc}") from None
    unknown = [c for c in crops if c not in archetypes or c not in CROPS]
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown crop(s) {unknown}; known: {', '.join(CROPS)}")
    if (gen.plants is not None and gen.plants < 1) or (gen.days is not None and gen.days < 1):
        raise CliError(EXIT_CONFIG, "plants and days must be >= 1")
    try:
        render = RenderConfig(height=gen.height, width=gen.width)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    _prepare_out(out, args.force)
    records = []
    for crop in crops:
        specs = archetype_specs(crop, gen.plants, cfg.seed, archetypes)
        days = gen.days or specs[0].max_day
        if days > specs[0].max_day:
            raise CliError(EXIT_CONFIG, f"{crop}: days {days} exceeds the archetype's max_day {specs[0].max_day}")
        if (out / crop).exists():
            shutil.rmtree(out / crop)
        manifest = generate_crop(specs, range(1, days + 1), render, out)
        records.extend(manifest.records)
        print(f"{crop}: {len(specs)} plants x {days} days x {render.num_levels} levels x "
              f"{render.num_angles} angles = {len(manifest)} images")
    manifest = Manifest(records)
    manifest.save(out / "manifest.tsv")
    _write_resolved(out, cfg)
    print(f"wrote {len(manifest)} images, {len(manifest.keys())} labelled samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.task is not None:
        cfg = replace(cfg, train=replace(cfg.train, task=args.task))
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    if args.data is not None:
        cfg = replace(cfg, data=args.data)
    cfg = replace(cfg, data=str(Path(cfg.data).resolve()))
    manifest = _manifest(cfg)
    out = Path(args.out or "runs/train").resolve()
    _prepare_out(out, args.force)
    _write_resolved(out, cfg)
    for i, crop in enumerate(manifest.crops()):
        crop_manifest = _one_crop(manifest, crop)
        split = make_splits(crop_manifest, cfg.split_ratio, cfg.split_seed, cfg.test_plant)
        params = init_params(cfg.model, cfg.seed)
        start = time.perf_counter()
        result = train(cfg.model, params, crop_manifest, split, cfg.train, cfg.sampling, out / crop)
        log.info("%s: trained in %.1fs", crop, time.perf_counter() - start)
        print(f"{crop} [{cfg.train.task}]: {len(split.train_items)} train / {len(split.val_items)} val items, "
              f"best val RMSE {result.best_val_rmse:.4f} at epoch {result.best_epoch}; "
              f"checkpoints in {out / crop}")
    return EXIT_OK


def _checkpoint_for(path: Path, crop: str) -> Path:
    return path / crop / "best.ckpt" if path.is_dir() else path


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.task is not None:
        cfg = replace(cfg, train=replace(cfg.train, task=args.task))
    if args.data is not None:
        cfg = replace(cfg, data=args.data)
    if args.checkpoint is not None:
        cfg = replace(cfg, checkpoint=args.checkpoint)
    if args.split is not None:
        cfg = replace(cfg, eval_split=args.split)
    if cfg.checkpoint is None:
        raise CliError(EXIT_CONFIG, "eval needs --checkpoint (a .ckpt file or a train output directory)")
    cfg = replace(cfg, data=str(Path(cfg.data).resolve()), checkpoint=str(Path(cfg.checkpoint).resolve()))
    manifest = _manifest(cfg)
    loaded = {}
    for crop in manifest.crops():
        path = _checkpoint_for(Path(cfg.checkpoint), crop)
        ck_cfg, params = load_checkpoint(path)
        if ck_cfg != cfg.model:
            lines = [f"checkpoint {path} was trained with a different model config.", "checkpoint config:"]
            lines += _config_lines(ck_cfg, cfg.model)
            lines += ["run config:"] + _config_lines(cfg.model, ck_cfg)
            raise CliError(EXIT_CONFIG, "\n".join(lines))
        loaded[crop] = (ck_cfg, params)
    out = Path(args.out or "runs/eval").resolve()
    _prepare_out(out, args.force)
    _write_resolved(out, cfg)
    report = MetricsReport()
    for crop, model in loaded.items():
        crop_manifest = _one_crop(manifest, crop)
        split = make_splits(crop_manifest, cfg.split_ratio, cfg.split_seed, cfg.test_plant)
        items = {"train": split.train_items, "val": split.val_items, "test": split.test_items,
                 "all": tuple(crop_manifest.keys())}[cfg.eval_split]
        rep = evaluate(model, crop_manifest, items, cfg.train.task, cfg.sampling, cfg.train.batch_size)
        report = report.merged(rep)
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.table() + "\n")
    for row in report.rows:
        print(f"{row.crop} [{row.task}] {cfg.eval_split}: rmse {row.rmse:.4f}  mae {row.mae:.4f}  n={row.n}")
    print(report.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args) if args.out else None
    start = time.perf_counter()
    results = gradcheck.run_suite(seed=args.seed or 0)
    log.info("gradient checks took %.1fs", time.perf_counter() - start)
    text = gradcheck.format_results(results)
    print(text)
    if args.out:
        out = Path(args.out).resolve()
        _prepare_out(out, args.force)
        _write_resolved(out, cfg)
        (out / "gradcheck.txt").write_text(text + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_report(args) -> int:
    report = MetricsReport()
    for name in args.csv:
        path = Path(name)
        try:
            text = path.read_text()
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None
        try:
            report = report.merged(MetricsReport.from_csv(text))
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"{path}: {exc}") from None
    table = report.table(args.digits)
    print(table)
    if args.out:
        out = Path(args.out).resolve()
        _prepare_out(out, args.force)
        _write_resolved(out, _load_config(args))
        (out / "report.txt").write_text(table + "\n")
        (out / "metrics.csv").write_text(report.to_csv())
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="run config file or bundled name (desk, reference_n20, reference_n24)")
    parser.add_argument("--seed", type=int, default=default, help="override every seed in the run")
    parser.add_argument("--out", default=default, help="output directory (gets resolved.cfg)")
    parser.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="overwrite existing outputs")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvvt", description="Multi-view vision transformer for plant age and leaf count.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "render a synthetic multi-view plant dataset")
    p.add_argument("--crop", action="append", choices=CROPS, help="crop archetype (repeatable; default radish)")
    p.add_argument("--plants", type=int, help="plants per crop (default: archetype table)")
    p.add_argument("--days", type=int, help="render days 1..N (default: archetype max_day)")
    p.add_argument("--size", type=int, help="square image size in pixels")

    p = add("train", cmd_train, "train one model per crop")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--data", help="dataset root")

    p = add("eval", cmd_eval, "evaluate a checkpoint and write metrics.csv")
    p.add_argument("--checkpoint", help="checkpoint file, or a train output directory (uses <crop>/best.ckpt)")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--split", choices=("train", "val", "test", "all"))

    add("gradcheck", cmd_gradcheck, "finite-difference and attention-oracle verification suite")

    p = add("report", cmd_report, "merge per-crop metric CSVs into one table")
    p.add_argument("csv", nargs="+", help="metrics CSV files (crop,task,rmse,mae,n)")
    p.add_argument("--digits", type=int, default=2)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CheckpointError, ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
