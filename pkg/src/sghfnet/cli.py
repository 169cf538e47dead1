"""Command-line front end.

    sghfnet init CONFIG [--preset desk|paper-scale|smoke]
    sghfnet gen-data --config CONFIG --out DATA_DIR [--shift S]
    sghfnet train --config CONFIG --data DATA_DIR --run-dir RUN [--variant V] [--jobs N]
    sghfnet eval --run-dir RUN --data DATA_DIR [--variant V]
    sghfnet external-validate --run-dir RUN --data FOREIGN_DIR [--variant V]
    sghfnet ablate --config CONFIG --data DATA_DIR --run-dir RUN [--jobs N]
    sghfnet report RUN [RUN ...] [--out PREFIX]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import config as config_mod
from .config import VARIANTS, ConfigError, RunConfig
from .eval_harness import (MetricsReport, comparison_table, evaluate_run, external_validate, run_experiment,
                           write_experiment, write_predictions, write_report)
from .optim import NumericalError
from .synth_data import config_to_dict, generate_dataset, load_dataset, manifest_hash, save_dataset

logger = logging.getLogger("sghfnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class DataError(RuntimeError):
    """Missing, malformed or incompatible dataset / run directory."""


def load_config(path, seed=None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = config_mod.loads(path.read_text())
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def _load_data(path):
    try:
        return load_dataset(path)
    except (FileNotFoundError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load dataset {path}: {exc}") from exc


def _bind_dataset(cfg: RunConfig, data_cfg) -> RunConfig:
    """The dataset's own generation parameters take precedence over the config's."""
    if config_to_dict(data_cfg) != config_to_dict(cfg.data):
        logger.warning("config data section differs from the dataset manifest; using the manifest's")
        cfg.data = data_cfg
    return cfg.validate()


def _prepare_run_dir(run_dir, cfg: RunConfig, data_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    text = config_mod.dumps(cfg)
    (run_dir / "config.json").write_text(text)
    (run_dir / "config.hash").write_text(config_mod.git_blob_hash(text.encode()) + "\n")
    (run_dir / "dataset.json").write_text(json.dumps(
        {"path": str(Path(data_dir)), "manifest_sha256": manifest_hash(data_dir)}, indent=1) + "\n")
    return run_dir


def _run_config(run_dir) -> RunConfig:
    path = Path(run_dir) / "config.json"
    if not path.exists():
        raise DataError(f"not a run directory (no config.json): {run_dir}")
    return config_mod.loads(path.read_text()).validate()


def _print_summary(reports):
    for variant, rep in reports.items():
        agg = rep.aggregate
        cells = "  ".join(f"{m.upper()} {agg[m]['mean'] * 100:.2f}±{agg[m]['std'] * 100:.2f}" for m in agg)
        print(f"{variant:13s} {cells}")


# -- subcommands -------------------------------------------------------------------------


def cmd_init(args):
    cfg = config_mod.preset(args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.config)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(config_mod.dumps(cfg))
    print(f"wrote {args.preset} config to {out}")


def cmd_gen_data(args):
    cfg = load_config(args.config, args.seed)
    if args.n is not None:
        cfg.data.n_subjects = args.n
    if args.shift is not None:
        cfg.data.shift = args.shift
    cfg.validate()
    subjects = generate_dataset(cfg.data, cfg.seed)
    try:
        save_dataset(args.out, subjects, cfg.data, cfg.seed)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc}") from exc
    n1 = sum(s.label for s in subjects)
    print(f"{len(subjects)} subjects -> {args.out}  (class 0: {len(subjects) - n1}, class 1: {n1})")
    print(f"manifest sha256 {manifest_hash(args.out)}")


def _train(args, variants):
    cfg = load_config(args.config, args.seed)
    subjects, data_cfg, _ = _load_data(args.data)
    cfg = _bind_dataset(cfg, data_cfg)
    if len(variants) == 1:
        cfg.variant = variants[0]
    run_dir = _prepare_run_dir(args.run_dir, cfg, args.data)
    exp = run_experiment(subjects, cfg, variants, jobs=args.jobs)
    write_experiment(run_dir, exp)
    _print_summary(exp.reports)
    return run_dir, exp


def cmd_train(args):
    variant = args.variant
    if variant is None:
        variant = load_config(args.config, args.seed).variant
    _train(args, [variant])


def cmd_ablate(args):
    variants = args.variants or list(VARIANTS)
    run_dir, exp = _train(args, variants)
    md, csv_text = comparison_table([(v, exp.report(v)) for v in variants])
    (run_dir / "table.md").write_text(md)
    (run_dir / "table.csv").write_text(csv_text)
    print(md, end="")


def _variants_in_run(run_dir, requested):
    if requested:
        return [requested]
    found = [v for v in VARIANTS if (Path(run_dir) / v / "report.json").exists()]
    if not found:
        raise DataError(f"no trained variants under {run_dir}")
    return found


def _score(args, kind):
    cfg = _run_config(args.run_dir)
    subjects, data_cfg, _ = _load_data(args.data)
    for key in ("volume_shape", "voi_shape", "patch_size", "patches_per_subject"):
        if getattr(data_cfg, key) != getattr(cfg.data, key):
            raise DataError(f"dataset {key} {getattr(data_cfg, key)} does not match the run's {getattr(cfg.data, key)}")
    reports = {}
    for variant in _variants_in_run(args.run_dir, args.variant):
        try:
            if kind == "external":
                rep, preds = external_validate(args.run_dir, cfg, subjects, variant)
            else:
                rep, preds = evaluate_run(args.run_dir, cfg, subjects, variant)
        except (ckpt.CheckpointError, FileNotFoundError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        out = Path(args.run_dir) / ("external" if kind == "external" else "eval") / variant
        write_report(out, rep)
        for k, p in enumerate(preds):
            write_predictions(out, k, p["ids"], p["probs"], p["truth"])
        reports[variant] = rep
    _print_summary(reports)


def cmd_eval(args):
    _score(args, "cross-validation")


def cmd_external_validate(args):
    _score(args, "external")


def collect_reports(run_dirs):
    rows = []
    for rd in run_dirs:
        rd = Path(rd)
        if not rd.is_dir():
            raise DataError(f"run directory not found: {rd}")
        found = False
        for sub in ("", "external/"):
            for v in VARIANTS:
                path = rd / f"{sub}{v}" / "report.json"
                if path.exists():
                    rows.append((f"{rd.name}{'/external' if sub else ''}", MetricsReport.load(path)))
                    found = True
        if not found:
            raise DataError(f"incomplete run directory, no report.json under {rd} "
                            f"(expected e.g. {rd / VARIANTS[0] / 'report.json'})")
    return rows


def cmd_report(args):
    md, csv_text = comparison_table(collect_reports(args.runs))
    if args.out:
        Path(args.out + ".md").write_text(md)
        Path(args.out + ".csv").write_text(csv_text)
    print(md, end="")


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sghfnet", description="Synthetic-pathology guided CT classifier")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a full config template")
    s.add_argument("config")
    s.add_argument("--preset", default="desk", help="desk (default), paper-scale or smoke")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--n", type=int, default=None, help="override number of subjects")
    s.add_argument("--shift", type=float, default=None, help="distribution shift (external-site analog)")
    s.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train", cmd_train, "cross-validate one variant"),
                                 ("ablate", cmd_ablate, "cross-validate the variant suite")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--run-dir", required=True)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
        if name == "train":
            s.add_argument("--variant", choices=VARIANTS, default=None)
        else:
            s.add_argument("--variants", nargs="+", choices=VARIANTS, default=None)
        s.set_defaults(func=func)

    for name, func, helptext in (("eval", cmd_eval, "re-score saved fold models on their test folds"),
                                 ("external-validate", cmd_external_validate,
                                  "score saved fold models on a foreign dataset")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--run-dir", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--variant", choices=VARIANTS, default=None)
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="comparison table over run directories")
    s.add_argument("runs", nargs="+")
    s.add_argument("--out", default=None, help="write PREFIX.md and PREFIX.csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ckpt.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
