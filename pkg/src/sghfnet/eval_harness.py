"""Metrics, cross-validated experiment runner, external validation and report tables.

Scoring is per subject: one probability and one hard label per case.  AUC is
the Mann-Whitney statistic with average ranks for ties, so it is exact and
needs no threshold grid; ROC points are produced separately for plotting.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from .config import VARIANTS, RunConfig, config_hash
from .optim import NumericalError
from .pfe import extract_features, train_pfe
from .pfsm import Generator, build_gan, stack_volumes, train_pfsm
from .sghf import NEEDS_GENERATOR, SghfModel, build_model, hard_label, predict_proba, train_sghf
from .synth_data import FoldSplit, Subject, split_folds, stream_rng

logger = logging.getLogger(__name__)

METRICS = ("acc", "auc", "f1")
F1_NOTE = "F1 is defined as 0 when a fold has no positive predictions and no positive cases."


# -- metrics -----------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_predictions(cls, pred, truth) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        truth = np.asarray(truth).astype(bool)
        if pred.shape != truth.shape:
            raise ValueError(f"{pred.size} predictions vs {truth.size} labels")
        return cls(tp=int((pred & truth).sum()), tn=int((~pred & ~truth).sum()),
                   fp=int((pred & ~truth).sum()), fn=int((~pred & truth).sum()))


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return (c.tp + c.tn) / c.total


def f1(c: ConfusionCounts) -> float:
    """TP / (TP + (FP + FN) / 2); 0 when there is nothing to score."""
    denom = c.tp + 0.5 * (c.fp + c.fn)
    return c.tp / denom if denom > 0 else 0.0


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    pos = labels == 1
    if pos.all() or not pos.any():
        raise ValueError("AUC is undefined when only one class is present")
    return scores, pos


def mann_whitney_u(scores, labels) -> float:
    """U statistic of the positives: #(pos > neg) + 0.5 * #(pos == neg)."""
    scores, pos = _check_binary(scores, labels)
    n_pos = int(pos.sum())
    return float(average_ranks(scores)[pos].sum() - n_pos * (n_pos + 1) / 2.0)


def roc_points(scores, labels) -> List[Tuple[float, float, float]]:
    """(threshold, FPR, TPR) at every distinct score, from (inf, 0, 0) to (min, 1, 1)."""
    scores, pos = _check_binary(scores, labels)
    n_pos, n_neg = pos.sum(), (~pos).sum()
    pts = [(math.inf, 0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        hit = scores >= t
        pts.append((float(t), float((hit & ~pos).sum() / n_neg), float((hit & pos).sum() / n_pos)))
    return pts


def roc_auc(scores, labels) -> Tuple[float, List[Tuple[float, float, float]]]:
    scores, pos = _check_binary(scores, labels)
    auc = mann_whitney_u(scores, pos.astype(int)) / (pos.sum() * (~pos).sum())
    return float(auc), roc_points(scores, pos.astype(int))


def fold_metrics(probs, truth) -> dict:
    truth = np.asarray(truth)
    c = ConfusionCounts.from_predictions(hard_label(probs), truth)
    auc, _ = roc_auc(probs, truth)
    return {"acc": accuracy(c), "auc": auc, "f1": f1(c), "tp": c.tp, "tn": c.tn, "fp": c.fp,
            "fn": c.fn, "n": c.total}


def aggregate(values) -> Tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("nothing to aggregate")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class MetricsReport:
    variant: str
    backbone: str
    seed: int
    config_hash: str
    folds: List[dict]
    kind: str = "cross-validation"
    notes: List[str] = field(default_factory=list)

    @property
    def aggregate(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for m in METRICS:
            mean, std = aggregate([row[m] for row in self.folds])
            out[m] = {"mean": mean, "std": std}
        return out

    def to_dict(self) -> dict:
        return {"variant": self.variant, "backbone": self.backbone, "seed": self.seed,
                "config_hash": self.config_hash, "kind": self.kind, "folds": self.folds,
                "aggregate": self.aggregate, "k": len(self.folds), "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        cols = ["fold"] + list(METRICS) + ["tp", "tn", "fp", "fn", "n"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.folds:
            w.writerow([row[c] for c in cols])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(variant=d["variant"], backbone=d["backbone"], seed=d["seed"],
                   config_hash=d["config_hash"], folds=d["folds"], kind=d.get("kind", "cross-validation"),
                   notes=d.get("notes", []))

    @classmethod
    def load(cls, path) -> "MetricsReport":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"metrics file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


def make_report(variant: str, cfg: RunConfig, rows: List[dict], kind: str = "cross-validation") -> MetricsReport:
    notes = []
    if any(r["tp"] + r["fp"] + r["fn"] == 0 for r in rows):
        notes.append(F1_NOTE)
    return MetricsReport(variant=variant, backbone=cfg.model.backbone, seed=cfg.seed,
                         config_hash=config_hash(cfg), folds=rows, kind=kind, notes=notes)


# -- experiment runner -------------------------------------------------------------------


def fold_seed(seed: int, fold: int) -> int:
    return int(stream_rng(seed, "fold", fold).integers(0, 2 ** 31 - 1))


def train_generator(subjects: Sequence[Subject], cfg: RunConfig, seed: int,
                    volumes: Optional[np.ndarray] = None) -> dict:
    """Pathology classifier, feature cache and GAN on ``subjects``; returns states and logs."""
    pfe_model, pfe_log = train_pfe(subjects, cfg.model, cfg.optim, cfg.optim.pfe_epochs, seed)
    feats = extract_features(subjects, pfe_model)
    g, d, pfsm_log = train_pfsm(subjects, feats, cfg.model, cfg.optim, cfg.data, seed,
                                lambda_p=cfg.lambda_p, volumes=volumes)
    return {"pfe_state": pfe_model.state_dict(), "pfe_log": pfe_log, "g_state": g.state_dict(),
            "d_state": d.state_dict(), "pfsm_log": pfsm_log}


def generator_from_state(cfg: RunConfig, state: Dict[str, np.ndarray]) -> Generator:
    g, _ = build_gan(cfg.model, 0)
    ckpt.load_into(g, state)
    g.trained = True
    g.eval()
    return g


def run_fold(subjects: Sequence[Subject], split: FoldSplit, fold: int, cfg: RunConfig,
             variants: Sequence[str], shared: Optional[dict] = None) -> dict:
    """Train the requested variants on one fold and score its held-out subjects."""
    by_id = {s.id: s for s in subjects}
    train = [by_id[i] for i in split.train[fold]]
    test = [by_id[i] for i in split.test[fold]]
    seed = fold_seed(cfg.seed, fold)
    with threadpool_limits(1):
        try:
            volumes = stack_volumes(train, cfg.data)
            stages = shared
            if stages is None and any(v in NEEDS_GENERATOR for v in variants):
                stages = train_generator(train, cfg, seed, volumes)
            generator = generator_from_state(cfg, stages["g_state"]) if stages else None
            out = {"fold": fold, "test_ids": [s.id for s in test], "variants": {},
                   "stages": stages if shared is None else None}
            for variant in variants:
                model = build_model(variant, cfg.model, seed, generator if variant in NEEDS_GENERATOR else None,
                                    cfg.inference_label, cfg.lambda_r, cfg.lambda_p)
                model, log = train_sghf(model, train, cfg.optim, cfg.data, seed, volumes=volumes)
                probs = predict_proba(model, test, cfg.data)
                truth = np.array([s.label for s in test])
                out["variants"][variant] = {"probs": probs, "truth": truth, "log": log,
                                            "metrics": fold_metrics(probs, truth),
                                            "state": ckpt.module_state(model, {"generator": model.generator})}
        except NumericalError as exc:
            raise NumericalError(f"fold {fold}: {exc}") from exc
    logger.info("fold %d done: %s", fold,
                {v: round(r["metrics"]["auc"], 4) for v, r in out["variants"].items()})
    return out


def _fold_job(args):
    return run_fold(*args)


@dataclass
class Experiment:
    cfg: RunConfig
    variants: List[str]
    split: FoldSplit
    folds: List[dict]
    global_stages: Optional[dict] = None

    def report(self, variant: str) -> MetricsReport:
        return make_report(variant, self.cfg, [dict(fold=f["fold"], **f["variants"][variant]["metrics"])
                                               for f in self.folds])

    @property
    def reports(self) -> Dict[str, MetricsReport]:
        return {v: self.report(v) for v in self.variants}


def run_experiment(subjects: Sequence[Subject], cfg: RunConfig, variants: Optional[Sequence[str]] = None,
                   jobs: int = 1) -> Experiment:
    """k-fold cross-validation of each variant; folds may run in worker processes.

    Results are assembled in fold order, so the output does not depend on
    ``jobs``.  With ``pfsm_scope == 'global'`` the pathology classifier and GAN
    are trained once on every subject (test folds included) and shared.
    """
    cfg.validate()
    variants = list(variants or [cfg.variant])
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    split = split_folds([s.id for s in subjects], [s.label for s in subjects], cfg.folds, cfg.seed)
    shared = None
    if cfg.pfsm_scope == "global" and any(v in NEEDS_GENERATOR for v in variants):
        with threadpool_limits(1):
            shared = train_generator(subjects, cfg, stream_rng(cfg.seed, "global").integers(2 ** 31 - 1))
    tasks = [(subjects, split, k, cfg, variants, shared) for k in range(cfg.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_fold_job, tasks))
    else:
        folds = [_fold_job(t) for t in tasks]
    return Experiment(cfg=cfg, variants=variants, split=split, folds=folds, global_stages=shared)


# -- persistence -------------------------------------------------------------------------


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _log_rows(log: List[dict]):
    if not log:
        return [], []
    header = list(log[0])
    return header, [[row[h] for h in header] for row in log]


def write_stage_outputs(directory: Path, tag: str, stages: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    ckpt.save_state(directory / f"pfe_{tag}.json", stages["pfe_state"], {"stage": "pfe"})
    ckpt.save_state(directory / f"pfsm_{tag}.json",
                    {**{f"generator.{k}": v for k, v in stages["g_state"].items()},
                     **{f"discriminator.{k}": v for k, v in stages["d_state"].items()}}, {"stage": "pfsm"})
    _write_csv(directory / f"pfe_log_{tag}.csv", *_log_rows(stages["pfe_log"]))
    rows = [[r["step"], r["loss_d"], r["loss_g"], r["acc_src"], r["acc_cls"]] for r in stages["pfsm_log"]]
    _write_csv(directory / f"pfsm_curve_{tag}.csv", ["step", "L_D", "L_G", "acc_src", "acc_cls"], rows)


def write_report(directory: Path, report: MetricsReport) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.json").write_text(report.to_json())
    (directory / "folds.csv").write_text(report.to_csv())


def write_predictions(directory: Path, fold: int, ids, probs, truth) -> None:
    rows = [[int(i), repr(float(p)), int(hard_label(p)), int(t)] for i, p, t in zip(ids, probs, truth)]
    _write_csv(directory / f"predictions_fold{fold}.csv", ["subject_id", "p", "label", "truth"], rows)
    _, pts = roc_auc(probs, truth)
    _write_csv(directory / f"roc_fold{fold}.csv", ["threshold", "fpr", "tpr"],
               [[repr(t), repr(x), repr(y)] for t, x, y in pts])


def write_experiment(run_dir, exp: Experiment) -> Dict[str, Path]:
    """Checkpoints, logs, predictions and one report per variant under ``run_dir``."""
    run_dir = Path(run_dir)
    stage_dir = run_dir / "stages"
    if exp.global_stages is not None:
        write_stage_outputs(stage_dir, "global", exp.global_stages)
    for f in exp.folds:
        if f["stages"] is not None:
            write_stage_outputs(stage_dir, f"fold{f['fold']}", f["stages"])
    (run_dir / "split.json").write_text(json.dumps(
        {"k": exp.split.k, "test": [list(map(int, t)) for t in exp.split.test]}, indent=1) + "\n")
    paths = {}
    for variant in exp.variants:
        vdir = run_dir / variant
        vdir.mkdir(parents=True, exist_ok=True)
        for f in exp.folds:
            r = f["variants"][variant]
            k = f["fold"]
            ckpt.save_state(vdir / f"model_fold{k}.json", r["state"], {"variant": variant, "fold": k})
            _write_csv(vdir / f"train_log_fold{k}.csv", *_log_rows(r["log"]))
            write_predictions(vdir, k, f["test_ids"], r["probs"], r["truth"])
        write_report(vdir, exp.report(variant))
        paths[variant] = vdir / "report.json"
    return paths


def load_fold_model(run_dir, cfg: RunConfig, variant: str, fold: int) -> SghfModel:
    """Rebuild a trained fold model (and its frozen generator) from a run directory."""
    state, meta = ckpt.load_state(Path(run_dir) / variant / f"model_fold{fold}.json")
    if meta.get("variant") != variant:
        raise ckpt.CheckpointError(f"checkpoint variant {meta.get('variant')!r} != {variant!r}")
    state, g_state = ckpt.split_state(state, "generator")
    generator = generator_from_state(cfg, g_state) if variant in NEEDS_GENERATOR else None
    model = build_model(variant, cfg.model, fold_seed(cfg.seed, fold), generator, cfg.inference_label,
                        cfg.lambda_r, cfg.lambda_p)
    ckpt.load_into(model, state)
    model.eval()
    return model


def evaluate_models(models: Sequence[SghfModel], subject_sets: Sequence[Sequence[Subject]], cfg: RunConfig,
                    variant: str, kind: str) -> Tuple[MetricsReport, List[dict]]:
    rows, preds = [], []
    for k, (model, subs) in enumerate(zip(models, subject_sets)):
        with threadpool_limits(1):
            probs = predict_proba(model, subs, cfg.data)
        truth = np.array([s.label for s in subs])
        rows.append(dict(fold=k, **fold_metrics(probs, truth)))
        preds.append({"ids": [s.id for s in subs], "probs": probs, "truth": truth})
    return make_report(variant, cfg, rows, kind), preds


def evaluate_run(run_dir, cfg: RunConfig, subjects: Sequence[Subject], variant: str):
    """Re-score saved fold models on their own test folds."""
    run_dir = Path(run_dir)
    split = json.loads((run_dir / "split.json").read_text())
    by_id = {s.id: s for s in subjects}
    try:
        sets = [[by_id[i] for i in test] for test in split["test"]]
    except KeyError as exc:
        raise ValueError(f"dataset lacks subject {exc} referenced by the run's split") from exc
    models = [load_fold_model(run_dir, cfg, variant, k) for k in range(split["k"])]
    return evaluate_models(models, sets, cfg, variant, "cross-validation")


def external_validate(run_dir, cfg: RunConfig, foreign: Sequence[Subject], variant: str):
    """Every fold model scored on the whole foreign dataset; no training."""
    run_dir = Path(run_dir)
    split = json.loads((run_dir / "split.json").read_text())
    models = [load_fold_model(run_dir, cfg, variant, k) for k in range(split["k"])]
    return evaluate_models(models, [foreign] * len(models), cfg, variant, "external")


# -- report tables -----------------------------------------------------------------------


def format_cell(mean: float, std: float) -> str:
    """Percentages with two decimals, e.g. ``87.68±6.81``."""
    return f"{100.0 * mean:.2f}±{100.0 * std:.2f}"


def comparison_table(named_reports: Sequence[Tuple[str, MetricsReport]]) -> Tuple[str, str]:
    """Markdown (best mean per metric in bold) and CSV versions of a comparison table."""
    if not named_reports:
        raise ValueError("no reports to compare")
    aggs = [(name, rep.aggregate) for name, rep in named_reports]
    best = {m: max(a[m]["mean"] for _, a in aggs) for m in METRICS}
    header = ["run", "variant", "ACC (%)", "AUC (%)", "F1 (%)"]
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header + ["best"])
    for (name, agg), (_, rep) in zip(aggs, named_reports):
        cells, flags = [], []
        for m in METRICS:
            cell = format_cell(agg[m]["mean"], agg[m]["std"])
            if agg[m]["mean"] == best[m]:
                flags.append(m)
                cell = f"**{cell}**"
            cells.append(cell)
        md.append("| " + " | ".join([name, rep.variant] + cells) + " |")
        w.writerow([name, rep.variant] + [format_cell(agg[m]["mean"], agg[m]["std"]) for m in METRICS]
                   + [";".join(flags)])
    return "\n".join(md) + "\n", buf.getvalue()
