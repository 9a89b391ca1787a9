"""Command-line entry point: ``celleconet <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import CohortFormatError, load_cohort, view_slide
from .ensemble import run_ensemble, write_ensemble
from .mil_head import InapplicableSlide, slide_forward, write_attention_csv
from .stats import (SUBGROUP_KEYS, ConvergenceError, Prediction, UndefinedStatistic, bias_report,
                    concordance_index, confusion_metrics, cox_univariable, km_estimate, logrank,
                    roc_auc, subgroup_report)
from .synthgen import SynthConfig, write_synthetic
from .trainer import (ConfigurationError, TrainConfig, json_clean, load_model, read_predictions,
                      run_cv, summarize, write_run)

log = logging.getLogger("celleconet")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

ABLATION_GRID = (
    ("1D", 1, True),
    ("2D", 2, True),
    ("3D", 3, True),
    ("1D", 1, False),
    ("2D", 2, False),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config


def read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    doc = json.loads(p.read_text())
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{p}: config must be a JSON object")
    return doc


def train_config(doc: dict, args) -> TrainConfig:
    section = {**{k: v for k, v in doc.items() if not isinstance(v, dict)}, **doc.get("train", {})}
    cfg = TrainConfig.from_dict(section)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "rank", None) is not None:
        cfg = replace(cfg, rank=args.rank)
    if getattr(args, "no_patch_embeddings", False):
        cfg = replace(cfg, use_patch_embeddings=False)
    if getattr(args, "tau", None) is not None:
        cfg = replace(cfg, tau=args.tau)
    return cfg


def _digest(directory: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(directory.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(directory)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def write_run_info(out: Path, cohort_dir=None, **extra) -> None:
    info = {
        "celleconet": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        **extra,
    }
    if cohort_dir is not None:
        info["cohort"] = str(cohort_dir)
        info["cohort_sha256"] = _digest(Path(cohort_dir))
    (out / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def _load(cohort_dir):
    p = Path(cohort_dir)
    if not p.exists():
        raise FileNotFoundError(f"cohort path not found: {p}")
    return load_cohort(p)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    doc = read_config(args.config)
    section = {**{k: v for k, v in doc.items() if not isinstance(v, dict)}, **doc.get("synth", {})}
    cfg = SynthConfig.from_dict(section)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = write_synthetic(cfg, args.out)
    load_cohort(out)  # validate what was written
    print(f"wrote cohort with {cfg.n_patients} patients to {out}")
    return 0


def cmd_train(args) -> int:
    cohort = _load(args.cohort)
    cfg = train_config(read_config(args.config), args)
    result = run_cv(cohort, cfg, args.view, workers=args.workers)
    out = write_run(args.out, result, cohort)
    write_run_info(out, args.cohort, command="train", workers=args.workers)
    agg = result.aggregate()["test"]
    print(" ".join(f"{k}={agg[k]['mean']:.4f}+-{agg[k]['std']:.4f}" for k in agg))
    return 0


def evaluate_run(run_dir) -> dict:
    """Recompute fold and aggregate test metrics from predictions.csv alone."""
    cfg = json.loads((Path(run_dir) / "config.json").read_text())
    tau = float(cfg.get("tau", 0.5))
    by_fold = {}
    with open(Path(run_dir) / "predictions.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            by_fold.setdefault(int(r["fold"]), []).append((float(r["probability"]), int(r["label"])))
    folds = []
    for f in sorted(by_fold):
        p, y = zip(*by_fold[f])
        m = confusion_metrics(p, y, tau)
        try:
            auc = roc_auc(p, y)
        except UndefinedStatistic:
            auc = math.nan
        folds.append({"fold": f, "accuracy": m.accuracy, "sensitivity": m.sensitivity,
                      "specificity": m.specificity, "auc": auc})
    agg = {k: summarize([r[k] for r in folds]) for k in ("accuracy", "sensitivity", "specificity", "auc")}
    return {"folds": folds, "aggregate": agg}


def cmd_evaluate(args) -> int:
    print(json.dumps(json_clean(evaluate_run(args.run)), indent=2, sort_keys=True))
    return 0


def _fmt(s: dict) -> str:
    if s["mean"] is None or math.isnan(s["mean"]):
        return "nan"
    return f"{s['mean']:.4f} ± {s['std']:.4f}"


def cmd_ablate(args) -> int:
    cohort = _load(args.cohort)
    base = train_config(read_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, rank, pe in ABLATION_GRID:
        cfg = replace(base, rank=rank, use_patch_embeddings=pe)
        tag = f"{name}_{'pe' if pe else 'nope'}"
        result = run_cv(cohort, cfg, args.view, workers=args.workers)
        write_run(out / tag, result, cohort)
        agg = result.aggregate()
        fold_hash = hashlib.sha256(json.dumps(
            [[list(f.train), list(f.validation), list(f.test)] for f in result.fold_assignments]
        ).encode()).hexdigest()
        log.info("ablation %s fold hash %s", tag, fold_hash)
        rows.append({"setting": tag, "patch_embeddings": pe, "projection": name,
                     "fold_hash": fold_hash, **{f"{split[:3] if split == 'validation' else split}_{k}": v
                                                for split in ("validation", "test")
                                                for k, v in agg[split].items()}})
    metric_cols = [f"{s}_{k}" for s in ("val", "test")
                   for k in ("accuracy", "sensitivity", "specificity", "auc")]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch_embeddings", "projection"] + metric_cols)
        for r in rows:
            w.writerow([int(r["patch_embeddings"]), r["projection"]] + [_fmt(r[c]) for c in metric_cols])
    (out / "ablation.json").write_text(json.dumps(json_clean(rows), indent=2, sort_keys=True) + "\n")
    write_run_info(out, args.cohort, command="ablate", workers=args.workers)
    print((out / "ablation.csv").read_text(), end="")
    return 0


def cmd_ensemble(args) -> int:
    cohort = _load(args.cohort)
    doc = read_config(args.config)
    cfg = train_config(doc, args)
    result = run_ensemble(cohort, cfg, doc.get("overrides", {}), workers=args.workers)
    out = write_ensemble(args.out, result, cohort)
    write_run_info(out, args.cohort, command="ensemble", workers=args.workers)
    report = result.report(cohort)
    for key, row in report.items():
        print(f"{key:18s} auc={_fmt(row['auc'])} hr={row['hr']} c_index={row['c_index']}")
    return 0


def _run_predictions(run_dir: Path) -> list:
    if (run_dir / "predictions.csv").exists():
        return read_predictions(run_dir)
    combined = run_dir / "predictions_combined.csv"
    if combined.exists():
        with open(combined, newline="") as fh:
            return [Prediction(r["patient_id"], float(r["probability"]), int(r["label"]),
                               float(r["time_months"]), int(r["event"])) for r in csv.DictReader(fh)]
    raise FileNotFoundError(f"no predictions.csv or predictions_combined.csv in {run_dir}")


def survival_stats(preds: list, tau: float) -> dict:
    times = np.array([p.time_months for p in preds])
    events = np.array([p.event for p in preds])
    group = np.array([int(p.probability >= tau) for p in preds])
    out = {"tau": tau, "n_high": int(group.sum()), "n_low": int((1 - group).sum())}
    try:
        stat, p = logrank(times[group == 1], events[group == 1], times[group == 0], events[group == 0])
        out["logrank"] = {"statistic": stat, "p_value": p}
    except UndefinedStatistic as exc:
        out["logrank"] = {"undefined": str(exc)}
    try:
        fit = cox_univariable(times, events, group)
        out["cox"] = {"beta": fit.beta, "se": fit.se, "hazard_ratio": fit.hazard_ratio,
                      "ci_low": fit.ci_low, "ci_high": fit.ci_high, "p_value": fit.p_value,
                      "converged": fit.converged}
    except (UndefinedStatistic, ConvergenceError) as exc:
        out["cox"] = {"undefined": str(exc), "converged": False}
    return out


def cmd_stats(args) -> int:
    run_dir = Path(args.run)
    cohort = _load(args.cohort)
    cfg = json.loads((run_dir / "config.json").read_text())
    tau = args.tau if args.tau is not None else float(cfg.get("tau", 0.5))
    preds = _run_predictions(run_dir)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "km_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "survival", "at_risk", "events", "group"])
        for name, sel in (("high", lambda p: p.probability >= tau), ("low", lambda p: p.probability < tau)):
            members = [p for p in preds if sel(p)]
            if not members:
                continue
            km = km_estimate([p.time_months for p in members], [p.event for p in members])
            for t, s, n, d in zip(km.times, km.survival, km.at_risk, km.events):
                w.writerow([repr(float(t)), repr(float(s)), int(n), int(d), name])

    surv = survival_stats(preds, tau)
    (out / "cox.json").write_text(json.dumps(json_clean(surv), indent=2, sort_keys=True) + "\n")
    try:
        c = concordance_index([p.probability for p in preds], [p.time_months for p in preds],
                              [p.event for p in preds])
        cidx = {"c_index": c, "n": len(preds)}
    except UndefinedStatistic as exc:
        cidx = {"undefined": str(exc)}
    (out / "cindex.json").write_text(json.dumps(cidx, indent=2, sort_keys=True) + "\n")

    with open(out / "subgroup_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["subgroup", "value", "n", "accuracy", "sensitivity", "specificity", "auc"]
        w.writerow(cols)
        for key in SUBGROUP_KEYS:
            try:
                rows = subgroup_report(preds, cohort, key, tau)
            except UndefinedStatistic:
                continue
            for r in rows:
                w.writerow([r[c] for c in cols])

    with open(out / "bias_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["comparison", "group_a", "fn_a", "n_a", "fnr_a", "group_b", "fn_b", "n_b",
                    "fnr_b", "chi_square", "p_value", "note"])
        for c in bias_report(preds, cohort, tau):
            w.writerow([c.name, c.group_a, c.fn_a, c.n_a, c.fnr_a, c.group_b, c.fn_b, c.n_b,
                        c.fnr_b, c.stat, c.p_value, c.note])
    print(json.dumps(json_clean({**surv, **cidx}), sort_keys=True))
    return 0


def cmd_export_attention(args) -> int:
    run_dir = Path(args.run)
    cohort = _load(args.cohort)
    doc = json.loads((run_dir / "config.json").read_text())
    cfg = TrainConfig.from_dict(doc)
    metrics = json.loads((run_dir / "metrics.json").read_text())
    try:
        patient, slide = cohort.find_slide(args.slide_id)
    except KeyError as exc:
        raise CohortFormatError(str(exc.args[0])) from None
    fold = next((i for i, f in enumerate(metrics["fold_assignments"])
                 if patient.patient_id in f["test"]), 0)
    params = load_model(run_dir, fold, cfg, cohort.d_patch, cohort.d_cell)
    view = doc.get("view", "all")
    viewed = view_slide(slide, view)
    score = slide_forward(viewed, params)
    out = Path(args.out) if args.out else run_dir / f"attention_{args.slide_id}.csv"
    write_attention_csv(out, viewed, score)
    print(f"wrote {len(score.patch_ids)} patch weights to {out} (fold {fold}, p={score.probability:.4f})")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="celleconet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, cohort=True, out=True, config=True):
        if cohort:
            p.add_argument("--cohort", required=True, help="cohort directory or manifest.json")
        if config:
            p.add_argument("--config", help="JSON config file")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--rank", type=int, choices=(1, 2, 3))
        p.add_argument("--no-patch-embeddings", action="store_true")
        p.add_argument("--tau", type=float)
        p.add_argument("--view", default="all", help="'all' or a cell type name")

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="k-fold cross-validated training")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="recompute metrics from a run's predictions")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="projection rank x patch-embedding ablation grid")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ensemble", help="six-model cell-type ensemble")
    common(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("stats", help="KM, log-rank, Cox, C-index, subgroup and bias reports")
    p.add_argument("--run", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out")
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("export-attention", help="per-patch MIL attention for one slide")
    p.add_argument("--run", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--slide-id", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CohortFormatError, ConfigurationError, InapplicableSlide, FileNotFoundError,
            UndefinedStatistic, json.JSONDecodeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
