"""Six-model cell-type ensemble with patient-level probability averaging.

Each patient's per-model probability is the mean over that model's usable
slides; the combined probability is the mean over the models applicable to
the patient, thresholded at tau.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cohort import CellType, Cohort, make_folds
from .stats import UndefinedStatistic, concordance_index, confusion_metrics, cox_univariable, roc_auc
from .trainer import (METRIC_KEYS, ConfigurationError, TrainConfig, _fold_job, cv_jobs, json_clean,
                      summarize)

log = logging.getLogger(__name__)

MODEL_KEYS = tuple(t.key for t in CellType) + ("all",)


class UnpredictablePatient(ValueError):
    """No model is applicable to the patient."""


def patient_probability(slide_probs) -> float | None:
    """Mean slide probability; None marks an inapplicable model."""
    probs = list(slide_probs)
    if not probs:
        return None
    return float(np.mean(probs))


@dataclass
class PatientPrediction:
    patient_id: str
    per_model: dict
    combined: float
    decision: int


def combine_models(patient_id: str, per_model: dict, tau: float = 0.5) -> PatientPrediction:
    present = {k: v for k, v in per_model.items() if v is not None}
    if not present:
        raise UnpredictablePatient(f"patient {patient_id!r}: no applicable model")
    combined = float(np.mean([present[k] for k in sorted(present)]))
    return PatientPrediction(patient_id, present, combined, int(combined >= tau))


def _view_for(key: str):
    return "all" if key == "all" else CellType[key.upper()]


@dataclass
class EnsembleResult:
    config: TrainConfig
    predictions: list  # PatientPrediction, all folds pooled
    fold_of: dict  # patient_id -> fold
    fold_metrics: dict  # model key or "combined" -> list of per-fold metric dicts
    inapplicable: list = field(default_factory=list)  # (fold, model) pairs

    def report(self, cohort: Cohort) -> dict:
        rows = {}
        for key in MODEL_KEYS + ("combined",):
            per_fold = self.fold_metrics.get(key, [])
            row = {k: summarize([m.get(k, math.nan) for m in per_fold]) for k in METRIC_KEYS}
            row.update(self.survival_row(cohort, key))
            rows[key] = row
        return rows

    def model_scores(self, key: str) -> dict:
        if key == "combined":
            return {p.patient_id: p.combined for p in self.predictions}
        return {p.patient_id: p.per_model[key] for p in self.predictions if key in p.per_model}

    def survival_row(self, cohort: Cohort, key: str) -> dict:
        """HR of predicted high- vs low-risk and C-index on pooled test predictions."""
        scores = self.model_scores(key)
        out = {"hr": None, "hr_ci": None, "hr_p": None, "c_index": None, "note": ""}
        if not scores:
            out["note"] = "no predictions"
            return out
        ids = sorted(scores)
        t = [cohort.patient(i).time_months for i in ids]
        e = [cohort.patient(i).event for i in ids]
        s = [scores[i] for i in ids]
        try:
            out["c_index"] = concordance_index(s, t, e)
        except UndefinedStatistic as exc:
            out["note"] += f"c-index: {exc}; "
        group = [int(v >= self.config.tau) for v in s]
        try:
            fit = cox_univariable(t, e, group)
            out.update(hr=fit.hazard_ratio, hr_ci=[fit.ci_low, fit.ci_high], hr_p=fit.p_value)
        except (UndefinedStatistic, ArithmeticError) as exc:
            out["note"] += f"cox: {exc}; "
        return out


def _metrics(scores: dict, labels: dict, tau: float) -> dict:
    ids = sorted(scores)
    p = [scores[i] for i in ids]
    y = [labels[i] for i in ids]
    m = confusion_metrics(p, y, tau)
    try:
        auc = roc_auc(p, y)
    except UndefinedStatistic:
        auc = math.nan
    return {"accuracy": m.accuracy, "sensitivity": m.sensitivity, "specificity": m.specificity,
            "auc": auc, "n": len(ids)}


def run_ensemble(cohort: Cohort, config: TrainConfig, overrides: dict | None = None,
                 workers: int = 1) -> EnsembleResult:
    """Train the six view models per fold and aggregate on each fold's test patients."""
    overrides = overrides or {}
    folds = make_folds(cohort.patients, config.k_folds, config.seed, config.val_fraction)
    labels = {p.patient_id: p.label for p in cohort.patients}

    jobs, owners = [], []
    for m_idx, key in enumerate(MODEL_KEYS):
        cfg = TrainConfig(**{**asdict(config), **overrides.get(key, {})})
        for job in cv_jobs(cohort, cfg, folds, _view_for(key), model_index=m_idx):
            jobs.append(job)
            owners.append(key)

    results = _run_tolerant(jobs, workers)
    per_fold_model = {}  # (fold, key) -> {pid: prob}
    inapplicable = []
    for key, job, res in zip(owners, jobs, results):
        fold = job[0]
        if isinstance(res, Exception):
            log.warning("model %s inapplicable in fold %d: %s", key, fold, res)
            inapplicable.append((fold, key))
            continue
        per_fold_model[(fold, key)] = {pid: prob for pid, prob, _ in res.test_predictions}

    predictions, fold_of = [], {}
    fold_metrics = {k: [] for k in MODEL_KEYS + ("combined",)}
    for f, fold in enumerate(folds):
        combined = {}
        for pid in fold.test:
            per_model = {k: per_fold_model.get((f, k), {}).get(pid) for k in MODEL_KEYS}
            try:
                pp = combine_models(pid, per_model, config.tau)
            except UnpredictablePatient as exc:
                log.warning("%s", exc)
                continue
            predictions.append(pp)
            fold_of[pid] = f
            combined[pid] = pp.combined
        for k in MODEL_KEYS:
            scores = per_fold_model.get((f, k))
            if scores:
                fold_metrics[k].append(_metrics(scores, labels, config.tau))
        if combined:
            fold_metrics["combined"].append(_metrics(combined, labels, config.tau))
    return EnsembleResult(config, predictions, fold_of, fold_metrics, inapplicable)


def _safe_job(job):
    try:
        return _fold_job(job)
    except ConfigurationError as exc:
        return exc


def _run_tolerant(jobs, workers):
    if workers <= 1:
        return [_safe_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_safe_job, jobs))


def write_ensemble(out_dir, result: EnsembleResult, cohort: Cohort) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(result.config), indent=2, sort_keys=True) + "\n")
    report = {"models": result.report(cohort),
              "inapplicable": [{"fold": f, "model": k} for f, k in result.inapplicable]}
    (out / "ensemble_report.json").write_text(
        json.dumps(json_clean(report), indent=2, sort_keys=True) + "\n")
    with open(out / "predictions_combined.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "fold", "probability", "decision", "label", "time_months", "event"]
                   + [f"p_{k}" for k in MODEL_KEYS])
        for p in sorted(result.predictions, key=lambda p: p.patient_id):
            pt = cohort.patient(p.patient_id)
            w.writerow([p.patient_id, result.fold_of[p.patient_id], repr(p.combined), p.decision,
                        pt.label, repr(float(pt.time_months)), pt.event]
                       + ["" if k not in p.per_model else repr(p.per_model[k]) for k in MODEL_KEYS])
    return out
