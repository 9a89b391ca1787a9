"""Training: weighted BCE, Adam, clinical-score early stopping, k-fold CV."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .cohort import CellType, Cohort, make_folds, view_slide
from .mil_head import InapplicableSlide, ModelParams, init_params, prepare_slide, slide_forward
from .numerics import Tensor
from .stats import Prediction, UndefinedStatistic, confusion_metrics, roc_auc

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    k_folds: int = 5
    tau: float = 0.5
    rank: int = 2
    use_patch_embeddings: bool = True
    d_model: int = 16
    hidden: int = 64
    spatial_scale: float = 1.0
    positive_class_weight: float | None = None  # None: n_negative / n_positive slides
    val_fraction: float = 0.2
    allow_large: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError("tau must lie in [0, 1]")
        if self.k_folds < 2:
            raise ConfigurationError("k_folds must be at least 2")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.rank not in (1, 2, 3):
            raise ConfigurationError("rank must be 1, 2 or 3")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ---------------------------------------------------------------- loss, score


def bce_loss(logit: Tensor, label: int, positive_class_weight: float = 1.0) -> Tensor:
    """w*y*softplus(-z) + (1-y)*softplus(z), i.e. weighted BCE on the logit."""
    logit = nx.as_tensor(logit)
    if label:
        return nx.softplus(-logit) * float(positive_class_weight)
    return nx.softplus(logit)


def clinical_score(sensitivity: float, specificity: float) -> float:
    return (sensitivity + specificity) - abs(sensitivity - specificity)


def select_best_epoch(scores) -> int:
    """1-based epoch of the first maximal score."""
    best, arg = -math.inf, 0
    for i, s in enumerate(scores):
        if s > best:
            best, arg = s, i
    return arg + 1


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        """Return updated arrays for ``params`` (name -> array)."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def optimizer_step(params: ModelParams, grads: dict, optimizer: Adam) -> None:
    state = params.state_dict()
    params.load_state_dict(optimizer.step(state, grads))


# ---------------------------------------------------------------- data


@dataclass
class PatientBags:
    patient_id: str
    label: int
    slides: list  # SlideInput


def prepare_patients(cohort: Cohort, view="all", spatial_scale: float = 1.0) -> dict:
    """Model-ready slides per patient; patients with no usable slide are absent."""
    out = {}
    for p in cohort.patients:
        inputs = []
        for s in p.slides:
            try:
                inputs.append(prepare_slide(view_slide(s, view), spatial_scale))
            except InapplicableSlide:
                continue
        if inputs:
            out[p.patient_id] = PatientBags(p.patient_id, p.label, inputs)
    return out


def predict_patients(params: ModelParams, bags) -> dict:
    """Mean slide probability per patient."""
    return {b.patient_id: float(np.mean([slide_forward(s, params).probability for s in b.slides]))
            for b in bags}


def _metrics(probs: dict, labels: dict, tau: float) -> dict:
    ids = sorted(probs)
    p = [probs[i] for i in ids]
    y = [labels[i] for i in ids]
    m = confusion_metrics(p, y, tau)
    try:
        auc = roc_auc(p, y)
    except UndefinedStatistic:
        auc = math.nan
    return {"accuracy": m.accuracy, "sensitivity": m.sensitivity,
            "specificity": m.specificity, "auc": auc, "n": len(ids)}


# ---------------------------------------------------------------- training


@dataclass
class EpochTrace:
    epoch: int
    sensitivity: float
    specificity: float
    score: float
    loss: float


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    state: dict
    trace: list
    val_metrics: dict
    test_predictions: list = field(default_factory=list)
    test_metrics: dict = field(default_factory=dict)


def train_fold(train: list, val: list, config: TrainConfig, d_patch: int, d_cell: int,
               rng: np.random.Generator) -> tuple:
    """Train on ``train`` bags, early-stop on patient-level clinical score over ``val``.

    Returns ``(best_state, trace, best_epoch, best_val_metrics)``.
    """
    if not train:
        raise ConfigurationError("empty training split")
    val_labels = {b.patient_id: b.label for b in val}
    if set(val_labels.values()) != {0, 1}:
        raise ConfigurationError("validation split must contain both classes")

    params = init_params(d_patch, d_cell, config.d_model, config.hidden, config.rank,
                         config.spatial_scale, config.use_patch_embeddings, rng,
                         config.allow_large)
    steps = [(s, b.label) for b in train for s in b.slides]
    n_pos = sum(y for _, y in steps)
    weight = config.positive_class_weight
    if weight is None:
        weight = (len(steps) - n_pos) / n_pos if n_pos else 1.0
    opt = Adam(config.learning_rate)
    names = list(params.named_tensors())

    best_score, best_epoch, best_state, best_val = -math.inf, 0, params.state_dict(), {}
    trace = []
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for idx in rng.permutation(len(steps)):
            slide, y = steps[idx]
            tensors = params.named_tensors()
            with nx.Tape() as tape:
                loss = bce_loss(slide_forward(slide, params).logit, y, weight)
            grads = dict(zip(names, tape.gradient(loss, [tensors[n] for n in names])))
            optimizer_step(params, grads, opt)
            total += loss.item()
        val_probs = predict_patients(params, val)
        vm = _metrics(val_probs, val_labels, config.tau)
        score = clinical_score(vm["sensitivity"], vm["specificity"])
        trace.append(EpochTrace(epoch, vm["sensitivity"], vm["specificity"], score,
                                total / len(steps)))
        if score > best_score:
            best_score, best_epoch, best_state, best_val = score, epoch, params.state_dict(), vm
        elif epoch - best_epoch >= config.patience:
            break
    return best_state, trace, best_epoch, best_val


def _fold_job(job):
    fold_idx, train, val, test, config, d_patch, d_cell, rng_key = job
    rng = np.random.default_rng(rng_key)
    state, trace, best_epoch, val_m = train_fold(train, val, config, d_patch, d_cell, rng)
    params = init_params(d_patch, d_cell, config.d_model, config.hidden, config.rank,
                         config.spatial_scale, config.use_patch_embeddings,
                         np.random.default_rng(0), config.allow_large)
    params.load_state_dict(state)
    probs = predict_patients(params, test)
    labels = {b.patient_id: b.label for b in test}
    result = FoldResult(fold_idx, best_epoch, state, trace, val_m)
    result.test_predictions = [(pid, probs[pid], labels[pid]) for pid in sorted(probs)]
    result.test_metrics = _metrics(probs, labels, config.tau) if probs else {}
    return result


def run_jobs(jobs: list, workers: int = 1) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [_fold_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fold_job, jobs))


METRIC_KEYS = ("accuracy", "sensitivity", "specificity", "auc")


def summarize(values: list) -> dict:
    arr = np.array([v for v in values if v is not None and not math.isnan(v)], dtype=float)
    if arr.size == 0:
        return {"mean": math.nan, "std": math.nan}
    return {"mean": float(arr.mean()), "std": float(arr.std())}


@dataclass
class CVResult:
    config: TrainConfig
    view: str
    folds: list  # FoldResult
    fold_assignments: list  # cohort.Fold

    def predictions(self, cohort: Cohort) -> list:
        out = []
        for fr in self.folds:
            for pid, prob, label in fr.test_predictions:
                pt = cohort.patient(pid)
                out.append(Prediction(pid, prob, label, pt.time_months, pt.event))
        return out

    def aggregate(self) -> dict:
        agg = {}
        for split, attr in (("validation", "val_metrics"), ("test", "test_metrics")):
            agg[split] = {k: summarize([getattr(fr, attr).get(k, math.nan) for fr in self.folds])
                          for k in METRIC_KEYS}
        return agg


def cv_jobs(cohort: Cohort, config: TrainConfig, folds: list, view="all", model_index: int = 0):
    bags = prepare_patients(cohort, view, config.spatial_scale)
    jobs = []
    for f, fold in enumerate(folds):
        def pick(ids):
            return [bags[i] for i in ids if i in bags]
        jobs.append((f, pick(fold.train), pick(fold.validation), pick(fold.test), config,
                     cohort.d_patch, cohort.d_cell, (config.seed, f, model_index)))
    return jobs


def run_cv(cohort: Cohort, config: TrainConfig, view="all", workers: int = 1) -> CVResult:
    folds = make_folds(cohort.patients, config.k_folds, config.seed, config.val_fraction)
    jobs = cv_jobs(cohort, config, folds, view)
    results = run_jobs(jobs, workers)
    name = view if isinstance(view, str) else CellType(view).key
    return CVResult(config, name, results, folds)


# ---------------------------------------------------------------- run directory


def json_clean(x):
    """NaN -> None, recursively, so reports stay strict JSON."""
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: json_clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_clean(v) for v in x]
    return x


def _num(x: float) -> str:
    return repr(float(x))


def write_predictions_csv(path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "probability", "label"])
        for pid, prob, label in rows:
            w.writerow([pid, _num(prob), int(label)])


def write_run(out_dir, result: CVResult, cohort: Cohort, extra_config: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = asdict(result.config)
    cfg["view"] = result.view
    cfg.update(extra_config or {})
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    for fr in result.folds:
        fdir = out / f"fold_{fr.fold}"
        fdir.mkdir(exist_ok=True)
        write_predictions_csv(fdir / "predictions.csv", fr.test_predictions)
        with open(fdir / "trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "sensitivity", "specificity", "score", "train_loss"])
            for t in fr.trace:
                w.writerow([t.epoch, _num(t.sensitivity), _num(t.specificity), _num(t.score),
                            _num(t.loss)])
        np.savez(fdir / "model.npz", **fr.state)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "fold", "probability", "label", "time_months", "event"])
        for fr in result.folds:
            for pid, prob, label in fr.test_predictions:
                pt = cohort.patient(pid)
                w.writerow([pid, fr.fold, _num(prob), int(label), _num(pt.time_months), pt.event])
    metrics = {
        "folds": [{"fold": fr.fold, "best_epoch": fr.best_epoch, "validation": fr.val_metrics,
                   "test": fr.test_metrics} for fr in result.folds],
        "aggregate": result.aggregate(),
        "fold_assignments": [{"train": list(f.train), "validation": list(f.validation),
                              "test": list(f.test)} for f in result.fold_assignments],
    }
    (out / "metrics.json").write_text(json.dumps(json_clean(metrics), indent=2, sort_keys=True) + "\n")
    return out


def read_predictions(run_dir) -> list:
    rows = []
    with open(Path(run_dir) / "predictions.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(Prediction(r["patient_id"], float(r["probability"]), int(r["label"]),
                                   float(r["time_months"]), int(r["event"])))
    return rows


def load_model(run_dir, fold: int, config: TrainConfig, d_patch: int, d_cell: int) -> ModelParams:
    params = init_params(d_patch, d_cell, config.d_model, config.hidden, config.rank,
                         config.spatial_scale, config.use_patch_embeddings,
                         np.random.default_rng(0), config.allow_large)
    with np.load(Path(run_dir) / f"fold_{fold}" / "model.npz") as z:
        params.load_state_dict({k: z[k] for k in z.files})
    return params
