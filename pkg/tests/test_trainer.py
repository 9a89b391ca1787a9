import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from conftest import random_cohort

from celleconet import numerics as nx
from celleconet.cohort import make_folds
from celleconet.mil_head import init_params, slide_forward
from celleconet.numerics import Tape, Tensor
from celleconet.synthgen import SynthConfig, generate_cohort
from celleconet.trainer import (Adam, ConfigurationError, TrainConfig, bce_loss, clinical_score,
                                json_clean, optimizer_step, prepare_patients, run_cv,
                                select_best_epoch, summarize, train_fold)


def decimal_bce(z, y, w):
    getcontext().prec = 50
    z = Decimal(repr(z))
    sig = 1 / (1 + (-z).exp())
    return float(-(Decimal(w) * y * sig.ln() + (1 - y) * (1 - sig).ln()))


def test_bce_examples(rng):
    assert abs(bce_loss(Tensor(0.0), 1, 1.0).item() - math.log(2)) < 1e-15
    assert bce_loss(Tensor(30.0), 1).item() < 1e-9
    for _ in range(200):
        z, y, w = float(rng.normal(scale=8)), int(rng.integers(0, 2)), float(rng.uniform(0.5, 3))
        ref = decimal_bce(z, y, w)
        assert abs(bce_loss(Tensor(z), y, w).item() - ref) <= 1e-12 * max(1.0, ref)


def test_bce_gradient_at_extremes():
    for z in (-1000.0, -30.0, 0.0, 30.0, 1000.0):
        for y in (0, 1):
            x = Tensor(z, requires_grad=True)
            with Tape() as tape:
                loss = bce_loss(x, y, 2.0)
            (g,) = tape.gradient(loss, [x])
            assert np.isfinite(loss.item()) and np.isfinite(g)
            sig = 1 / (1 + math.exp(-z)) if z > -700 else 0.0
            assert abs(float(g) - (2.0 * (sig - 1) if y else sig)) < 1e-12


def test_clinical_score_examples():
    assert clinical_score(0.6, 0.6) == pytest.approx(1.2, abs=1e-15)
    assert clinical_score(1.0, 0.0) == 0.0
    assert round(clinical_score(0.6581, 0.7547), 4) == 1.3162


def test_clinical_score_grid():
    g = np.linspace(0, 1, 101)
    worst = max(abs(clinical_score(s, p) - 2 * min(s, p)) for s in g for p in g)
    assert worst <= 1e-12


def test_select_best_epoch():
    assert select_best_epoch([0.4, 1.1, 0.9, 1.1]) == 2
    assert select_best_epoch([0.0, 0.0]) == 1
    rng = np.random.default_rng(0)
    for _ in range(500):
        tr = list(rng.integers(0, 5, int(rng.integers(1, 15))) / 2)
        k = select_best_epoch(tr)
        assert tr[k - 1] == max(tr) and all(v < max(tr) for v in tr[:k - 1])


def test_adam_closed_form():
    opt = Adam(0.1)
    out = opt.step({"x": np.array(0.0)}, {"x": np.array(1.0)})
    assert abs(out["x"] + 0.1) < 1e-8
    opt = Adam(0.1)
    assert opt.step({"x": np.array(3.0)}, {"x": np.array(0.0)})["x"] == 3.0


def test_adam_quadratic_bowl():
    opt = Adam(0.01)
    x = {"x": np.array(1.0)}
    for _ in range(500):
        x = opt.step(x, {"x": 2 * x["x"]})
    assert abs(x["x"]) < 1e-3


def test_config_validation():
    for bad in ({"tau": 1.5}, {"k_folds": 1}, {"rank": 5}, {"learning_rate": -1}):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad)
    assert TrainConfig.from_dict({"epochs": 3, "unknown": 1}).epochs == 3


def test_summarize_and_clean():
    s = summarize([0.5, 0.7, math.nan])
    assert s["mean"] == pytest.approx(0.6) and s["std"] == pytest.approx(0.1)
    assert math.isnan(summarize([math.nan])["mean"])
    assert json_clean({"a": [math.nan, 1.0], "b": {"c": math.nan}}) == {"a": [None, 1.0], "b": {"c": None}}


def test_single_step_decreases_loss():
    cohort = random_cohort(np.random.default_rng(1), 2, 4, 3, min_cells=1)
    (bag,) = [b for b in prepare_patients(cohort).values() if b.label == 1][:1]
    slide = bag.slides[0]
    for seed in range(20):
        prm = init_params(4, 3, d_model=4, hidden=8, rng=np.random.default_rng(seed))
        names = list(prm.named_tensors())
        tensors = prm.named_tensors()
        with Tape() as tape:
            loss = bce_loss(slide_forward(slide, prm).logit, 1)
        grads = dict(zip(names, tape.gradient(loss, [tensors[n] for n in names])))
        optimizer_step(prm, grads, Adam(1e-4))
        assert bce_loss(slide_forward(slide, prm).logit, 1).item() < loss.item()


def _fold_bags(cohort, seed=0):
    bags = prepare_patients(cohort)
    f = make_folds(cohort.patients, 5, seed)[0]
    return ([bags[i] for i in f.train if i in bags], [bags[i] for i in f.validation if i in bags])


def test_zero_lr_leaves_params_unchanged():
    cohort = generate_cohort(SynthConfig(n_patients=20, d_patch=4, d_cell=4, seed=3))
    train, val = _fold_bags(cohort)
    cfg = TrainConfig(learning_rate=0.0, epochs=4, patience=10, d_model=4, hidden=8)
    state, trace, best, _ = train_fold(train, val, cfg, 4, 4, np.random.default_rng(5))
    init = init_params(4, 4, 4, 8, rng=np.random.default_rng(5)).state_dict()
    assert all(np.array_equal(state[k], init[k]) for k in init)
    assert len({(t.sensitivity, t.specificity, t.score) for t in trace}) == 1
    assert best == 1


def test_trace_score_identity_and_patience():
    cohort = generate_cohort(SynthConfig(n_patients=20, d_patch=4, d_cell=4, seed=4))
    train, val = _fold_bags(cohort)
    cfg = TrainConfig(learning_rate=1e-2, epochs=30, patience=3, d_model=4, hidden=8)
    _, trace, best, _ = train_fold(train, val, cfg, 4, 4, np.random.default_rng(0))
    for t in trace:
        assert t.score == (t.sensitivity + t.specificity) - abs(t.sensitivity - t.specificity)
    scores = [t.score for t in trace]
    assert best == select_best_epoch(scores)
    if len(trace) < 30:
        assert len(trace) - best == 3


def test_validation_needs_both_classes():
    cohort = generate_cohort(SynthConfig(n_patients=20, d_patch=4, d_cell=4, seed=4))
    train, val = _fold_bags(cohort)
    with pytest.raises(ConfigurationError):
        train_fold(train, [b for b in val if b.label == 1], TrainConfig(epochs=1), 4, 4,
                   np.random.default_rng(0))


def test_planted_signal_fold_reaches_score():
    cohort = generate_cohort(SynthConfig(seed=0))
    train, val = _fold_bags(cohort)
    cfg = TrainConfig(epochs=50, patience=50)
    _, trace, _, _ = train_fold(train, val, cfg, 16, 16, np.random.default_rng(0))
    assert max(t.score for t in trace) >= 1.2


def test_run_cv_small_cohort_algebra_and_determinism():
    cohort = generate_cohort(SynthConfig(n_patients=10, positive_fraction=0.5, d_patch=4, d_cell=4,
                                         cells_per_patch=(1, 4), seed=1))
    cfg = TrainConfig(epochs=2, patience=2, d_model=4, hidden=8, val_fraction=0.2)
    a = run_cv(cohort, cfg)
    ids = [pid for fr in a.folds for pid, _, _ in fr.test_predictions]
    assert sorted(ids) == sorted(p.patient_id for p in cohort.patients)
    assert len(a.folds) == 5
    b = run_cv(cohort, cfg)
    assert a.aggregate() == b.aggregate() or json_clean(a.aggregate()) == json_clean(b.aggregate())
    assert [fr.test_predictions for fr in a.folds] == [fr.test_predictions for fr in b.folds]
