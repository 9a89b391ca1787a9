import json
import struct
from collections import Counter

import numpy as np
import pytest
from conftest import random_cohort, random_slide

from celleconet.cohort import (CellType, Cohort, CohortFormatError, PatchRecord, Patient, Slide,
                               load_cohort, load_slide, make_folds, save_cohort, save_slide,
                               subset_all_cells, subset_by_cell_type, view_slide)

HEADER = 4 + 2 + 2 + 4 + 4 + 4
PATCH_HEAD = 4 + 4 + 4 + 4


def test_cell_type_codes_stable():
    assert [(t.key, int(t)) for t in CellType] == [
        ("stromal", 0), ("inflammatory", 1), ("neoplastic", 2), ("dead", 3), ("benign_epithelial", 4)]


def test_file_size_arithmetic(tmp_path):
    d_patch, d_cell = 5, 3
    path = tmp_path / "a.ceb"
    save_slide(Slide("a", [PatchRecord(0, (0.0, 0.0), np.ones(d_patch))]), d_patch, d_cell, path)
    assert path.stat().st_size == HEADER + PATCH_HEAD + 4 * d_patch
    two = Slide("b", [
        PatchRecord(0, (0.0, 0.0), np.ones(d_patch), [1, 2], [[0.1, 0.2], [0.3, 0.4]], np.ones((2, d_cell))),
        PatchRecord(1, (1.0, 0.0), np.ones(d_patch), [4], [[0.5, 0.5]], np.ones((1, d_cell))),
    ])
    save_slide(two, d_patch, d_cell, path)
    assert path.stat().st_size == HEADER + 2 * (PATCH_HEAD + 4 * d_patch) + 3 * (12 + 4 * d_cell)


def test_header_layout(tmp_path, rng):
    s = random_slide(rng, "h", 4, 3, n_patches=2)
    save_slide(s, 4, 3, tmp_path / "h.ceb")
    raw = (tmp_path / "h.ceb").read_bytes()
    assert struct.unpack_from("<4sHHIII", raw) == (b"CEB1", 1, 0, 4, 3, 2)


def test_round_trip_two_patches_three_cells(tmp_path, rng):
    s = Slide("rt", [
        PatchRecord(7, (10.5, 3.25), np.float32([1, 2, 3]), [0, 2], [[0.125, 0.875], [0.5, 0.25]],
                    np.float32([[1, 2], [3, 4]])),
        PatchRecord(9, (0.0, 1.0), np.float32([-1, 0, 1]), [3], [[0.0, 0.5]], np.float32([[5, 6]])),
    ])
    save_slide(s, 3, 2, tmp_path / "rt.ceb")
    back, dp, dc = load_slide(tmp_path / "rt.ceb")
    assert (dp, dc) == (3, 2)
    assert back.slide_id == "rt"
    assert back.patches == s.patches


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b"XEB1" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<H", 2) + b[6:], "version"),
    (lambda b: b[:-3], "truncat"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_files_rejected(tmp_path, rng, mutate, match):
    s = random_slide(rng, "c", 4, 3, n_patches=2, min_cells=1)
    p = tmp_path / "c.ceb"
    save_slide(s, 4, 3, p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(CohortFormatError, match=match):
        load_slide(p)


def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"d_patch": 3, "d_cell": 2, "patients": []}))
    c = load_cohort(tmp_path / "manifest.json")
    assert c.patients == [] and (c.d_patch, c.d_cell) == (3, 2)


def test_dimension_mismatch_diagnostic(tmp_path, rng):
    cohort = random_cohort(rng, 2, 4, 3)
    save_cohort(cohort, tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["d_cell"] = 5
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(CohortFormatError, match=r"slide 'p000_s0'.*d_cell"):
        load_cohort(tmp_path)


def test_missing_slide_file(tmp_path, rng):
    save_cohort(random_cohort(rng, 2), tmp_path)
    (tmp_path / "slides" / "p001_s0.ceb").unlink()
    with pytest.raises(CohortFormatError, match="p001_s0"):
        load_cohort(tmp_path)


def test_out_of_bounds_centroid(tmp_path):
    ok = Slide("oob", [PatchRecord(0, (0.0, 0.0), np.zeros(2), [1], [[0.5, 0.5]], np.zeros((1, 2)))])
    save_cohort(Cohort(2, 2, [Patient("x", 1, 10.0, 1, [ok])]), tmp_path)
    f = tmp_path / "slides" / "oob.ceb"
    raw = bytearray(f.read_bytes())
    # header, patch head, 2 f32 embedding, cell type + pad, then centroid_x
    struct.pack_into("<f", raw, HEADER + PATCH_HEAD + 8 + 4, 1.0)
    f.write_bytes(bytes(raw))
    with pytest.raises(CohortFormatError, match=r"'oob' patch 0.*bounds"):
        load_cohort(tmp_path)
    bad = Slide("oob", [PatchRecord(0, (0.0, 0.0), np.zeros(2), [1], [[0.5, -0.1]], np.zeros((1, 2)))])
    with pytest.raises(CohortFormatError):
        save_slide(bad, 2, 2, tmp_path / "x.ceb")


def test_label_event_invariant(tmp_path, rng):
    cohort = random_cohort(rng, 2)
    cohort.patients[0].label, cohort.patients[0].event, cohort.patients[0].time_months = 0, 1, 30.0
    save_cohort(cohort, tmp_path)
    with pytest.raises(CohortFormatError, match="p000"):
        load_cohort(tmp_path)


def test_cohort_round_trip_three_patients(tmp_path, rng):
    cohort = random_cohort(rng, 3)
    save_cohort(cohort, tmp_path)
    back = load_cohort(tmp_path)
    for a, b in zip(cohort.patients, back.patients):
        assert (a.patient_id, a.label, a.time_months, a.event, a.subgroups) == \
               (b.patient_id, b.label, b.time_months, b.event, b.subgroups)
        assert [s.patches for s in a.slides] == [s.patches for s in b.slides]
    save_cohort(back, tmp_path / "again")
    for f in (tmp_path / "slides").iterdir():
        assert f.read_bytes() == (tmp_path / "again" / "slides" / f.name).read_bytes()


# ---------------------------------------------------------------- subsets


def _cells(slide):
    return Counter((p.patch_id, int(t), tuple(c), e.tobytes())
                   for p in slide.patches for t, c, e in zip(p.cell_types, p.centroids, p.cell_embeddings))


def test_subset_trivial_cases(rng):
    s = Slide("s", [PatchRecord(0, (0, 0), np.zeros(2), [1, 1], [[0.1, 0.1], [0.2, 0.2]], np.ones((2, 2)))])
    assert subset_by_cell_type(s, CellType.DEAD).patches == []
    assert subset_by_cell_type(s, CellType.INFLAMMATORY).patches == s.patches
    three = Slide("t", s.patches + [PatchRecord(1, (1, 0), np.zeros(2)),
                                    PatchRecord(2, (2, 0), np.zeros(2), [0], [[0.5, 0.5]], np.ones((1, 2)))])
    assert [p.patch_id for p in subset_all_cells(three).patches] == [0, 2]


def test_subset_scan_oracles(rng):
    for trial in range(50):
        s = random_slide(rng, f"r{trial}", 3, 2, n_patches=int(rng.integers(1, 8)))
        assert len(subset_all_cells(s).patches) == sum(1 for p in s.patches if len(p.cell_types) > 0)
        union = Counter()
        for t in CellType:
            sub = subset_by_cell_type(s, t)
            assert len(sub.patches) == sum(1 for p in s.patches if any(int(c) == t for c in p.cell_types))
            for p in sub.patches:
                assert np.all(p.cell_types == t)
                orig = next(q for q in s.patches if q.patch_id == p.patch_id)
                assert np.array_equal(p.embedding, orig.embedding)
            union += _cells(sub)
        assert union == _cells(s)


def test_view_slide_names():
    s = Slide("v", [PatchRecord(0, (0, 0), np.zeros(2), [2, 0], [[0.1, 0.1], [0.2, 0.2]], np.ones((2, 2)))])
    assert view_slide(s, "neoplastic").patches == view_slide(s, CellType.NEOPLASTIC).patches
    assert view_slide(s, "all").patches == s.patches


# ---------------------------------------------------------------- folds


def _patients(n_pos, n_neg):
    return [Patient(f"q{i:03d}", int(i < n_pos), 10.0 if i < n_pos else 80.0, 0, [None])
            for i in range(n_pos + n_neg)]


def test_folds_forced_stratification():
    folds = make_folds(_patients(5, 5), 5, seed=0)
    labels = {p.patient_id: p.label for p in _patients(5, 5)}
    for f in folds:
        assert sorted(labels[i] for i in f.test) == [0, 1]


@pytest.mark.parametrize("n_pos, n_neg, k", [(5, 5, 5), (23, 37, 5), (12, 30, 3), (9, 9, 2)])
def test_fold_algebra(n_pos, n_neg, k):
    pts = _patients(n_pos, n_neg)
    labels = {p.patient_id: p.label for p in pts}
    folds = make_folds(pts, k, seed=3)
    assert folds == make_folds(pts, k, seed=3)
    tests = [set(f.test) for f in folds]
    assert set().union(*tests) == set(labels)
    assert sum(len(t) for t in tests) == len(labels)
    ratio = n_pos / (n_pos + n_neg)
    for f in folds:
        tr, va, te = set(f.train), set(f.validation), set(f.test)
        assert not (tr & va) and not (tr & te) and not (va & te)
        assert tr | va | te == set(labels)
        assert abs(sum(labels[i] for i in te) - ratio * len(te)) <= 1
        assert {labels[i] for i in va} == {0, 1}
        rest_pos = sum(labels[i] for i in tr | va)
        assert abs(sum(labels[i] for i in va) - 0.2 * rest_pos) <= 1


def test_fold_errors_and_seed_dependence():
    with pytest.raises(ValueError, match="too few"):
        make_folds(_patients(3, 10), 5, 0)
    with pytest.raises(ValueError):
        make_folds(_patients(5, 5), 1, 0)
    pts = _patients(20, 20)
    assert make_folds(pts, 5, 0) != make_folds(pts, 5, 1)
