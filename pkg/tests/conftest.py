import numpy as np
import pytest

from celleconet.cohort import Cohort, Patient, PatchRecord, Slide


def f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def random_patch(rng, pid, d_patch, d_cell, n_cells=None, types=None):
    n = int(rng.integers(0, 6)) if n_cells is None else n_cells
    ct = rng.integers(0, 5, size=n) if types is None else np.asarray(types)
    return PatchRecord(
        pid,
        (float(f32(rng.uniform(0, 100))), float(f32(rng.uniform(0, 100)))),
        f32(rng.normal(size=d_patch)),
        ct.astype(np.uint8),
        f32(rng.uniform(0, 0.999, size=(n, 2))),
        f32(rng.normal(size=(n, d_cell))),
    )


def random_slide(rng, slide_id, d_patch, d_cell, n_patches=None, min_cells=0):
    n = int(rng.integers(1, 5)) if n_patches is None else n_patches
    patches = []
    for i in range(n):
        k = int(rng.integers(min_cells, 6))
        patches.append(random_patch(rng, i * 7 + 3, d_patch, d_cell, k))
    return Slide(slide_id, patches)


def random_cohort(rng, n_patients=6, d_patch=4, d_cell=3, min_cells=0):
    patients = []
    for i in range(n_patients):
        label = i % 2
        slides = [random_slide(rng, f"p{i:03d}_s{j}", d_patch, d_cell, min_cells=min_cells)
                  for j in range(int(rng.integers(1, 3)))]
        event = int(label or rng.random() < 0.3)
        time = float(rng.uniform(1, 60)) if label else float(rng.uniform(61, 120))
        patients.append(Patient(f"p{i:03d}", label, time, event, slides,
                                {"sex": "F" if i % 3 else "M", "age": 40 + i}))
    return Cohort(d_patch, d_cell, patients)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
