"""Seeded synthetic cohorts with planted, recoverable signals.

Signal kinds:

* ``cell_shift`` - positive patients' cells of one type are shifted along a
  fixed direction.
* ``spatial_pattern`` - in positive patients, cells of two types sit within
  radius ``rho`` of each other in a share of the patches; negatives are
  dispersed.
* ``patch_cell_interaction`` - each patch gets a random sign s along a patch
  direction; its cells get ``s`` (positives) or ``-s`` (negatives) along a
  cell direction.  Neither scale alone carries the label.
* ``multi_celltype`` - every cell type carries its own weak shift
  ``strength * (label + noise * z)`` with z drawn per patient and type.

Embedding values are rounded to float32 so cohorts round-trip through the
slide format exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cohort import CellType, Cohort, PatchRecord, Patient, Slide, save_cohort

SIGNAL_KINDS = ("cell_shift", "spatial_pattern", "patch_cell_interaction", "multi_celltype")
FOLLOW_UP_MONTHS = 120.0


@dataclass
class SynthConfig:
    n_patients: int = 60
    slides_per_patient: tuple = (1, 3)
    patches_per_slide: tuple = (4, 10)
    cells_per_patch: tuple = (0, 8)
    positive_fraction: float = 0.381
    d_patch: int = 16
    d_cell: int = 16
    signal_kind: str = "cell_shift"
    signal_strength: float = 2.0
    signal_cell_type: str = "neoplastic"
    signal_noise: float = 1.0
    spatial_types: tuple = ("inflammatory", "neoplastic")
    spatial_radius: float = 0.05
    cell_type_weights: tuple = (0.25, 0.2, 0.3, 0.1, 0.15)
    type_offset_scale: float = 1.0
    patch_mean_scale: float = 4.0
    patch_noise: float = 0.5
    cell_noise: float = 1.0
    base_hazard: float = 0.01
    hazard_ratio: float = 4.0
    censoring_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.signal_kind not in SIGNAL_KINDS:
            raise ValueError(f"signal_kind must be one of {SIGNAL_KINDS}")
        for name in ("positive_fraction", "censoring_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.d_patch < 2 or self.d_cell < 2:
            raise ValueError("embedding dimensions must be at least 2")
        if self.n_patients < 1 or self.patches_per_slide[1] < 1 or self.slides_per_patient[0] < 1:
            raise ValueError("infeasible cohort shape (no patients, slides or patches)")
        if self.patches_per_slide[0] > self.patches_per_slide[1]:
            raise ValueError("patches_per_slide range is empty")
        if self.cells_per_patch[1] < 1:
            raise ValueError("cells_per_patch must allow at least one cell")
        self.slides_per_patient = tuple(self.slides_per_patient)
        self.patches_per_slide = tuple(self.patches_per_slide)
        self.cells_per_patch = tuple(self.cells_per_patch)
        self.spatial_types = tuple(self.spatial_types)
        self.cell_type_weights = tuple(self.cell_type_weights)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class Truth:
    signal_kind: str
    strength: float
    directions: dict = field(default_factory=dict)
    cell_types: list = field(default_factory=list)
    radius: float | None = None
    signal_patches: dict = field(default_factory=dict)  # slide_id -> patch ids

    def to_json(self) -> dict:
        d = asdict(self)
        d["directions"] = {k: [float(x) for x in v] for k, v in self.directions.items()}
        return d


def _event_time(rng, label: int, cfg: SynthConfig) -> tuple:
    """Recurrence before 60 months iff label is 1; exponential hazards otherwise."""
    lam = cfg.base_hazard * (cfg.hazard_ratio if label else 1.0)
    if label:
        # inverse CDF of Exp(lam) truncated to (0, 60]
        u = rng.uniform()
        t_rec = -np.log1p(-u * (1.0 - np.exp(-lam * 60.0))) / lam
    else:
        t_rec = 60.0 + rng.exponential(1.0 / lam)
    cens = rng.uniform(0.5, FOLLOW_UP_MONTHS) if rng.uniform() < cfg.censoring_rate else FOLLOW_UP_MONTHS
    time = min(t_rec, cens)
    event = int(t_rec <= cens)
    return round(float(max(time, 0.1)), 3), event


def _subgroups(rng, label: int, time: float, event: int) -> dict:
    sg = {
        "sex": str(rng.choice(["female", "male"])),
        "race": str(rng.choice(["White", "African American", "Asian"], p=[0.7, 0.25, 0.05])),
        "age": int(np.clip(round(rng.normal(65, 9)), 35, 90)),
        "stage": str(rng.choice(["I", "II", "III"], p=[0.6, 0.25, 0.15])),
        "grade_old": str(rng.choice(["G1", "G2", "G3"])),
        "grade_new": str(rng.choice(["G1", "G2", "G3"], p=[0.2, 0.4, 0.4] if label else [0.4, 0.4, 0.2])),
    }
    if event and rng.uniform() < 0.3:
        sg["death_months"] = round(float(time + rng.uniform(1.0, 40.0)), 3)
    return sg


def _place_dispersed(rng, n, min_dist):
    pts = []
    for _ in range(n):
        for _attempt in range(50):
            c = rng.uniform(0.0, 1.0, size=2)
            if all(np.hypot(*(c - q)) >= min_dist for q in pts):
                break
        pts.append(c)
    return np.array(pts).reshape(n, 2)


def generate(cfg: SynthConfig) -> tuple:
    """Build ``(cohort, truth)`` deterministically from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    d_p, d_c = cfg.d_patch, cfg.d_cell
    type_means = rng.normal(size=(5, d_c)) * cfg.type_offset_scale / np.sqrt(d_c) * 2.0
    patch_mean = _unit(rng, d_p) * cfg.patch_mean_scale
    s = cfg.signal_strength
    truth = Truth(cfg.signal_kind, s)

    signal_type = int(CellType[cfg.signal_cell_type.upper()])
    shift_dir = _unit(rng, d_c)
    type_dirs = np.stack([_unit(rng, d_c) for _ in range(5)])
    patch_dir = _unit(rng, d_p)
    cell_dir = _unit(rng, d_c)
    pair = tuple(int(CellType[t.upper()]) for t in cfg.spatial_types)
    if cfg.signal_kind == "cell_shift":
        truth.directions["cell_offset"] = shift_dir * s
        truth.cell_types = [CellType(signal_type).key]
    elif cfg.signal_kind == "multi_celltype":
        truth.directions = {CellType(t).key: type_dirs[t] * s for t in range(5)}
        truth.cell_types = [CellType(t).key for t in range(5)]
    elif cfg.signal_kind == "patch_cell_interaction":
        truth.directions = {"patch": patch_dir * s, "cell": cell_dir * s}
    else:
        truth.cell_types = [CellType(t).key for t in pair]
        truth.radius = cfg.spatial_radius

    n_pos = int(round(cfg.positive_fraction * cfg.n_patients))
    labels = np.array([1] * n_pos + [0] * (cfg.n_patients - n_pos))
    labels = labels[rng.permutation(cfg.n_patients)]
    weights = np.asarray(cfg.cell_type_weights, dtype=float)
    weights = weights / weights.sum()

    patients = []
    for i, y in enumerate(labels):
        y = int(y)
        time, event = _event_time(rng, y, cfg)
        type_gain = s * (y + cfg.signal_noise * rng.normal(size=5))
        slides = []
        n_slides = int(rng.integers(cfg.slides_per_patient[0], cfg.slides_per_patient[1] + 1))
        for j in range(n_slides):
            sid = f"P{i:03d}_S{j}"
            patches = []
            planted = []
            n_patches = int(rng.integers(cfg.patches_per_slide[0], cfg.patches_per_slide[1] + 1))
            for k in range(n_patches):
                n_cells = int(rng.integers(cfg.cells_per_patch[0], cfg.cells_per_patch[1] + 1))
                types = rng.choice(5, size=n_cells, p=weights)
                cents = rng.uniform(0.0, 1.0, size=(n_cells, 2))
                cells = type_means[types] + cfg.cell_noise * rng.normal(size=(n_cells, d_c))
                emb = patch_mean + cfg.patch_noise * rng.normal(size=d_p)
                hit = False
                kind = cfg.signal_kind
                if kind == "cell_shift" and y and s:
                    m = types == signal_type
                    cells[m] += shift_dir * s
                    hit = bool(m.any())
                elif kind == "multi_celltype" and s:
                    cells += type_gain[types][:, None] * type_dirs[types]
                    hit = bool(y and n_cells)
                elif kind == "patch_cell_interaction" and s:
                    sign = rng.choice([-1.0, 1.0])
                    emb += s * sign * patch_dir
                    cells += s * (sign if y else -sign) * cell_dir
                    hit = bool(y and n_cells)
                elif kind == "spatial_pattern":
                    has_pair = np.isin(pair, types).all()
                    if has_pair and y and rng.uniform() < min(1.0, s / 2.0):
                        a = np.flatnonzero(types == pair[0])
                        b = np.flatnonzero(types == pair[1])
                        anchor = rng.uniform(0.2, 0.8, size=2)
                        for idx in np.concatenate([a, b]):
                            ang = rng.uniform(0, 2 * np.pi)
                            r = rng.uniform(0, cfg.spatial_radius)
                            cents[idx] = anchor + r * np.array([np.cos(ang), np.sin(ang)])
                        hit = True
                    elif has_pair and s:
                        cents = _place_dispersed(rng, n_cells, min(0.3, 4 * cfg.spatial_radius))
                cents = np.clip(_f32(cents), 0.0, np.nextafter(np.float32(1.0), np.float32(0.0)))
                if hit:
                    planted.append(k)
                patches.append(PatchRecord(k, (float(k % 8), float(k // 8)), _f32(emb),
                                           types.astype(np.uint8), cents, _f32(cells)))
            if planted:
                truth.signal_patches[sid] = planted
            slides.append(Slide(sid, patches))
        patients.append(Patient(f"P{i:03d}", y, time, event, slides, _subgroups(rng, y, time, event)))
    return Cohort(d_p, d_c, patients), truth


def generate_cohort(cfg: SynthConfig) -> Cohort:
    return generate(cfg)[0]


def planted_truth(cfg: SynthConfig) -> dict:
    return generate(cfg)[1].to_json()


def write_synthetic(cfg: SynthConfig, out_dir) -> Path:
    """Write manifest, slides, truth.json and the resolved synth config."""
    cohort, truth = generate(cfg)
    out = Path(out_dir)
    save_cohort(cohort, out)
    (out / "truth.json").write_text(json.dumps(truth.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return out
