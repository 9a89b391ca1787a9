"""Patients, slides, patches and cells; the slide binary format and manifest.

Cells are stored column-wise per patch (types, centroids, embeddings) since
every consumer works on the whole patch at once.  Centroids are in
patch-local units: the patch occupies [0, 1) x [0, 1).
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"CEB1"
VERSION = 1
_HEADER = struct.Struct("<4sHHIII")
_PATCH_HEAD = struct.Struct("<IffI")
_CELL_HEAD = struct.Struct("<B3xff")


class CellType(enum.IntEnum):
    STROMAL = 0
    INFLAMMATORY = 1
    NEOPLASTIC = 2
    DEAD = 3
    BENIGN_EPITHELIAL = 4

    @property
    def key(self) -> str:
        return self.name.lower()


class CohortFormatError(ValueError):
    """Raised for malformed, inconsistent or missing cohort files."""


@dataclass(frozen=True)
class CellRecord:
    cell_type: CellType
    centroid: tuple
    embedding: np.ndarray


@dataclass
class PatchRecord:
    patch_id: int
    origin: tuple
    embedding: np.ndarray
    cell_types: np.ndarray = None
    centroids: np.ndarray = None
    cell_embeddings: np.ndarray = None

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        types = np.zeros(0) if self.cell_types is None else self.cell_types
        self.cell_types = np.asarray(types, dtype=np.uint8).reshape(-1)
        n = len(self.cell_types)
        cents = np.zeros((0, 2)) if self.centroids is None else self.centroids
        self.centroids = np.asarray(cents, dtype=np.float64).reshape(n, 2)
        embs = np.zeros((0, 0)) if self.cell_embeddings is None else self.cell_embeddings
        embs = np.asarray(embs, dtype=np.float64)
        self.cell_embeddings = embs if embs.ndim == 2 else embs.reshape(n, -1)

    @property
    def n_cells(self) -> int:
        return len(self.cell_types)

    @property
    def cells(self) -> list:
        return [
            CellRecord(CellType(int(t)), (float(c[0]), float(c[1])), e)
            for t, c, e in zip(self.cell_types, self.centroids, self.cell_embeddings)
        ]

    def select_cells(self, mask) -> "PatchRecord":
        mask = np.asarray(mask, dtype=bool)
        return PatchRecord(self.patch_id, self.origin, self.embedding,
                           self.cell_types[mask], self.centroids[mask],
                           self.cell_embeddings[mask])

    def __eq__(self, other):
        if not isinstance(other, PatchRecord):
            return NotImplemented
        return (self.patch_id == other.patch_id
                and tuple(self.origin) == tuple(other.origin)
                and np.array_equal(self.embedding, other.embedding)
                and np.array_equal(self.cell_types, other.cell_types)
                and np.array_equal(self.centroids, other.centroids)
                and self.n_cells == other.n_cells
                and (self.n_cells == 0 or np.array_equal(self.cell_embeddings, other.cell_embeddings)))


@dataclass
class Slide:
    slide_id: str
    patches: list

    @property
    def n_cells(self) -> int:
        return sum(p.n_cells for p in self.patches)


@dataclass
class Patient:
    patient_id: str
    label: int
    time_months: float
    event: int
    slides: list
    subgroups: dict = field(default_factory=dict)
    slide_paths: list = field(default_factory=list)


@dataclass
class Cohort:
    d_patch: int
    d_cell: int
    patients: list = field(default_factory=list)

    def patient(self, patient_id: str) -> Patient:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def find_slide(self, slide_id: str):
        for p in self.patients:
            for s in p.slides:
                if s.slide_id == slide_id:
                    return p, s
        raise KeyError(f"unknown slide id {slide_id!r}")


# ---------------------------------------------------------------- validation


def validate_slide(slide: Slide, d_patch: int, d_cell: int) -> None:
    seen = set()
    for p in slide.patches:
        where = f"slide {slide.slide_id!r} patch {p.patch_id}"
        if p.patch_id in seen:
            raise CohortFormatError(f"{where}: duplicate patch id")
        seen.add(p.patch_id)
        if p.embedding.shape != (d_patch,):
            raise CohortFormatError(
                f"{where}: patch embedding has length {p.embedding.size}, expected d_patch={d_patch}")
        if p.n_cells:
            if p.cell_embeddings.shape != (p.n_cells, d_cell):
                raise CohortFormatError(
                    f"{where}: cell embeddings have shape {p.cell_embeddings.shape}, "
                    f"expected ({p.n_cells}, {d_cell})")
            if np.any(p.cell_types > max(CellType)):
                raise CohortFormatError(f"{where}: unknown cell type code")
            c = p.centroids
            if not np.all(np.isfinite(c)) or np.any(c < 0.0) or np.any(c >= 1.0):
                raise CohortFormatError(f"{where}: cell centroid outside patch bounds [0, 1)")


def validate_patient(patient: Patient) -> None:
    if not patient.slides:
        raise CohortFormatError(f"patient {patient.patient_id!r} has no slides")
    if patient.label not in (0, 1) or patient.event not in (0, 1):
        raise CohortFormatError(f"patient {patient.patient_id!r}: label and event must be 0/1")
    if not patient.time_months >= 0:
        raise CohortFormatError(f"patient {patient.patient_id!r}: negative time")
    if patient.event == 1 and patient.time_months <= 60 and patient.label != 1:
        raise CohortFormatError(
            f"patient {patient.patient_id!r}: recurrence within 60 months but label 0")


# ---------------------------------------------------------------- binary format


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype="<f4")


def save_slide(slide: Slide, d_patch: int, d_cell: int, path) -> None:
    validate_slide(slide, d_patch, d_cell)
    chunks = [_HEADER.pack(MAGIC, VERSION, 0, d_patch, d_cell, len(slide.patches))]
    for p in slide.patches:
        chunks.append(_PATCH_HEAD.pack(p.patch_id, p.origin[0], p.origin[1], p.n_cells))
        chunks.append(_f32(p.embedding).tobytes())
        for t, c, e in zip(p.cell_types, p.centroids, p.cell_embeddings):
            chunks.append(_CELL_HEAD.pack(int(t), c[0], c[1]))
            chunks.append(_f32(e).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_slide(path, slide_id: str | None = None) -> tuple:
    """Read a slide file; returns ``(slide, d_patch, d_cell)``."""
    path = Path(path)
    if not path.exists():
        raise CohortFormatError(f"missing slide file: {path}")
    buf = path.read_bytes()
    slide_id = slide_id or path.stem
    if len(buf) < _HEADER.size:
        raise CohortFormatError(f"{path}: truncated header")
    magic, version, _flags, d_patch, d_cell, n_patches = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CohortFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CohortFormatError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    patches = []

    def need(n, what):
        if off + n > len(buf):
            raise CohortFormatError(f"{path}: truncated record ({what})")

    for _ in range(n_patches):
        need(_PATCH_HEAD.size + 4 * d_patch, "patch")
        pid, ox, oy, n_cells = _PATCH_HEAD.unpack_from(buf, off)
        off += _PATCH_HEAD.size
        emb = np.frombuffer(buf, "<f4", d_patch, off).astype(np.float64)
        off += 4 * d_patch
        types = np.zeros(n_cells, dtype=np.uint8)
        cents = np.zeros((n_cells, 2))
        cembs = np.zeros((n_cells, d_cell))
        for j in range(n_cells):
            need(_CELL_HEAD.size + 4 * d_cell, f"cell {j} of patch {pid}")
            t, cx, cy = _CELL_HEAD.unpack_from(buf, off)
            off += _CELL_HEAD.size
            types[j] = t
            cents[j] = (cx, cy)
            cembs[j] = np.frombuffer(buf, "<f4", d_cell, off)
            off += 4 * d_cell
        patches.append(PatchRecord(pid, (ox, oy), emb, types, cents, cembs))
    if off != len(buf):
        raise CohortFormatError(f"{path}: {len(buf) - off} trailing bytes")
    return Slide(slide_id, patches), d_patch, d_cell


# ---------------------------------------------------------------- manifest


def save_cohort(cohort: Cohort, directory) -> Path:
    """Write ``manifest.json`` plus one slide file per slide under ``slides/``."""
    directory = Path(directory)
    (directory / "slides").mkdir(parents=True, exist_ok=True)
    entries = []
    for p in cohort.patients:
        paths = []
        for s in p.slides:
            rel = f"slides/{s.slide_id}.ceb"
            save_slide(s, cohort.d_patch, cohort.d_cell, directory / rel)
            paths.append(rel)
        entries.append({
            "patient_id": p.patient_id,
            "label": int(p.label),
            "time_months": float(p.time_months),
            "event": int(p.event),
            "slides": paths,
            "subgroups": p.subgroups,
        })
    manifest = {"d_patch": cohort.d_patch, "d_cell": cohort.d_cell, "patients": entries}
    out = directory / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_cohort(manifest_path) -> Cohort:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise CohortFormatError(f"missing manifest: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    d_patch, d_cell = int(doc["d_patch"]), int(doc["d_cell"])
    cohort = Cohort(d_patch, d_cell)
    seen = set()
    for entry in doc.get("patients", []):
        pid = str(entry["patient_id"])
        if pid in seen:
            raise CohortFormatError(f"duplicate patient id {pid!r}")
        seen.add(pid)
        slides = []
        for rel in entry["slides"]:
            slide, dp, dc = load_slide(manifest_path.parent / rel)
            if (dp, dc) != (d_patch, d_cell):
                raise CohortFormatError(
                    f"slide {slide.slide_id!r}: dimensions (d_patch={dp}, d_cell={dc}) do not "
                    f"match manifest (d_patch={d_patch}, d_cell={d_cell})")
            validate_slide(slide, d_patch, d_cell)
            slides.append(slide)
        patient = Patient(pid, int(entry["label"]), float(entry["time_months"]),
                          int(entry["event"]), slides, dict(entry.get("subgroups", {})),
                          list(entry["slides"]))
        validate_patient(patient)
        cohort.patients.append(patient)
    return cohort


# ---------------------------------------------------------------- subsets


def subset_by_cell_type(slide: Slide, cell_type: CellType) -> Slide:
    """Patches holding at least one cell of ``cell_type``, keeping only those cells."""
    out = []
    for p in slide.patches:
        mask = p.cell_types == int(cell_type)
        if mask.any():
            out.append(p.select_cells(mask))
    return Slide(slide.slide_id, out)


def subset_all_cells(slide: Slide) -> Slide:
    return Slide(slide.slide_id, [p for p in slide.patches if p.n_cells > 0])


def view_slide(slide: Slide, view) -> Slide:
    """Apply a model view: ``"all"`` or a :class:`CellType`."""
    if view is None or view == "all":
        return subset_all_cells(slide)
    return subset_by_cell_type(slide, CellType(view) if not isinstance(view, str)
                               else CellType[view.upper()])


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class Fold:
    train: tuple
    validation: tuple
    test: tuple


def _stratified_deal(ids: list, labels: dict, k: int, rng: np.random.Generator) -> list:
    buckets = [[] for _ in range(k)]
    offset = 0
    for cls in (1, 0):
        members = [i for i in ids if labels[i] == cls]
        order = rng.permutation(len(members))
        for j, idx in enumerate(order):
            buckets[(offset + j) % k].append(members[idx])
        offset += len(members)
    return buckets


def make_folds(patients: Iterable, k: int, seed: int, val_fraction: float = 0.2) -> list:
    """Label-stratified patient-level k-fold split with a stratified validation carve-out."""
    patients = list(patients)
    labels = {p.patient_id: int(p.label) for p in patients}
    ids = sorted(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    for cls in (0, 1):
        n = sum(1 for i in ids if labels[i] == cls)
        if n < k:
            raise ValueError(f"too few patients with label {cls} for {k} folds ({n})")
    rng = np.random.default_rng(seed)
    buckets = _stratified_deal(ids, labels, k, rng)
    folds = []
    for f in range(k):
        test = sorted(buckets[f])
        rest = sorted(i for b in range(k) if b != f for i in buckets[b])
        val = []
        for cls in (1, 0):
            members = [i for i in rest if labels[i] == cls]
            n_val = max(1, int(math.floor(val_fraction * len(members) + 0.5)))
            n_val = min(n_val, len(members) - 1) if len(members) > 1 else n_val
            pick = rng.permutation(len(members))[:n_val]
            val.extend(members[j] for j in pick)
        val_set = set(val)
        train = [i for i in rest if i not in val_set]
        folds.append(Fold(tuple(train), tuple(sorted(val)), tuple(test)))
    return folds
