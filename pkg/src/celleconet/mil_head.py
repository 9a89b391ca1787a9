"""Gated-attention MIL pooling with rank-1/2/3 attention projections.

For rank 1 the attention logit is ``w . g``; for rank 2 and 3 it is the
norm of ``W_att^T g``, where ``g = tanh(Vg h) * sigmoid(Ug h)``.  The pooled
bag vector feeds a single affine + sigmoid classifier.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .attention_cell import CellAttentionParams, attend_cells, pack_patches
from .fusion import FusionParams, check_fusion_size, fuse, project_patch
from .numerics import Tensor


class InapplicableSlide(ValueError):
    """The slide has no patch with cells under the current view."""


@dataclass
class MilParams:
    vg: Tensor
    ug: Tensor
    w_att: Tensor
    w_clf: Tensor
    b_clf: Tensor

    @property
    def rank(self) -> int:
        return self.w_att.shape[1]


@dataclass
class ModelParams:
    cell: CellAttentionParams
    fusion: FusionParams
    mil: MilParams
    use_patch_embeddings: bool = True

    def named_tensors(self) -> dict:
        out = {}
        for prefix, group in (("cell", self.cell), ("fusion", self.fusion), ("mil", self.mil)):
            for f in fields(group):
                value = getattr(group, f.name)
                if isinstance(value, Tensor):
                    out[f"{prefix}.{f.name}"] = value
        return out

    def state_dict(self) -> dict:
        return {k: np.array(v.data) for k, v in self.named_tensors().items()}

    def load_state_dict(self, state: dict) -> None:
        for key, arr in state.items():
            prefix, name = key.split(".", 1)
            group = getattr(self, prefix)
            old = getattr(group, name)
            if old.shape != np.shape(arr):
                raise ValueError(f"{key}: shape {np.shape(arr)} != {old.shape}")
            setattr(group, name, Tensor(arr, requires_grad=True))


@dataclass
class SlideScore:
    probability: float
    logit: Tensor
    attention_weights: np.ndarray
    patch_ids: tuple
    cell_attention: list  # per patch: CLS attention row over its cells


def _xavier(rng, rows, cols):
    bound = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def init_params(d_patch: int, d_cell: int, d_model: int = 16, hidden: int = 64, rank: int = 2,
                spatial_scale: float = 1.0, use_patch_embeddings: bool = True,
                rng: np.random.Generator | None = None, allow_large: bool = False) -> ModelParams:
    if rank not in (1, 2, 3):
        raise ValueError(f"attention rank must be 1, 2 or 3, got {rank}")
    check_fusion_size(d_model, allow_large)
    rng = rng if rng is not None else np.random.default_rng(0)

    def const(shape, value):
        return Tensor(np.full(shape, float(value)), requires_grad=True)

    cell = CellAttentionParams(
        e_cls=Tensor(rng.normal(0.0, 0.02, size=d_cell), requires_grad=True),
        w_q=_xavier(rng, d_model, d_cell),
        w_k=_xavier(rng, d_model, d_cell),
        w_v=_xavier(rng, d_model, d_cell),
        ln_pre_gamma=const(d_cell, 1.0), ln_pre_beta=const(d_cell, 0.0),
        ln_post_gamma=const(d_model, 1.0), ln_post_beta=const(d_model, 0.0),
        spatial_scale=spatial_scale,
    )
    fusion = FusionParams(_xavier(rng, d_model, d_patch), _xavier(rng, d_model, d_model * d_model))
    mil = MilParams(
        vg=_xavier(rng, hidden, d_model),
        ug=_xavier(rng, hidden, d_model),
        w_att=_xavier(rng, hidden, rank),
        w_clf=const(d_model, 0.0),
        b_clf=const((), 0.0),
    )
    return ModelParams(cell, fusion, mil, use_patch_embeddings)


# ---------------------------------------------------------------- pooling


def attention_logit(h: Tensor, params: MilParams) -> Tensor:
    """Attention logit(s) for one instance (d,) or a bag (K, d)."""
    g = nx.gated_unit(h, params.vg, params.ug)
    single = g.ndim == 1
    if single:
        g = nx.reshape(g, (1, -1))
    proj = g @ params.w_att
    if params.rank == 1:
        logits = nx.reshape(proj, (proj.shape[0],))
    else:
        logits = nx.frobenius_norm(proj, axis=-1)
    return nx.reshape(logits, ()) if single else logits


def pool(instances: Tensor, params: MilParams):
    """Attention-weighted mean of a (K, d) bag; returns (pooled, weights Tensor)."""
    instances = nx.as_tensor(instances)
    if instances.ndim != 2 or instances.shape[0] == 0:
        raise ValueError("pool needs a non-empty (K, d) bag")
    logits = attention_logit(instances, params)
    alpha = nx.softmax_rows(nx.reshape(logits, (1, -1)))
    pooled = nx.reshape(alpha @ instances, (instances.shape[1],))
    return pooled, nx.reshape(alpha, (instances.shape[0],))


def classifier_logit(pooled: Tensor, params: MilParams) -> Tensor:
    return nx.dot(params.w_clf, pooled) + params.b_clf


def classify(pooled: Tensor, params: MilParams) -> float:
    return float(nx.sigmoid(classifier_logit(pooled, params)).data)


# ---------------------------------------------------------------- slide


@dataclass
class SlideInput:
    """Padded, model-ready arrays for one slide under a fixed view."""

    slide_id: str
    patch_ids: tuple
    n_cells: tuple
    patch_embeddings: np.ndarray
    cells: np.ndarray
    bias: np.ndarray


def prepare_slide(slide, spatial_scale: float = 1.0) -> SlideInput:
    patches = [p for p in slide.patches if p.n_cells > 0]
    if not patches:
        raise InapplicableSlide(f"slide {slide.slide_id!r} has no patch with cells")
    cells, bias = pack_patches(patches, spatial_scale)
    return SlideInput(
        slide.slide_id,
        tuple(p.patch_id for p in patches),
        tuple(p.n_cells for p in patches),
        np.stack([p.embedding for p in patches]),
        cells,
        bias,
    )


def slide_forward(slide, params: ModelParams) -> SlideScore:
    """Full forward pass: cell attention -> fusion -> MIL pooling -> classifier.

    ``slide`` may be a :class:`~celleconet.cohort.Slide` or a prepared
    :class:`SlideInput`.  Empty patches are skipped.
    """
    x = slide if isinstance(slide, SlideInput) else prepare_slide(slide, params.cell.spatial_scale)
    z_cls, a = attend_cells(Tensor(x.cells), x.bias, params.cell)
    if params.use_patch_embeddings:
        e_tilde = project_patch(Tensor(x.patch_embeddings), params.fusion.w_p)
        instances = fuse(e_tilde, z_cls, params.fusion.w_fusion)
    else:
        instances = z_cls
    pooled, alpha = pool(instances, params.mil)
    logit = classifier_logit(pooled, params.mil)
    prob = float(nx.sigmoid(logit).data)
    rows = [a.data[i, 0, 1: n + 1].copy() for i, n in enumerate(x.n_cells)]
    return SlideScore(prob, logit, np.array(alpha.data), x.patch_ids, rows)


def write_attention_csv(path, slide, score: SlideScore) -> None:
    """One row per scored patch: MIL weight plus its most attended cell."""
    origins = {p.patch_id: p.origin for p in slide.patches}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "patch_id", "origin_x", "origin_y", "attention_weight",
                    "top_cell_index", "top_cell_attention"])
        for pid, weight, row in zip(score.patch_ids, score.attention_weights, score.cell_attention):
            ox, oy = origins[pid]
            top = int(np.argmax(row))
            w.writerow([slide.slide_id, pid, repr(float(ox)), repr(float(oy)),
                        repr(float(weight)), top, repr(float(row[top]))])
