"""Spatially biased single-head self-attention over the cells of a patch.

The sequence is ``[e_cls, LN(c_1), ..., LN(c_n)]``.  Attention logits are
``QK^T / sqrt(d_model)`` minus ``spatial_scale`` times the centroid distance
between cells; the CLS position carries no centroid and gets zero bias.  The
patch summary is the layer-normalized first row of ``A V``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

# additive logit for padded key slots; exp() of it underflows to exactly 0
PAD_LOGIT = -1e30


@dataclass
class CellAttentionParams:
    e_cls: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    ln_pre_gamma: Tensor
    ln_pre_beta: Tensor
    ln_post_gamma: Tensor
    ln_post_beta: Tensor
    spatial_scale: float = 1.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.spatial_scale < 0:
            raise ValueError("spatial_scale must be non-negative")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_cell(self) -> int:
        return self.w_q.shape[1]


@dataclass
class PatchSummary:
    z_cls: Tensor
    attention_row: np.ndarray
    attention: np.ndarray


def spatial_bias(centroids, spatial_scale: float = 1.0) -> np.ndarray:
    """(n+1)x(n+1) additive bias; row/column 0 is the CLS slot."""
    c = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    n = len(c)
    bias = np.zeros((n + 1, n + 1))
    if n:
        diff = c[:, None, :] - c[None, :, :]
        bias[1:, 1:] = -spatial_scale * np.sqrt(np.sum(diff * diff, axis=-1))
    return bias


def pack_patches(patches, spatial_scale: float):
    """Pad the cells of several patches to a common length.

    Returns ``(cells, bias)`` with shapes (P, n_max, d_cell) and
    (P, n_max + 1, n_max + 1); padded keys receive ``PAD_LOGIT``.
    """
    n_max = max(p.n_cells for p in patches)
    d_cell = next(p.cell_embeddings.shape[1] for p in patches if p.n_cells)
    cells = np.zeros((len(patches), n_max, d_cell))
    bias = np.zeros((len(patches), n_max + 1, n_max + 1))
    for i, p in enumerate(patches):
        n = p.n_cells
        cells[i, :n] = p.cell_embeddings
        bias[i, : n + 1, : n + 1] = spatial_bias(p.centroids, spatial_scale)
        bias[i, :, n + 1:] = PAD_LOGIT
    return cells, bias


def attend_cells(cells: Tensor, bias: np.ndarray, params: CellAttentionParams):
    """Batched forward over P patches; returns ``(z_cls (P, d_model), A (P, n+1, n+1))``."""
    p, n, d_cell = cells.shape
    x_cells = nx.layer_norm(cells, params.ln_pre_gamma, params.ln_pre_beta, params.ln_eps)
    cls = nx.broadcast_to(nx.reshape(params.e_cls, (1, 1, d_cell)), (p, 1, d_cell))
    x = nx.concat([cls, x_cells], axis=1)
    q = x @ params.w_q.T
    k = x @ params.w_k.T
    v = x @ params.w_v.T
    a_raw = (q @ k.T) * (1.0 / math.sqrt(params.d_model))
    a = nx.softmax_rows(a_raw + Tensor(bias))
    z = a @ v
    z_cls = nx.layer_norm(z[:, 0, :], params.ln_post_gamma, params.ln_post_beta, params.ln_eps)
    return z_cls, a


def attend_patch(patch, params: CellAttentionParams) -> PatchSummary:
    """Summarize one non-empty patch."""
    if patch.n_cells == 0:
        raise ValueError(f"patch {patch.patch_id} has no cells")
    cells, bias = pack_patches([patch], params.spatial_scale)
    z_cls, a = attend_cells(Tensor(cells), bias, params)
    return PatchSummary(nx.reshape(z_cls, (params.d_model,)), a.data[0, 0].copy(), a.data[0].copy())
