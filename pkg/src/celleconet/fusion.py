"""Patch/cell fusion: f_p = W_fusion . vec(W_p e_p (x) z_cls).

``vec`` flattens row-major, so entry ``i * d_model + j`` of the flattened
outer product is ``e_tilde[i] * z_cls[j]``.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import numerics as nx
from .numerics import Tensor

# d_model**3 fusion weights above this need allow_large=True (768 -> 4.5e8)
MAX_FUSION_PARAMS = 50_000_000


@dataclass
class FusionParams:
    w_p: Tensor
    w_fusion: Tensor

    def __post_init__(self):
        d_model = self.w_p.shape[0]
        if self.w_fusion.shape != (d_model, d_model * d_model):
            raise ValueError(
                f"W_fusion must be {d_model}x{d_model * d_model}, got {self.w_fusion.shape}")


def check_fusion_size(d_model: int, allow_large: bool = False) -> None:
    if d_model ** 3 > MAX_FUSION_PARAMS and not allow_large:
        raise ValueError(
            f"d_model={d_model} needs {d_model ** 3:,} fusion weights; "
            "pass allow_large=True to build it anyway")


def project_patch(e_p: Tensor, w_p: Tensor) -> Tensor:
    """W_p e_p for a single vector or row-stacked patch embeddings."""
    e_p = nx.as_tensor(e_p)
    if e_p.shape[-1] != w_p.shape[1]:
        raise ValueError(f"patch embedding length {e_p.shape[-1]} != W_p columns {w_p.shape[1]}")
    if e_p.ndim == 1:
        return nx.reshape(nx.reshape(e_p, (1, -1)) @ w_p.T, (w_p.shape[0],))
    return e_p @ w_p.T


def fuse(e_tilde: Tensor, z_cls: Tensor, w_fusion: Tensor) -> Tensor:
    if e_tilde.shape != z_cls.shape:
        raise ValueError(f"fuse needs equal shapes, got {e_tilde.shape} and {z_cls.shape}")
    d = e_tilde.shape[-1]
    if w_fusion.shape[1] != d * d:
        raise ValueError(f"W_fusion has {w_fusion.shape[1]} columns, expected {d * d}")
    lead = e_tilde.shape[:-1]
    flat = nx.reshape(nx.outer(e_tilde, z_cls), (-1, d * d))
    f = flat @ w_fusion.T
    return nx.reshape(f, lead + (w_fusion.shape[0],))


def make_instance(e_p, z_cls: Tensor, params: FusionParams, use_patch_embeddings: bool = True) -> Tensor:
    """Instance vector for MIL; without patch embeddings it is z_cls itself."""
    if not use_patch_embeddings:
        return z_cls
    return fuse(project_patch(e_p, params.w_p), z_cls, params.w_fusion)
