"""Dual-branch position/attention scanning over a group patch sequence."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data import PatchBag
from .errors import ArgumentError


def position_order(bags: Sequence[PatchBag]) -> np.ndarray:
    """Permutation of the raw concatenation that sorts each slide row-major.

    Slides keep their group order; within a slide patches go top to bottom,
    then left to right.
    """
    out, offset = [], 0
    for bag in bags:
        c = bag.coords
        out.append(offset + np.lexsort((c[:, 1], c[:, 0])))
        offset += bag.n_patches
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


class AttentionHead(nn.Module):
    """Scalar patch scorer ``w_j = <weight, g_j> + bias``."""

    def __init__(self, d_model: int, zero_init: bool = False):
        super().__init__()
        self.linear = nn.Linear(d_model, 1)
        if zero_init:
            nn.init.zeros_(self.linear.weight)
            nn.init.zeros_(self.linear.bias)

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return attention_weights(self, g)


def attention_weights(head: AttentionHead, g: torch.Tensor) -> torch.Tensor:
    return head.linear(g).squeeze(-1)


def reorder(g: torch.Tensor, w: torch.Tensor):
    """Gather rows of ``g`` in ascending order of ``w`` (stable)."""
    idx = torch.argsort(w.detach(), stable=True)
    return g[idx], idx


def restore(g_att: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Scatter rows back: ``out[idx[j]] = g_att[j]``."""
    m = g_att.shape[0]
    idx = torch.as_tensor(idx, dtype=torch.long)
    if idx.shape != (m,) or not torch.equal(torch.sort(idx).values, torch.arange(m)):
        raise ArgumentError("restore index is not a permutation of 0..M-1")
    inv = torch.empty_like(idx)
    inv[idx] = torch.arange(m)
    return g_att[inv]


def pamamba_forward(phi_pos: Callable | None, phi_att: Callable | None, head: AttentionHead | None,
                    g: torch.Tensor, gate: str = "none"):
    """Position branch plus order-restored attention branch.

    ``g`` must already be in position order. Either branch may be ``None`` to
    ablate it. With ``gate="sigmoid"`` the attention branch output for each
    patch is scaled by ``sigmoid(w)``, which is what lets the scorer receive
    gradient (the sort itself is piecewise constant).

    Returns ``(g_out, w)`` where ``w`` holds the raw attention logits (or
    ``None`` when the attention branch is off).
    """
    if phi_pos is None and phi_att is None:
        raise ArgumentError("at least one scanning branch must be enabled")
    out = phi_pos(g) if phi_pos is not None else None
    w = None
    if phi_att is not None:
        w = attention_weights(head, g)
        g_att, idx = reorder(g, w)
        att = restore(phi_att(g_att), idx)
        if gate == "sigmoid":
            att = att * torch.sigmoid(w).unsqueeze(-1)
        elif gate != "none":
            raise ArgumentError(f"unknown attention gate {gate!r}")
        out = att if out is None else out + att
    return out, w
