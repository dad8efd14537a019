"""Spatial patch graphs and the residual graph-convolution operator."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch
from torch import nn

from .data import PatchBag
from .errors import ArgumentError, CorruptFileError

ACTIVATIONS = {
    "silu": nn.functional.silu,
    "relu": torch.relu,
    "linear": lambda x: x,
}


@dataclass
class SlideGraph:
    bag: PatchBag
    adjacency: sp.csr_matrix
    _norm_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def slide_id(self) -> str:
        return self.bag.slide_id

    @property
    def n_nodes(self) -> int:
        return self.bag.n_patches

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel().astype(np.int64)

    def normalized(self, dtype=torch.float32) -> torch.Tensor:
        """Symmetric-normalized adjacency with self loops, as a torch sparse tensor."""
        if dtype not in self._norm_cache:
            self._norm_cache[dtype] = to_torch_sparse(normalize_adjacency(self.adjacency), dtype)
        return self._norm_cache[dtype]

    def features(self, dtype=torch.float32) -> torch.Tensor:
        key = ("x", dtype)
        if key not in self._norm_cache:
            self._norm_cache[key] = torch.as_tensor(self.bag.features).to(dtype)
        return self._norm_cache[key]


def build_graph(bag: PatchBag, window: int = 5) -> SlideGraph:
    """Connect patches whose grid cells are within Chebyshev radius ``(window - 1) // 2``."""
    if window < 1 or window % 2 == 0:
        raise ArgumentError(f"window must be an odd positive integer, got {window}")
    if not bag.has_unique_coords():
        raise ArgumentError(f"{bag.slide_id}: duplicate patch coordinates")
    coords = bag.coords
    n = bag.n_patches
    radius = (window - 1) // 2
    lo = coords.min(axis=0)
    rel = coords - lo
    shape = rel.max(axis=0) + 1
    grid = np.full(tuple(shape + 2 * radius), -1, dtype=np.int64)
    grid[rel[:, 0] + radius, rel[:, 1] + radius] = np.arange(n)
    rows, cols = [], []
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if dr == 0 and dc == 0:
                continue
            nb = grid[rel[:, 0] + radius + dr, rel[:, 1] + radius + dc]
            hit = nb >= 0
            rows.append(np.nonzero(hit)[0])
            cols.append(nb[hit])
    r = np.concatenate(rows) if rows else np.empty(0, np.int64)
    c = np.concatenate(cols) if cols else np.empty(0, np.int64)
    adj = sp.csr_matrix((np.ones(r.size, dtype=np.float64), (r, c)), shape=(n, n))
    adj.sort_indices()
    return SlideGraph(bag, adj)


def normalize_adjacency(adj) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``."""
    a = sp.csr_matrix(adj, dtype=np.float64) + sp.identity(adj.shape[0], format="csr")
    d_inv_sqrt = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
    scale = sp.diags(d_inv_sqrt)
    out = (scale @ a @ scale).tocsr()
    out.sort_indices()
    return out


def to_torch_sparse(m: sp.spmatrix, dtype=torch.float32) -> torch.Tensor:
    coo = m.tocoo()
    idx = torch.as_tensor(np.vstack([coo.row, coo.col]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.as_tensor(coo.data, dtype=dtype), coo.shape,
                                   check_invariants=False).coalesce()


class GraphConv(nn.Module):
    """``act(A_hat X W + b) + X``; feature width is preserved."""

    def __init__(self, d_model: int, activation: str = "silu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {activation!r}")
        self.weight = nn.Parameter(torch.empty(d_model, d_model))
        self.bias = nn.Parameter(torch.zeros(d_model))
        self.activation = activation
        nn.init.xavier_uniform_(self.weight, gain=0.5)

    def forward(self, a_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return graph_conv(self, a_hat, x)


def graph_conv(params: GraphConv, a_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if x.dim() != 2 or x.shape[1] != params.weight.shape[0] or a_hat.shape != (x.shape[0], x.shape[0]):
        raise ArgumentError(f"graph_conv shape mismatch: A {tuple(a_hat.shape)}, X {tuple(x.shape)}, "
                            f"W {tuple(params.weight.shape)}")
    xw = x @ params.weight
    agg = torch.sparse.mm(a_hat, xw) if a_hat.is_sparse else a_hat @ xw
    return ACTIVATIONS[params.activation](agg + params.bias) + x


# -- edge-list cache ---------------------------------------------------------------

_EDGE_HEADER = struct.Struct("<4sqq")
_EDGE_MAGIC = b"GEL1"


def save_edges(graph: SlideGraph, path) -> Path:
    """Write the upper-triangle edge list: magic, node count, edge count, int32 (u, v) pairs."""
    upper = sp.triu(graph.adjacency, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    pairs = np.stack([upper.row[order], upper.col[order]], axis=1).astype("<i4")
    path = Path(path)
    path.write_bytes(_EDGE_HEADER.pack(_EDGE_MAGIC, graph.n_nodes, pairs.shape[0]) + pairs.tobytes())
    return path


def load_edges(path) -> sp.csr_matrix:
    raw = Path(path).read_bytes()
    if len(raw) < _EDGE_HEADER.size:
        raise CorruptFileError(f"{path}: truncated edge cache")
    magic, n, m = _EDGE_HEADER.unpack_from(raw)
    if magic != _EDGE_MAGIC or len(raw) != _EDGE_HEADER.size + 8 * m:
        raise CorruptFileError(f"{path}: bad edge cache layout")
    pairs = np.frombuffer(raw, dtype="<i4", offset=_EDGE_HEADER.size).reshape(m, 2).astype(np.int64)
    r = np.concatenate([pairs[:, 0], pairs[:, 1]])
    c = np.concatenate([pairs[:, 1], pairs[:, 0]])
    adj = sp.csr_matrix((np.ones(r.size), (r, c)), shape=(n, n))
    adj.sort_indices()
    return adj
