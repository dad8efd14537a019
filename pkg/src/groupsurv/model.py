"""Group model: graph-clamped PAMamba blocks, slide pooling and slide-group mixing."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ArgumentError, ConfigError, InvariantError, LoadError
from .graph import GraphConv, SlideGraph
from .pamamba import AttentionHead, pamamba_forward, position_order
from .sscan import Phi
from .survival import DualHead, RiskOutput

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_model: int = 64
    d_state: int = 16
    conv_width: int = 4
    n_blocks: int = 2
    group_size: int = 6
    k_intervals: int = 4
    pooling: str = "mean"
    patch_group: bool = True
    slide_group: bool = True
    branch: str = "both"
    use_graph: bool = True
    head: str = "dual"
    window: int = 5
    gc_activation: str = "silu"
    # residual around the scanning stage of each block
    scan_residual: bool = True
    attention_gate: str = "sigmoid"
    # "none" skips every block: raw features go straight to pooling
    encoder: str = "gpamamba"
    # standardize slide embeddings before the heads ("batch" uses group statistics)
    head_norm: str = "batch"
    # "local" starts the slide-group conv as a pass-through so companions are not mixed in at init
    slide_conv_init: str = "local"

    def validate(self) -> "ModelConfig":
        checks = [
            (self.n_blocks >= 1, "n_blocks must be >= 1"),
            (self.d_model >= 1 and self.d_state >= 1 and self.conv_width >= 1, "sizes must be positive"),
            (self.group_size >= 1, "group_size must be >= 1"),
            (self.k_intervals >= 1, "k_intervals must be >= 1"),
            (self.pooling in ("mean", "attention"), f"unknown pooling {self.pooling!r}"),
            (self.branch in ("pos", "att", "both"), f"unknown branch {self.branch!r}"),
            (self.head in ("risk", "prob", "dual"), f"unknown head {self.head!r}"),
            (self.attention_gate in ("none", "sigmoid"), f"unknown attention_gate {self.attention_gate!r}"),
            (self.encoder in ("gpamamba", "none"), f"unknown encoder {self.encoder!r}"),
            (self.head_norm in ("none", "layer", "batch"), f"unknown head_norm {self.head_norm!r}"),
            (self.slide_conv_init in ("random", "local"), f"unknown slide_conv_init {self.slide_conv_init!r}"),
            (self.window >= 1 and self.window % 2 == 1, "window must be odd"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class GroupSequence:
    data: torch.Tensor
    boundaries: np.ndarray
    slide_ids: list
    orders: list = field(default_factory=list)  # per-slide row-major order of raw patch rows

    def __post_init__(self):
        b = np.asarray(self.boundaries)
        if b.ndim != 1 or b.size < 2 or b[0] != 0 or np.any(np.diff(b) <= 0) or b[-1] != self.data.shape[0]:
            raise InvariantError(f"invalid group boundaries {b.tolist()} for {self.data.shape[0]} rows")


@dataclass
class SlideSequence:
    data: torch.Tensor  # (B, D)
    slide_ids: list


def sequentialize(group: Sequence[SlideGraph], features: Optional[Sequence[torch.Tensor]] = None) -> GroupSequence:
    """Concatenate position-ordered patches of every slide end to end."""
    if not group:
        raise ArgumentError("empty group")
    feats = list(features) if features is not None else [torch.as_tensor(g.bag.features) for g in group]
    dims = {f.shape[1] for f in feats}
    if len(dims) != 1:
        raise ArgumentError(f"slides in a group disagree on feature dimension: {sorted(dims)}")
    orders = [position_order([g.bag]) for g in group]
    data = torch.cat([f[torch.as_tensor(o)] for f, o in zip(feats, orders)])
    bounds = np.concatenate([[0], np.cumsum([len(o) for o in orders])])
    return GroupSequence(data, bounds, [g.slide_id for g in group], orders)


def desequentialize(seq: GroupSequence, data: Optional[torch.Tensor] = None) -> list:
    """Slice the sequence back into per-slide matrices in original patch order.

    ``data`` substitutes the sequence payload (e.g. a processed sequence).
    """
    data = seq.data if data is None else data
    b = np.asarray(seq.boundaries)
    if b[-1] != data.shape[0] or np.any(np.diff(b) <= 0):
        raise InvariantError("sequence boundaries do not match the payload")
    out = []
    for i in range(len(b) - 1):
        block = data[b[i]:b[i + 1]]
        if seq.orders:
            order = torch.as_tensor(seq.orders[i])
            inv = torch.empty_like(order)
            inv[order] = torch.arange(order.numel())
            block = block[inv]
        out.append(block)
    return out


class GPAMambaBlock(nn.Module):
    """GC -> sequentialize -> PAMamba -> desequentialize -> GC."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.g1 = GraphConv(d, cfg.gc_activation)
        self.g2 = GraphConv(d, cfg.gc_activation)
        self.phi_pos = Phi(d, cfg.d_state, cfg.conv_width)
        self.phi_att = Phi(d, cfg.d_state, cfg.conv_width)
        self.att_head = AttentionHead(d)

    def _scan(self, g: torch.Tensor):
        cfg = self.cfg
        phi_pos = self.phi_pos if cfg.branch in ("pos", "both") else None
        phi_att = self.phi_att if cfg.branch in ("att", "both") else None
        out, w = pamamba_forward(phi_pos, phi_att, self.att_head, g, cfg.attention_gate)
        if cfg.scan_residual:
            out = g + out
        return out, w

    def forward(self, group: Sequence[SlideGraph], feats: Sequence[torch.Tensor]):
        cfg = self.cfg
        dtype = feats[0].dtype
        if cfg.use_graph:
            feats = [self.g1(s.normalized(dtype), x) for s, x in zip(group, feats)]
        if cfg.patch_group:
            seq = sequentialize(group, feats)
            out, w = self._scan(seq.data)
            feats = desequentialize(seq, out)
            logits = desequentialize(seq, w.unsqueeze(-1)) if w is not None else [None] * len(group)
        else:
            feats_new, logits = [], []
            for s, x in zip(group, feats):
                seq = sequentialize([s], [x])
                out, w = self._scan(seq.data)
                feats_new.append(desequentialize(seq, out)[0])
                logits.append(desequentialize(seq, w.unsqueeze(-1))[0] if w is not None else None)
            feats = feats_new
        if cfg.use_graph:
            feats = [self.g2(s.normalized(dtype), x) for s, x in zip(group, feats)]
        logits = [lg.squeeze(-1) if lg is not None else None for lg in logits]
        return feats, logits


def gpamamba_block(block: GPAMambaBlock, group: Sequence[SlideGraph], feats=None):
    if feats is None:
        feats = [torch.as_tensor(g.bag.features) for g in group]
    return block(group, feats)[0]


def weighted_pool(x: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return (weights.unsqueeze(-1) * x).sum(dim=0)


def pool_slides(feats: Sequence[torch.Tensor], mode: str = "mean", scorer: Optional[nn.Linear] = None,
                slide_ids=None) -> SlideSequence:
    """Pool per-slide node features into a ``B x D`` slide sequence.

    Mean pooling goes through the same weighted sum as attention pooling with
    uniform weights, so a zero scorer reproduces it bit for bit.
    """
    rows = []
    for x in feats:
        if x.shape[0] == 0:
            raise ArgumentError("cannot pool an empty slide")
        if mode == "mean":
            w = torch.full((x.shape[0],), 1.0 / x.shape[0], dtype=x.dtype)
        elif mode == "attention":
            if scorer is None:
                raise ArgumentError("attention pooling needs a scorer")
            w = torch.softmax(scorer(x).squeeze(-1), dim=0)
        else:
            raise ArgumentError(f"unknown pooling mode {mode!r}")
        rows.append(weighted_pool(x, w))
    return SlideSequence(torch.stack(rows), list(slide_ids) if slide_ids is not None else [])


def slide_group_forward(phi_int: Optional[Phi], g: SlideSequence, enabled: bool = True) -> SlideSequence:
    if not enabled or phi_int is None:
        return g
    return SlideSequence(phi_int(g.data), g.slide_ids)


class SlideBatchNorm(nn.BatchNorm1d):
    """Batch norm over the slides of a group; a lone slide is scaled with the running statistics."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] < 2:
            return F.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                                False, 0.0, self.eps)
        return super().forward(x)


@dataclass
class GroupForward:
    embeddings: torch.Tensor  # (B, D)
    output: RiskOutput
    attention: list  # per block, per slide raw logits (or None)
    slide_ids: list


class GroupSurvModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        d = cfg.d_model
        n_blocks = cfg.n_blocks if cfg.encoder == "gpamamba" else 0
        self.blocks = nn.ModuleList([GPAMambaBlock(cfg) for _ in range(n_blocks)])
        self.pool_scorer = nn.Linear(d, 1)
        nn.init.zeros_(self.pool_scorer.weight)
        nn.init.zeros_(self.pool_scorer.bias)
        self.phi_int = Phi(d, cfg.d_state, cfg.conv_width)
        if cfg.slide_conv_init == "local":
            self.phi_int.local_()
        self.heads = DualHead(d, cfg.k_intervals)
        if cfg.head_norm == "layer":
            self.head_norm = nn.LayerNorm(d)
        elif cfg.head_norm == "batch":
            self.head_norm = SlideBatchNorm(d)
        else:
            self.head_norm = nn.Identity()

    @property
    def dtype(self):
        return self.heads.risk.weight.dtype

    def embed(self, group: Sequence[SlideGraph]):
        if not group:
            raise ArgumentError("empty group")
        feats = [g.features(self.dtype) for g in group]
        attention = []
        for block in self.blocks:
            feats, logits = block(group, feats)
            attention.append(logits)
        pooled = pool_slides(feats, self.cfg.pooling, self.pool_scorer, [g.slide_id for g in group])
        mixed = slide_group_forward(self.phi_int, pooled, self.cfg.slide_group)
        return mixed.data, attention

    def forward(self, group: Sequence[SlideGraph]) -> GroupForward:
        h, attention = self.embed(group)
        return GroupForward(h, self.heads(self.head_norm(h)), attention, [g.slide_id for g in group])


def model_forward(model: GroupSurvModel, group: Sequence[SlideGraph]) -> torch.Tensor:
    return model.embed(group)[0]


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(model: GroupSurvModel, path, extra: Optional[dict] = None) -> Path:
    """Write an ``.npz`` archive of parameters plus a JSON ``__meta__`` entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "dtype": str(model.dtype).replace("torch.", ""),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **state)
    return path


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as z:
        return json.loads(bytes(z["__meta__"]).decode())


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> GroupSurvModel:
    try:
        z = np.load(path)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    with z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise LoadError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig.from_dict(meta["model_config"])
        if expect is not None and asdict(expect) != asdict(cfg):
            raise LoadError("checkpoint model config differs from the expected config")
        model = GroupSurvModel(cfg)
        if meta.get("dtype") == "float64":
            model = model.double()
        own = model.state_dict()
        if set(own) != set(meta["shapes"]):
            raise LoadError("checkpoint parameter names do not match the model")
        state = {}
        for k, ref in own.items():
            arr = z[k]
            if list(arr.shape) != list(ref.shape) or list(arr.shape) != meta["shapes"][k]:
                raise LoadError(f"shape mismatch for {k}: {arr.shape} vs {tuple(ref.shape)}")
            state[k] = torch.as_tensor(arr)
        model.load_state_dict(state)
    model.checkpoint_meta = meta
    return model
