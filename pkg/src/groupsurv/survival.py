"""Dual-head survival predictor and its losses.

The risk head maps a slide embedding to a scalar log-risk ``r`` trained with
the Cox partial likelihood; the probability head maps it to ``K`` discrete
hazards trained with the discrete-time likelihood. Both are merged into the
ranking score ``R = r - sum_k S(t_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ArgumentError

PROB_FLOOR = 1e-12


@dataclass
class RiskOutput:
    """Per-slide predictor outputs for a batch of ``B`` slides.

    ``pmf`` has ``K + 1`` columns: the ``K`` interval probabilities followed by
    the residual tail mass beyond the last interval.
    """

    r: torch.Tensor  # (B,)
    hazards: torch.Tensor  # (B, K)
    pmf: torch.Tensor  # (B, K + 1)
    survival: torch.Tensor  # (B, K)
    R: torch.Tensor  # (B,)

    def score(self, head: str = "dual") -> torch.Tensor:
        """Ranking score matching the active head (higher means riskier)."""
        if head == "dual":
            return self.R
        if head == "risk":
            return self.r
        if head == "prob":
            return -self.survival.sum(dim=-1)
        raise ArgumentError(f"unknown head {head!r}")


class DualHead(nn.Module):
    """Linear risk head (D -> 1) and hazard head (D -> K)."""

    def __init__(self, d_model: int, k_intervals: int = 4, zero_init: bool = True):
        super().__init__()
        if k_intervals < 1:
            raise ArgumentError("k_intervals must be >= 1")
        self.k_intervals = k_intervals
        self.risk = nn.Linear(d_model, 1)
        self.prob = nn.Linear(d_model, k_intervals)
        if zero_init:
            for lin in (self.risk, self.prob):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)

    def forward(self, h: torch.Tensor) -> RiskOutput:
        return heads_forward(self, h)


def survival_from_logits(logits: torch.Tensor):
    """Hazards, pmf (with tail) and survival curve from hazard logits."""
    hazards = torch.sigmoid(logits)
    # log(1 - sigmoid(x)) = logsigmoid(-x), stable for saturated logits
    log_surv = torch.cumsum(nn.functional.logsigmoid(-logits), dim=-1)
    survival = torch.exp(log_surv)
    prev = torch.cat([torch.ones_like(survival[..., :1]), survival[..., :-1]], dim=-1)
    pmf = torch.cat([hazards * prev, survival[..., -1:]], dim=-1)
    return hazards, pmf, survival


def heads_forward(params: DualHead, h: torch.Tensor) -> RiskOutput:
    squeeze = h.dim() == 1
    if squeeze:
        h = h.unsqueeze(0)
    r = params.risk(h).squeeze(-1)
    hazards, pmf, survival = survival_from_logits(params.prob(h))
    out = RiskOutput(r, hazards, pmf, survival, combined_measure(r, survival))
    if squeeze:
        out = RiskOutput(*(t.squeeze(0) for t in (out.r, out.hazards, out.pmf, out.survival, out.R)))
    return out


def combined_measure(r, survival):
    """``R = r - sum_k S(t_k)``; accepts tensors or array-likes."""
    if isinstance(r, torch.Tensor):
        return r - survival.sum(dim=-1)
    return np.asarray(r, dtype=float) - np.sum(np.asarray(survival, dtype=float), axis=-1)


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def cox_loss(risks, times, events, reduction: str = "sum") -> torch.Tensor:
    """Negative Cox partial log-likelihood with Breslow ties.

    The risk set of an event at ``T_i`` is every patient with ``T_j >= T_i``.
    ``reduction="sum"`` returns the plain sum over events; ``"mean"`` divides
    by the number of events. Returns 0 when nobody has an event.
    """
    risks = _as_tensor(risks)
    if risks.numel() == 0:
        raise ArgumentError("cox_loss needs at least one patient")
    times = torch.as_tensor(np.asarray(times, dtype=float))
    events = torch.as_tensor(np.asarray(events, dtype=bool))
    if times.shape != risks.shape or events.shape != risks.shape:
        raise ArgumentError("risks, times and events must have matching shapes")
    n_events = int(events.sum())
    if n_events == 0:
        return risks.sum() * 0.0
    at_risk = times[None, :] >= times[:, None]  # [i, j]: j in risk set of i
    masked = risks[None, :].expand(len(risks), -1).masked_fill(~at_risk, float("-inf"))
    log_denom = torch.logsumexp(masked, dim=1)
    terms = (risks - log_denom)[events]
    total = -terms.sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / n_events
    raise ArgumentError(f"unknown reduction {reduction!r}")


def dt_loss(output: RiskOutput, intervals, events, reduction: str = "mean") -> torch.Tensor:
    """Discrete-time negative log-likelihood.

    An uncensored patient in interval ``k`` contributes ``-log pmf_k``; a
    censored one contributes ``-log S(t_k)``, i.e. it is credited with
    surviving through the interval that contains its censoring time.
    """
    if intervals is None:
        raise ArgumentError("interval indices are not assigned")
    intervals = np.asarray(intervals)
    if intervals.dtype == object or np.any(intervals < 0):
        raise ArgumentError("interval indices are not assigned")
    idx = torch.as_tensor(intervals.astype(np.int64))
    ev = torch.as_tensor(np.asarray(events, dtype=bool))
    pmf, surv = output.pmf, output.survival
    if pmf.dim() == 1:
        pmf, surv = pmf.unsqueeze(0), surv.unsqueeze(0)
    k = surv.shape[-1]
    if torch.any(idx >= k):
        raise ArgumentError("interval index out of range")
    p_event = pmf.gather(1, idx[:, None]).squeeze(1)
    p_surv = surv.gather(1, idx[:, None]).squeeze(1)
    p = torch.where(ev, p_event, p_surv)
    nll = -torch.log(p.clamp_min(PROB_FLOOR))
    if reduction == "mean":
        return nll.mean()
    if reduction == "sum":
        return nll.sum()
    raise ArgumentError(f"unknown reduction {reduction!r}")


def hybrid_loss(alpha: float, loss_risk, loss_prob):
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"alpha must lie in [0, 1], got {alpha}")
    # skip the unused side entirely so a pure head never touches the other loss
    if alpha == 1.0:
        return loss_risk
    if alpha == 0.0:
        return loss_prob
    return alpha * loss_risk + (1.0 - alpha) * loss_prob


def discretize_times(event_times: Sequence[float], k: int) -> np.ndarray:
    """Bin edges at the ``k``-quantiles of uncensored event times.

    Uses numpy's default linear-interpolation quantile rule. Returns ``k - 1``
    strictly increasing edges (empty for ``k == 1``).
    """
    if k < 1:
        raise ArgumentError("k must be >= 1")
    t = np.asarray(event_times, dtype=float)
    if k == 1:
        return np.empty(0)
    if np.unique(t).size < k:
        raise ArgumentError(f"need at least {k} distinct event times, got {np.unique(t).size}")
    edges = np.quantile(t, np.arange(1, k) / k)
    if np.any(np.diff(edges) <= 0):
        raise ArgumentError("event times do not yield distinct quantile edges")
    return edges


def assign_intervals(times, edges) -> np.ndarray:
    """Interval index for each time; bins are right-closed, the last is open."""
    return np.searchsorted(np.asarray(edges, dtype=float), np.asarray(times, dtype=float), side="left")
