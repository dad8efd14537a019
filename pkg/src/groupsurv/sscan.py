"""Selective state-space scan and the gated mixing block built on it.

The block computes ``phi(x) = S(silu(conv(L(x)))) + silu(L(x))`` where ``S`` is
an input-dependent diagonal linear recurrence discretized as
``A_bar = exp(delta * A)`` and ``B_bar = delta * B``.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ArgumentError, NumericError


def _blocked(x: torch.Tensor, rows: int, fill: float) -> torch.Tensor:
    buf = x.new_empty((rows, *x.shape[1:]))
    buf[:x.shape[0]].copy_(x)
    buf[x.shape[0]:].fill_(fill)
    return buf


SCAN_BLOCK = 48


def _scan_inplace(a: torch.Tensor, b: torch.Tensor, reverse: bool = False, block: int = SCAN_BLOCK) -> torch.Tensor:
    """Solve ``h_t = a_t h_{t-1} + b_t`` along dim 0 with zero initial state.

    With ``reverse=True`` the recurrence runs backwards: ``h_t = a_t h_{t+1} + b_t``.
    The sequence is cut into blocks of ``block`` steps; positions inside a block
    are stepped sequentially but vectorized across blocks, then block-boundary
    states are carried across. Work is linear in T. The block size does not
    depend on T, so every output is computed by the same float operations as
    in any longer sequence sharing its prefix (causality holds bit for bit).
    """
    T = a.shape[0]
    if T == 1:
        return b.clone()
    c = min(block, T)
    nc = -(-T // c)
    rest = a.shape[1:]
    a = _blocked(a, nc * c, 1.0).view(nc, c, *rest)
    b = _blocked(b, nc * c, 0.0).view(nc, c, *rest)
    if not reverse:
        for j in range(1, c):
            b[:, j].addcmul_(a[:, j], b[:, j - 1])
            a[:, j].mul_(a[:, j - 1])
        if nc > 1:
            carry = b[:, -1].clone()
            for k in range(1, nc):
                carry[k].addcmul_(a[k, -1], carry[k - 1])
            b[1:].addcmul_(a[1:], carry[:-1].unsqueeze(1))
    else:
        for j in range(c - 2, -1, -1):
            b[:, j].addcmul_(a[:, j], b[:, j + 1])
            a[:, j].mul_(a[:, j + 1])
        if nc > 1:
            carry = b[:, 0].clone()
            for k in range(nc - 2, -1, -1):
                carry[k].addcmul_(a[k, 0], carry[k + 1])
            b[:-1].addcmul_(a[:-1], carry[1:].unsqueeze(1))
    return b.view(nc * c, *rest)[:T]


class _LinearScan(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b):
        h = _scan_inplace(a, b)
        ctx.save_for_backward(a, h)
        return h

    @staticmethod
    def backward(ctx, grad_h):
        a, h = ctx.saved_tensors
        # adjoint: g_t = grad_t + a_{t+1} g_{t+1}
        a_next = torch.empty_like(a)
        a_next[:-1].copy_(a[1:])
        a_next[-1].zero_()
        g = _scan_inplace(a_next, grad_h, reverse=True)
        grad_a = torch.empty_like(g)
        grad_a[0].zero_()
        torch.mul(g[1:], h[:-1], out=grad_a[1:])
        return grad_a, g


def linear_scan(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable first-order linear recurrence along the leading axis."""
    if a.shape != b.shape:
        raise ArgumentError(f"linear_scan shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _LinearScan.apply(a, b)


def selective_scan(u, delta, A, B, C, skip) -> torch.Tensor:
    """Run the discretized selective SSM.

    Parameters
    ----------
    u, delta : (T, D)
        Scan input and positive step sizes.
    A : (D, n)
        Negative state decay rates.
    B, C : (T, n)
        Input-dependent input/output state projections.
    skip : (D,)
        Direct feed-through.
    """
    if not torch.isfinite(u).all():
        raise NumericError("selective_scan received non-finite input")
    needs_grad = torch.is_grad_enabled() and any(t.requires_grad for t in (u, delta, A, B, C, skip))
    if not needs_grad and u.shape[0] > INFER_CHUNK:
        return _chunked_scan(u, delta, A, B, C, skip)
    a = torch.exp(delta.unsqueeze(-1) * A)  # (T, D, n)
    b = (delta * u).unsqueeze(-1) * B.unsqueeze(1)
    h = linear_scan(a, b)
    return (h * C.unsqueeze(1)).sum(-1) + skip * u


# inference processes time in chunks so the (T, D, n) transients stay cache-sized
INFER_CHUNK = 512


def _chunked_scan(u, delta, A, B, C, skip, chunk: int = INFER_CHUNK) -> torch.Tensor:
    y = torch.empty_like(u)
    h_prev = None
    for t0 in range(0, u.shape[0], chunk):
        sl = slice(t0, t0 + chunk)
        a = torch.exp(delta[sl].unsqueeze(-1) * A)
        b = (delta[sl] * u[sl]).unsqueeze(-1) * B[sl].unsqueeze(1)
        if h_prev is not None:
            b[0].addcmul_(a[0], h_prev)
        h = _scan_inplace(a, b)
        h_prev = h[-1].clone()
        torch.sum(h * C[sl].unsqueeze(1), -1, out=y[sl])
        y[sl].addcmul_(skip, u[sl])
    return y


def _inv_softplus(y: torch.Tensor) -> torch.Tensor:
    return y + torch.log(-torch.expm1(-y))


class SelectiveSSM(nn.Module):
    """Parameters of ``S``: per-step ``delta``, ``B`` and ``C`` are projected from the input."""

    def __init__(self, d_model: int, d_state: int = 16, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.d_model, self.d_state = d_model, d_state
        self.A_log = nn.Parameter(torch.log(torch.arange(1, d_state + 1, dtype=torch.float32)).repeat(d_model, 1))
        self.skip = nn.Parameter(torch.ones(d_model))
        self.proj_bc = nn.Linear(d_model, 2 * d_state, bias=False)
        self.proj_dt = nn.Linear(d_model, d_model)
        nn.init.normal_(self.proj_bc.weight, std=d_model ** -0.5)
        nn.init.normal_(self.proj_dt.weight, std=0.1 * d_model ** -0.5)
        dt = torch.exp(torch.rand(d_model) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.proj_dt.bias.copy_(_inv_softplus(dt))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def project(self, u: torch.Tensor):
        delta = F.softplus(self.proj_dt(u))
        B, C = self.proj_bc(u).split(self.d_state, dim=-1)
        return delta, B, C

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        delta, B, C = self.project(u)
        return selective_scan(u, delta, self.A, B, C, self.skip)


class Phi(nn.Module):
    """Gated scan block: linear, causal depthwise conv, SiLU, scan, plus SiLU residual."""

    def __init__(self, d_model: int, d_state: int = 16, conv_width: int = 4):
        super().__init__()
        self.d_model = d_model
        self.linear = nn.Linear(d_model, d_model)
        self.conv_weight = nn.Parameter(torch.empty(d_model, conv_width))
        self.conv_bias = nn.Parameter(torch.empty(d_model))
        self.ssm = SelectiveSSM(d_model, d_state)
        bound = conv_width ** -0.5
        nn.init.uniform_(self.conv_weight, -bound, bound)
        nn.init.uniform_(self.conv_bias, -bound, bound)

    def causal_conv(self, z: torch.Tensor) -> torch.Tensor:
        """Depthwise conv over time, left-padded so step t sees only z[t-k+1..t]."""
        T, width = z.shape[0], self.conv_weight.shape[1]
        zp = torch.cat([z.new_zeros((width - 1, z.shape[1])), z])
        out = self.conv_bias.expand(T, -1)
        for k in range(width):
            out = out + zp[k:k + T] * self.conv_weight[:, k]
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2 or x.shape[1] != self.d_model:
            raise ArgumentError(f"phi expects (T, {self.d_model}) input, got {tuple(x.shape)}")
        z = self.linear(x)
        return self.ssm(F.silu(self.causal_conv(z))) + F.silu(z)

    @torch.no_grad()
    def local_(self) -> "Phi":
        """Make the conv a pass-through of the current step so neighbours start unmixed."""
        self.conv_weight.zero_()
        self.conv_weight[:, -1] = 1.0
        self.conv_bias.zero_()
        return self

    @torch.no_grad()
    def zero_(self) -> "Phi":
        """Zero the input projection and conv bias so the block outputs exactly 0."""
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)
        nn.init.zeros_(self.conv_bias)
        return self
