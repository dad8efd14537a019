"""The two sequence tricks inside a block.

First the selective scan: a linear recurrence whose step size, input and
output maps all depend on the current token. The library evaluates it in
blocks; here it is checked against a plain Python loop.

Second the attention reorder: patches are sorted by a learned score, scanned
in that order, and put back where they came from.

    python demos/02_scan_and_reorder.py
"""

import numpy as np
import torch
from torch.nn import functional as F

from groupsurv.pamamba import AttentionHead, position_order, reorder, restore
from groupsurv.sscan import Phi, selective_scan
from groupsurv.data import PatchBag

torch.manual_seed(0)
T, D, N = 200, 8, 4
u = torch.randn(T, D, dtype=torch.float64)
delta = F.softplus(torch.randn(T, D, dtype=torch.float64))
A = -torch.rand(D, N, dtype=torch.float64) - 0.1
B, C = torch.randn(T, N, dtype=torch.float64), torch.randn(T, N, dtype=torch.float64)
skip = torch.ones(D, dtype=torch.float64)

y = selective_scan(u, delta, A, B, C, skip)

h = torch.zeros(D, N, dtype=torch.float64)
loop = torch.empty_like(u)
for t in range(T):
    h = torch.exp(delta[t, :, None] * A) * h + (delta[t] * u[t])[:, None] * B[t]
    loop[t] = h @ C[t] + skip * u[t]
print(f"blocked scan vs loop, max abs diff: {(y - loop).abs().max().item():.2e}")

# Row-major position order for a slide whose patches arrive shuffled.
coords = np.array([(2, 1), (0, 0), (1, 2), (0, 3), (1, 0)])
bag = PatchBag("demo", np.zeros((5, 2), np.float32), coords)
order = position_order([bag])
print("patches in scan order:", [tuple(map(int, c)) for c in coords[order]])

# Attention order: sort by score, scan, restore.
g = torch.randn(12, D)
head = AttentionHead(D)
scores = head(g)
g_att, idx = reorder(g, scores.detach())
print("attention order:", idx.tolist())
phi = Phi(D, N)
out = restore(phi(g_att), idx)
print("restored output keeps the input layout:", tuple(out.shape), torch.equal(restore(g_att, idx), g))
