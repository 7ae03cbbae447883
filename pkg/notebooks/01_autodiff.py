"""
Reverse-mode gradients on numpy arrays
======================================

Build a small expression, run ``backward`` and compare the result with a
central finite difference.
"""

# %%
import numpy as np

from peftreview import numerics as nx

rng = np.random.default_rng(0)
x = nx.Tensor(rng.normal(size=(4, 8)), requires_grad=True)
w = nx.Tensor(rng.normal(size=(8,)), requires_grad=True)

# %%
# RMSNorm followed by SiLU and a mean is enough to exercise broadcasting.
def f():
    return nx.mean(nx.silu(nx.rmsnorm(x, w)))


nx.backward(f())
analytic = w.grad.copy()

# %%
h = 1e-6
numeric = np.zeros_like(w.data)
for i in range(w.data.size):
    saved = w.data[i]
    w.data[i] = saved + h
    with nx.no_grad():
        up = float(f().data)
    w.data[i] = saved - h
    with nx.no_grad():
        down = float(f().data)
    w.data[i] = saved
    numeric[i] = (up - down) / (2 * h)

print("max |analytic - numeric|:", np.max(np.abs(analytic - numeric)))

# %%
# AdamW with decoupled decay: a few steps on a quadratic.
p = nx.Tensor(np.array([3.0, -2.0]), requires_grad=True)
opt = nx.AdamW([p], lr=0.1, weight_decay=0.01)
for _ in range(200):
    opt.zero_grad()
    nx.backward(nx.sum(nx.mul(p, p)))
    opt.step()
print("minimiser estimate:", p.data)
