"""
Adapters start as the identity
==============================

A fresh LoRA or gated-prefix adapter leaves the frozen decoder's output
bit-for-bit unchanged. A trained LoRA adapter can be folded back into
the base weights.
"""

# %%
import numpy as np

from peftreview import model as mdl
from peftreview import peft

config = mdl.ModelConfig()
base = mdl.init_weights(config, seed=0)
ids = np.arange(5, 40)
ref = mdl.forward(base, ids).data

# %%
for kind in ("lora", "prefix"):
    adapter = peft.init_adapter(kind, config, seed=1)
    diff = np.max(np.abs(mdl.forward(base, ids, adapter).data - ref))
    print(f"{kind:6s} trainable={peft.count_trainable(adapter):,}  max diff={diff}")

# %%
# Perturb a LoRA adapter and merge it into the weights.
lora = peft.init_adapter("lora", config, seed=2, rank=8, alpha=16)
rng = np.random.default_rng(3)
for p in lora.parameters():
    p.data[...] = rng.normal(0.0, 0.05, size=p.shape)
merged = peft.lora_merge(base, lora)
gap = np.max(np.abs(mdl.forward(merged, ids).data - mdl.forward(base, ids, lora).data))
print("merged vs adapter path:", gap)

# %%
# Prefix attention: each row spends 1 + gate of attention mass.
prefix = peft.init_adapter("prefix", config, seed=4, prefix_layers=2)
prefix.gates[3].data[:] = [0.1, -0.2, 0.3, 0.0]
trace = []
mdl.forward(base, ids, prefix, trace=trace)
top = trace[-1]
mass = top["probs"].sum(-1) + top["prefix_probs"].sum(-1)
print("row mass per head (min, max over rows):")
for h in range(config.n_heads):
    print(f"  head {h}: {mass[..., h, :].min():.6f} {mass[..., h, :].max():.6f}")
