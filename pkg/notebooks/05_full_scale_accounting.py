"""
Trainable parameters at 7B scale
================================

Counts are analytic, so nothing of 7B size is allocated.
"""

# %%
from peftreview import model as mdl
from peftreview import peft

big = mdl.ModelConfig.full_scale()
print(f"base parameters: {big.n_params():,}")

# %%
for kind, hyper in (("lora", {"rank": 8}), ("lora", {"rank": 16}),
                    ("prefix", {"prefix_len": 10, "prefix_layers": 30})):
    acc = peft.accounting(kind, big, **hyper)
    mib = acc["storage"][2]["MiB"]
    print(f"{kind:6s} {hyper}  {acc['trainable']:>12,}  {mib:6.2f} MiB at 2 bytes/param")
