"""
Scoring review outputs
======================

Smoothed sentence BLEU-4 for generated text and precision, recall and F1
with a threshold sweep for the yes/no necessity task.
"""

# %%
import numpy as np

from peftreview import metrics

ref = "please rename this variable to something clearer".split()
for hyp in ("please rename this variable to something clearer",
            "rename this variable to something clearer",
            "looks good to me"):
    print(f"{metrics.bleu4(hyp.split(), ref):.4f}  {hyp}")

# %%
rng = np.random.default_rng(0)
labels = rng.integers(0, 2, 50)
scores = np.clip(0.5 * labels + rng.normal(0.25, 0.2, 50), 0, 1)
m = metrics.prf1(scores >= 0.5, labels)
print(m.as_dict())

# %%
best = max(metrics.threshold_sweep(scores.tolist(), labels.tolist()), key=lambda row: row[3])
print("best threshold %.2f  P=%.3f R=%.3f F1=%.3f" % best)
