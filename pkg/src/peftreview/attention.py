"""Attention kernels: plain causal attention and the gated-prefix variant.

Shapes follow ``(batch, heads, positions, head_dim)`` throughout.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx


def causal_mask(m):
    """Boolean ``(m, m)`` mask, True strictly above the diagonal."""
    return np.triu(np.ones((m, m), dtype=bool), k=1)


def causal_attention(q, k, v, mask=None):
    """Return ``(output, probs)`` for masked scaled dot-product attention."""
    d = q.shape[-1]
    if mask is None:
        mask = causal_mask(q.shape[-2])
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    probs = nx.softmax(scores, axis=-1, mask=mask)
    return nx.matmul(probs, v), probs


def prefix_attention(q, k, v, prefix_k, prefix_v, gate, mask=None):
    """Attention over ``[prompts; tokens]`` with a gated prompt segment.

    The scores against the ``K`` prompt keys and against the sequence's own
    keys are softmaxed separately. The prompt half is scaled by ``gate``
    (one value per head, or a single value shared by all heads) and the two
    halves are applied to their values and summed, which equals
    concatenating the weight rows and multiplying by ``[V_prompt; V]``.

    Computing the halves separately keeps the token half bitwise identical
    to :func:`causal_attention`; with ``gate == 0`` the prompt half adds
    exact zeros.

    Args:
        q, k, v: ``(B, H, M, d)`` projections of the sequence.
        prefix_k, prefix_v: ``(B, H, K, d)`` projections of the prompts.
        gate: tensor of shape ``(H,)`` or ``(1,)``.
        mask: causal mask for the token segment.

    Returns:
        ``(output, token_probs, gated_prefix_probs)``; each row of
        ``concat([gated_prefix_probs, token_probs])`` sums to ``1 + gate``.
    """
    out, probs = causal_attention(q, k, v, mask)
    b, h, m, d = q.shape
    scores = nx.scale(nx.matmul(q, nx.transpose(prefix_k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    pprobs = nx.softmax(scores, axis=-1)
    g = nx.expand(nx.reshape(gate, (gate.shape[0], 1, 1)), pprobs.shape)
    gated = nx.mul(pprobs, g)
    out = nx.add(out, nx.matmul(gated, prefix_v))
    return out, probs, gated
