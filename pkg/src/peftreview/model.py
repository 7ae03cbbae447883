"""LLaMA-style decoder-only transformer used as the frozen base model.

Pre-norm blocks of RMSNorm -> causal multi-head attention with rotary
position encoding -> RMSNorm -> SwiGLU feed-forward, then a final norm and
an untied vocabulary projection. Linear layers compute ``x @ W`` with
``W`` stored as ``(in_features, out_features)``.

Adapters plug in through two duck-typed hooks, so this module does not
depend on any particular adapter class:

* ``adapter.linear(layer, name, x, w0)`` returns the (possibly adapted)
  projection of ``x``;
* ``adapter.prefix(layer)`` returns ``(prompts, gate, rotate)`` for a
  prefixed layer or ``None``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import numerics as nx
from .attention import causal_attention, causal_mask, prefix_attention
from .errors import CompatibilityError, ConfigError, LengthError, UsageError

PROJECTIONS = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    ffn_hidden: int = 172
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "dim", "n_layers", "n_heads", "max_seq_len", "ffn_hidden"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.dim % self.n_heads:
            raise ConfigError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary encoding")
        if self.rope_base <= 0 or self.norm_eps <= 0:
            raise ConfigError("rope_base and norm_eps must be positive")
        # stored as float32 in checkpoints; keep the in-memory value identical
        object.__setattr__(self, "rope_base", float(np.float32(self.rope_base)))
        object.__setattr__(self, "norm_eps", float(np.float32(self.norm_eps)))

    @property
    def head_dim(self):
        return self.dim // self.n_heads

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        """32-byte SHA-256 over the canonical JSON form of the config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    @classmethod
    def full_scale(cls):
        """The 7B-class configuration (used only for analytic accounting)."""
        return cls(vocab_size=32000, dim=4096, n_layers=32, n_heads=32,
                   max_seq_len=2048, ffn_hidden=11008, norm_eps=1e-6)

    def weight_shapes(self):
        """Ordered ``{name: shape}`` of every base tensor."""
        c, f = self.dim, self.ffn_hidden
        shapes = {"tok_embeddings": (self.vocab_size, c)}
        for i in range(self.n_layers):
            p = f"layers.{i}."
            shapes[p + "attention_norm"] = (c,)
            for name in PROJECTIONS:
                shapes[p + "attention." + name] = (c, c)
            shapes[p + "ffn_norm"] = (c,)
            shapes[p + "feed_forward.w1"] = (c, f)
            shapes[p + "feed_forward.w3"] = (c, f)
            shapes[p + "feed_forward.w2"] = (f, c)
        shapes["norm"] = (c,)
        shapes["output"] = (c, self.vocab_size)
        return shapes

    def n_params(self):
        return int(sum(math.prod(s) for s in self.weight_shapes().values()))


class ModelWeights:
    """Named base tensors bound to a config."""

    def __init__(self, config, tensors, frozen=True):
        expected = config.weight_shapes()
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise CompatibilityError(f"weight names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise CompatibilityError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}
        self.frozen = frozen
        for t in self.tensors.values():
            t.requires_grad = not frozen

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def parameters(self):
        return list(self.tensors.values())

    @property
    def dtype(self):
        return self.tensors["output"].dtype

    def digests(self):
        """Per-tensor SHA-256 hex digests, for frozen-base checks."""
        return {n: hashlib.sha256(t.data.tobytes()).hexdigest() for n, t in self.tensors.items()}

    def astype(self, dtype, frozen=None):
        frozen = self.frozen if frozen is None else frozen
        return ModelWeights(self.config, {n: nx.Tensor(t.data.astype(dtype)) for n, t in self.tensors.items()},
                            frozen=frozen)

    def replace(self, updates):
        """Copy with some tensors swapped out; others are shared, not copied."""
        tensors = dict(self.tensors)
        for name, arr in updates.items():
            if name not in tensors:
                raise CompatibilityError(f"unknown weight {name!r}")
            tensors[name] = nx.Tensor(arr, dtype=self.dtype)
        return ModelWeights(self.config, tensors, frozen=self.frozen)


def init_weights(config, seed=0, dtype=np.float32, std=0.02):
    """Seeded scaled-normal init for matrices, ones for norm weights."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.weight_shapes().items():
        if len(shape) == 1:
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        tensors[name] = nx.Tensor(arr.astype(dtype))
    return ModelWeights(config, tensors)


# ---------------------------------------------------------------------------
# checkpoint I/O

_META_FIELDS = ("vocab_size", "dim", "n_layers", "n_heads", "max_seq_len", "ffn_hidden", "rope_base", "norm_eps")


def save_weights(weights, path):
    cfg = weights.config
    meta = [(f"meta.{f}", np.asarray(getattr(cfg, f), dtype=np.float32)) for f in _META_FIELDS]
    body = [(n, t.data) for n, t in weights.tensors.items()]
    return checkpoint.write(path, checkpoint.KIND_BASE, cfg.digest(), meta + body)


def load_weights(path):
    kind, digest, tensors = checkpoint.read(path)
    if kind != checkpoint.KIND_BASE:
        raise CompatibilityError(f"{path}: expected a base-model checkpoint, found {checkpoint.KIND_NAMES[kind]}")
    table = dict(tensors)
    try:
        values = {f: table.pop(f"meta.{f}").item() for f in _META_FIELDS}
    except KeyError as exc:
        raise CompatibilityError(f"{path}: missing config field {exc}") from exc
    for f in _META_FIELDS[:6]:
        values[f] = int(values[f])
    config = ModelConfig(**values)
    if config.digest() != digest:
        raise CompatibilityError(f"{path}: config digest does not match stored config")
    return ModelWeights(config, {n: nx.Tensor(a) for n, a in table.items()})


# ---------------------------------------------------------------------------
# forward


def rope_tables(config, positions, dtype=np.float32):
    half = config.head_dim // 2
    inv = 1.0 / (config.rope_base ** (np.arange(half, dtype=np.float64) * 2.0 / config.head_dim))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


class _NoAdapter:
    def linear(self, layer, name, x, w0):
        return nx.matmul(x, w0)

    def prefix(self, layer):
        return None

    def check_compatible(self, config):
        pass


_BASE = _NoAdapter()


def _heads(x, b, m, h, d):
    return nx.transpose(nx.reshape(x, (b, m, h, d)), (0, 2, 1, 3))


def forward(weights, tokens, adapter=None, trace=None):
    """Logits for a token sequence or a right-padded batch.

    ``tokens`` is ``(M,)`` or ``(B, M)``; the result is ``(M, V)`` or
    ``(B, M, V)``. When ``trace`` is a list, per-layer attention weights are
    appended to it as dicts of numpy arrays.
    """
    cfg = weights.config
    ids = np.asarray(tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise UsageError(f"forward needs a non-empty (B, M) token array, got shape {np.shape(tokens)}")
    if ids.dtype.kind not in "iu":
        raise UsageError("token ids must be integers")
    b, m = ids.shape
    if m > cfg.max_seq_len:
        raise LengthError(f"sequence length {m} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise UsageError(f"token id out of range [0, {cfg.vocab_size})")
    if adapter is None:
        adapter = _BASE
    else:
        adapter.check_compatible(cfg)

    h, d = cfg.n_heads, cfg.head_dim
    dtype = weights.dtype
    cos, sin = rope_tables(cfg, np.arange(m), dtype)
    mask = causal_mask(m)
    x = nx.embedding(weights["tok_embeddings"], ids)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        hn = nx.rmsnorm(x, weights[p + "attention_norm"], cfg.norm_eps)
        q = _heads(adapter.linear(i, "wq", hn, weights[p + "attention.wq"]), b, m, h, d)
        k = _heads(adapter.linear(i, "wk", hn, weights[p + "attention.wk"]), b, m, h, d)
        v = _heads(adapter.linear(i, "wv", hn, weights[p + "attention.wv"]), b, m, h, d)
        q, k = nx.rope(q, cos, sin), nx.rope(k, cos, sin)
        prefix = adapter.prefix(i)
        if prefix is None:
            att, probs = causal_attention(q, k, v, mask)
            gated = None
        else:
            prompts, gate, rotate = prefix
            kk = prompts.shape[0]
            pk = _heads(adapter.linear(i, "wk", nx.reshape(prompts, (1, kk, cfg.dim)), weights[p + "attention.wk"]),
                        1, kk, h, d)
            pv = _heads(adapter.linear(i, "wv", nx.reshape(prompts, (1, kk, cfg.dim)), weights[p + "attention.wv"]),
                        1, kk, h, d)
            if rotate:
                pcos, psin = rope_tables(cfg, np.arange(-kk, 0), dtype)
                pk = nx.rope(pk, pcos, psin)
            pk = nx.expand(pk, (b, h, kk, d))
            pv = nx.expand(pv, (b, h, kk, d))
            att, probs, gated = prefix_attention(q, k, v, pk, pv, gate, mask)
        if trace is not None:
            trace.append({
                "layer": i,
                "probs": probs.data,
                "prefix_probs": None if gated is None else gated.data,
                "gate": None if prefix is None else prefix[1].data.copy(),
            })
        att = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (b, m, cfg.dim))
        x = nx.add(x, adapter.linear(i, "wo", att, weights[p + "attention.wo"]))
        hn = nx.rmsnorm(x, weights[p + "ffn_norm"], cfg.norm_eps)
        gate_ff = nx.silu(nx.matmul(hn, weights[p + "feed_forward.w1"]))
        up = nx.matmul(hn, weights[p + "feed_forward.w3"])
        x = nx.add(x, nx.matmul(nx.mul(gate_ff, up), weights[p + "feed_forward.w2"]))
    x = nx.rmsnorm(x, weights["norm"], cfg.norm_eps)
    logits = nx.matmul(x, weights["output"])
    if single:
        logits = nx.reshape(logits, (m, cfg.vocab_size))
    return logits


def token_logprobs(weights, tokens, adapter=None):
    """Log-softmax of the forward logits, per position (numpy array)."""
    with nx.no_grad():
        return nx.log_softmax(forward(weights, tokens, adapter), axis=-1).data


def generate(weights, prompt, max_new, adapter=None, mode="greedy", eos_id=None,
             temperature=1.0, seed=None):
    """Extend ``prompt`` by up to ``max_new`` tokens.

    Greedy (argmax) by default; ``mode="sample"`` draws from the
    temperature-scaled distribution with a seeded generator. Stops early
    after emitting ``eos_id``. Returns the full sequence as a list.
    """
    cfg = weights.config
    seq = [int(t) for t in prompt]
    if not seq:
        raise UsageError("generate needs a non-empty prompt")
    if max_new < 1:
        raise UsageError("max_new must be at least 1")
    if len(seq) + max_new > cfg.max_seq_len:
        raise LengthError(f"prompt length {len(seq)} + max_new {max_new} exceeds max_seq_len {cfg.max_seq_len}")
    if mode not in ("greedy", "sample"):
        raise UsageError(f"unknown decoding mode {mode!r}")
    rng = np.random.default_rng(seed)
    with nx.no_grad():
        for _ in range(max_new):
            logits = forward(weights, np.asarray(seq, dtype=np.int64), adapter).data[-1]
            if mode == "greedy":
                nxt = int(np.argmax(logits))
            else:
                z = logits.astype(np.float64) / temperature
                p = np.exp(z - z.max())
                nxt = int(rng.choice(len(p), p=p / p.sum()))
            seq.append(nxt)
            if eos_id is not None and nxt == eos_id:
                break
    return seq
