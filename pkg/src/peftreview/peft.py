"""Parameter-efficient adapters: LoRA and zero-init gated prefix prompts.

Both adapter kinds satisfy the hook protocol of :mod:`peftreview.model`
(``linear``, ``prefix``, ``check_compatible``) and are created so that a
freshly initialised adapter leaves the base model's output unchanged:
LoRA's up-projection starts at zero, and the prefix gates start at zero.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import checkpoint
from . import numerics as nx
from .attention import prefix_attention  # noqa: F401  (re-exported)
from .errors import CompatibilityError, ConfigError, FormatError

DEFAULT_TARGETS = ("wq", "wv")
_VALID_TARGETS = ("wq", "wk", "wv", "wo")


def _check_digest(adapter, config):
    if adapter.config_digest != config.digest():
        raise CompatibilityError("adapter was built for a different model config (digest mismatch)")


def _f32(x):
    return float(np.float32(x))


class LoraAdapter:
    """Low-rank updates ``W0 + (alpha / rank) * W_down @ W_up`` on target projections."""

    kind = "lora"

    def __init__(self, config, rank, alpha, entries):
        self.config = config
        self.config_digest = config.digest()
        self.rank = int(rank)
        self.alpha = _f32(alpha)
        self.entries = dict(entries)  # (layer, target) -> (down, up)

    @property
    def scale(self):
        return self.alpha / self.rank

    @property
    def targets(self):
        return tuple(t for t in _VALID_TARGETS if any(k[1] == t for k in self.entries))

    def parameters(self):
        out = []
        for key in sorted(self.entries):
            out.extend(self.entries[key])
        return out

    def named_tensors(self):
        for layer, target in sorted(self.entries):
            down, up = self.entries[(layer, target)]
            base = f"layers.{layer}.attention.{target}"
            yield base + ".lora_down", down
            yield base + ".lora_up", up

    def check_compatible(self, config):
        _check_digest(self, config)

    def linear(self, layer, name, x, w0):
        entry = self.entries.get((layer, name))
        if entry is None:
            return nx.matmul(x, w0)
        return lora_apply(w0, x, entry[0], entry[1], self.scale)

    def prefix(self, layer):
        return None

    def astype(self, dtype):
        return LoraAdapter(self.config, self.rank, self.alpha,
                           {k: (nx.Tensor(d.data.astype(dtype), True), nx.Tensor(u.data.astype(dtype), True))
                            for k, (d, u) in self.entries.items()})


class PrefixAdapter:
    """``K`` learnable prompt vectors and gates on each of the top ``L`` layers."""

    kind = "prefix"

    def __init__(self, config, prefix_len, prompts, gates, per_head_gates=True, rotate_prefix=False):
        self.config = config
        self.config_digest = config.digest()
        self.prefix_len = int(prefix_len)
        self.prompts = dict(prompts)  # layer -> Tensor (K, C)
        self.gates = dict(gates)  # layer -> Tensor (H,) or (1,)
        self.per_head_gates = bool(per_head_gates)
        self.rotate_prefix = bool(rotate_prefix)

    @property
    def n_prefix_layers(self):
        return len(self.prompts)

    @property
    def layers(self):
        return sorted(self.prompts)

    def parameters(self):
        out = []
        for layer in self.layers:
            out += [self.prompts[layer], self.gates[layer]]
        return out

    def named_tensors(self):
        for layer in self.layers:
            yield f"layers.{layer}.prefix.prompt", self.prompts[layer]
            yield f"layers.{layer}.prefix.gate", self.gates[layer]

    def check_compatible(self, config):
        _check_digest(self, config)

    def linear(self, layer, name, x, w0):
        return nx.matmul(x, w0)

    def prefix(self, layer):
        if layer not in self.prompts:
            return None
        return self.prompts[layer], self.gates[layer], self.rotate_prefix

    def astype(self, dtype):
        conv = lambda t: nx.Tensor(t.data.astype(dtype), True)  # noqa: E731
        return PrefixAdapter(self.config, self.prefix_len,
                             {k: conv(v) for k, v in self.prompts.items()},
                             {k: conv(v) for k, v in self.gates.items()},
                             self.per_head_gates, self.rotate_prefix)


# ---------------------------------------------------------------------------
# LoRA algebra


def lora_apply(w0, x, down, up, scale):
    """``x @ W0 + scale * (x @ W_down) @ W_up``."""
    d, k = w0.shape
    if down.ndim != 2 or up.ndim != 2 or down.shape[0] != d or up.shape[1] != k or down.shape[1] != up.shape[0]:
        raise CompatibilityError(
            f"LoRA entry shapes {down.shape} x {up.shape} do not fit base matrix {w0.shape}")
    h = nx.matmul(x, w0)
    delta = nx.matmul(nx.matmul(x, down), up)
    return nx.add(h, nx.scale(delta, scale))


def lora_delta(adapter, layer, target):
    down, up = adapter.entries[(layer, target)]
    return (adapter.scale * (down.data @ up.data)).astype(down.dtype)


def lora_merge(weights, adapter):
    """Fold every LoRA update into a copy of the base weights.

    Untargeted tensors are shared with ``weights`` unchanged.
    """
    if not isinstance(adapter, LoraAdapter):
        raise CompatibilityError(f"only LoRA adapters can be merged, got {adapter.kind}")
    adapter.check_compatible(weights.config)
    updates = {}
    for layer, target in sorted(adapter.entries):
        name = f"layers.{layer}.attention.{target}"
        updates[name] = weights[name].data + lora_delta(adapter, layer, target)
    return weights.replace(updates)


# ---------------------------------------------------------------------------
# construction and accounting


def init_adapter(kind, config, seed=0, rank=16, alpha=16.0, targets=DEFAULT_TARGETS,
                 prefix_len=10, prefix_layers=None, per_head_gates=True, rotate_prefix=False,
                 dtype=np.float32, std=0.02, prompt_std=1.0):
    """Create a fresh adapter that reproduces the base model exactly.

    LoRA: ``W_down ~ N(0, std)``, ``W_up = 0``. Prefix: prompts
    ``~ N(0, prompt_std)``, gates ``= 0``. ``prefix_layers=None`` means
    ``min(30, n_layers)``.
    """
    rng = np.random.default_rng(seed)
    if kind == "lora":
        if not isinstance(rank, (int, np.integer)) or rank < 1:
            raise ConfigError(f"LoRA rank must be a positive integer, got {rank!r}")
        if not targets or any(t not in _VALID_TARGETS for t in targets):
            raise ConfigError(f"LoRA targets must be drawn from {_VALID_TARGETS}, got {targets!r}")
        if rank > config.dim:
            raise ConfigError(f"LoRA rank {rank} exceeds min(d, k) = {config.dim}")
        if not math.isfinite(alpha):
            raise ConfigError("LoRA alpha must be finite")
        entries = {}
        for layer in range(config.n_layers):
            for t in _VALID_TARGETS:
                if t not in targets:
                    continue
                down = rng.normal(0.0, std, size=(config.dim, rank)).astype(dtype)
                up = np.zeros((rank, config.dim), dtype=dtype)
                entries[(layer, t)] = (nx.Tensor(down, True), nx.Tensor(up, True))
        return LoraAdapter(config, rank, alpha, entries)
    if kind == "prefix":
        if prefix_layers is None:
            prefix_layers = min(30, config.n_layers)
        if not isinstance(prefix_len, (int, np.integer)) or prefix_len < 1:
            raise ConfigError(f"prefix length must be a positive integer, got {prefix_len!r}")
        if not isinstance(prefix_layers, (int, np.integer)) or not 1 <= prefix_layers <= config.n_layers:
            raise ConfigError(f"prefix layers must be in [1, {config.n_layers}], got {prefix_layers!r}")
        n_gates = config.n_heads if per_head_gates else 1
        prompts, gates = {}, {}
        for layer in range(config.n_layers - prefix_layers, config.n_layers):
            prompts[layer] = nx.Tensor(rng.normal(0.0, prompt_std, size=(prefix_len, config.dim)).astype(dtype), True)
            gates[layer] = nx.Tensor(np.zeros(n_gates, dtype=dtype), True)
        return PrefixAdapter(config, prefix_len, prompts, gates, per_head_gates, rotate_prefix)
    raise ConfigError(f"unknown adapter kind {kind!r} (expected 'lora' or 'prefix')")


def trainable_count(kind, config, rank=16, targets=DEFAULT_TARGETS, prefix_len=10, prefix_layers=30,
                    per_head_gates=True):
    """Analytic number of trainable scalars; allocates nothing.

    LoRA: ``sum over targets of rank * (d + k)``.
    Prefix: ``L * K * C`` prompt entries plus ``L * n_heads`` gates (or
    ``L`` gates when a single gate is shared per layer).
    """
    if kind == "lora":
        per_layer = sum(rank * (config.dim + config.dim) for _ in targets)
        return per_layer * config.n_layers
    if kind == "prefix":
        gates = config.n_heads if per_head_gates else 1
        return prefix_layers * prefix_len * config.dim + prefix_layers * gates
    raise ConfigError(f"unknown adapter kind {kind!r}")


def count_trainable(adapter, config=None):
    config = config or adapter.config
    if isinstance(adapter, LoraAdapter):
        return trainable_count("lora", config, rank=adapter.rank, targets=adapter.targets)
    return trainable_count("prefix", config, prefix_len=adapter.prefix_len,
                           prefix_layers=adapter.n_prefix_layers, per_head_gates=adapter.per_head_gates)


def storage_bytes(n_params, bytes_per_param=2):
    return n_params * bytes_per_param


def accounting(kind, config, bytes_per_param=(2, 4), **hyper):
    """Trainable count and storage footprint at several precisions."""
    n = trainable_count(kind, config, **hyper)
    return {
        "trainable": n,
        "storage": {b: {"bytes": storage_bytes(n, b), "MiB": storage_bytes(n, b) / 2**20}
                    for b in bytes_per_param},
    }


# ---------------------------------------------------------------------------
# plug-in files


def _meta(adapter):
    if isinstance(adapter, LoraAdapter):
        return [("meta.rank", adapter.rank), ("meta.alpha", adapter.alpha)]
    return [("meta.prefix_len", adapter.prefix_len),
            ("meta.per_head_gates", float(adapter.per_head_gates)),
            ("meta.rotate_prefix", float(adapter.rotate_prefix))]


def adapter_to_bytes(adapter):
    kind = checkpoint.KIND_LORA if isinstance(adapter, LoraAdapter) else checkpoint.KIND_PREFIX
    table = [(n, np.asarray(v, dtype=np.float32)) for n, v in _meta(adapter)]
    table += [(n, t.data) for n, t in adapter.named_tensors()]
    return checkpoint.encode(kind, adapter.config_digest, table)


def save_adapter(adapter, path):
    blob = adapter_to_bytes(adapter)
    Path(path).write_bytes(blob)
    return len(blob)


def read_adapter_file(path):
    """Parse an adapter file without binding it to a config.

    Returns ``(kind_name, digest, meta, tensors)`` where ``meta`` holds the
    stored hyperparameters and ``tensors`` maps names to arrays.
    """
    kind, digest, table = checkpoint.read(path)
    if kind == checkpoint.KIND_BASE:
        raise CompatibilityError(f"{path} is a base-model checkpoint, not an adapter")
    meta = {n[5:]: a.item() for n, a in table if n.startswith("meta.")}
    tensors = {n: a for n, a in table if not n.startswith("meta.")}
    return checkpoint.KIND_NAMES[kind], digest, meta, tensors


def load_adapter(path, config):
    kind, digest, meta, tensors = read_adapter_file(path)
    if digest != config.digest():
        raise CompatibilityError(f"{path}: adapter config digest does not match the base model")
    try:
        if kind == "lora":
            entries = {}
            for name, arr in tensors.items():
                parts = name.split(".")
                if len(parts) != 5 or parts[0] != "layers" or parts[4] not in ("lora_down", "lora_up"):
                    raise FormatError(f"unexpected tensor {name!r} in LoRA adapter")
                key = (int(parts[1]), parts[3])
                pair = entries.setdefault(key, [None, None])
                pair[parts[4] == "lora_up"] = nx.Tensor(arr, True)
            if any(p is None for pair in entries.values() for p in pair):
                raise FormatError("LoRA adapter has an unpaired down/up tensor")
            adapter = LoraAdapter(config, int(meta["rank"]), meta["alpha"],
                                  {k: tuple(v) for k, v in entries.items()})
            for (layer, t), (down, up) in adapter.entries.items():
                if down.shape != (config.dim, adapter.rank) or up.shape != (adapter.rank, config.dim):
                    raise CompatibilityError(f"LoRA entry {layer}.{t} has wrong shape")
            return adapter
        prompts, gates = {}, {}
        for name, arr in tensors.items():
            parts = name.split(".")
            if len(parts) != 4 or parts[0] != "layers" or parts[2] != "prefix":
                raise FormatError(f"unexpected tensor {name!r} in prefix adapter")
            (prompts if parts[3] == "prompt" else gates)[int(parts[1])] = nx.Tensor(arr, True)
        k = int(meta["prefix_len"])
        per_head = bool(meta["per_head_gates"])
        for layer, p in prompts.items():
            if p.shape != (k, config.dim) or layer not in gates:
                raise CompatibilityError(f"prefix layer {layer} has wrong shape")
            if gates[layer].shape != ((config.n_heads,) if per_head else (1,)):
                raise CompatibilityError(f"prefix gate {layer} has wrong shape")
        return PrefixAdapter(config, k, prompts, gates, per_head, bool(meta["rotate_prefix"]))
    except KeyError as exc:
        raise FormatError(f"{path}: missing adapter metadata {exc}") from exc
