"""Finite-difference gradient checking for scalar-reduced graph outputs."""

import numpy as np

from oracles import central_difference, rel_error
from peftreview import numerics as nx


def check(build, arrays, seed=0, h=1e-4):
    """Worst relative error between analytic and numeric gradients.

    ``build`` maps float64 Tensors to an output Tensor. The output is reduced
    with fixed random weights so that every output element matters.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build(*[nx.Tensor(a) for a in arrays])
    weights = rng.normal(size=probe.shape)

    def scalar(*ts):
        out = build(*ts)
        return out if out.ndim == 0 else nx.sum(nx.mul(out, nx.Tensor(weights)))

    leaves = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
    nx.backward(scalar(*leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):

        def f(x, i=i):
            ts = [nx.Tensor(x if j == i else a) for j, a in enumerate(arrays)]
            with nx.no_grad():
                return float(scalar(*ts).data)

        numeric = central_difference(f, arrays[i], h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _rope_tables(m, d, base=10000.0):
    inv = base ** (-np.arange(0, d, 2) / d)
    ang = np.arange(m)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def primitive_cases(rng):
    """``name -> (build, arrays)`` covering every differentiable primitive."""
    cos, sin = _rope_tables(3, 4)
    mask = np.triu(np.ones((3, 3), dtype=bool), 1)
    ids = np.array([[1, 0, 2], [2, 2, 1]])
    targets = np.array([1, -100, 3, 0])
    return {
        "add": (lambda a, b: nx.add(a, b), [rng.normal(size=(3, 4)), rng.normal(size=4)]),
        "sub": (lambda a, b: nx.sub(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "mul": (lambda a, b: nx.mul(a, b), [rng.normal(size=(2, 3, 4)), rng.normal(size=4)]),
        "scale": (lambda a: nx.scale(a, 0.37), [rng.normal(size=(2, 3))]),
        "silu": (lambda a: nx.silu(a), [rng.normal(size=(3, 4))]),
        "reshape": (lambda a: nx.reshape(a, (4, 3)), [rng.normal(size=(3, 4))]),
        "transpose": (lambda a: nx.transpose(a, (1, 0, 2)), [rng.normal(size=(2, 3, 4))]),
        "expand": (lambda a: nx.expand(a, (2, 3, 4)), [rng.normal(size=(3, 1))]),
        "concat": (lambda a, b: nx.concat([a, b], axis=1), [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))]),
        "sum": (lambda a: nx.sum(a), [rng.normal(size=(3, 4))]),
        "mean": (lambda a: nx.mean(a), [rng.normal(size=(3, 4))]),
        "matmul": (lambda a, b: nx.matmul(a, b), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "matmul_batched": (lambda a, b: nx.matmul(a, b), [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]),
        "softmax": (lambda a: nx.softmax(a, axis=-1), [rng.normal(size=(3, 4))]),
        "softmax_masked": (lambda a: nx.softmax(a, axis=-1, mask=mask), [rng.normal(size=(3, 3))]),
        "log_softmax": (lambda a: nx.log_softmax(a, axis=-1), [rng.normal(size=(3, 5))]),
        "rmsnorm": (lambda a, w: nx.rmsnorm(a, w, 1e-5), [rng.normal(size=(3, 4)), rng.normal(size=4)]),
        "embedding": (lambda w: nx.embedding(w, ids), [rng.normal(size=(3, 4))]),
        "rope": (lambda a: nx.rope(a, cos, sin), [rng.normal(size=(2, 3, 4))]),
        "cross_entropy": (lambda a: nx.cross_entropy(a, targets), [rng.normal(size=(4, 5))]),
        "cross_entropy_sum": (lambda a: nx.cross_entropy(a, targets, reduction="sum"), [rng.normal(size=(4, 5))]),
    }


def two_layer_model_error(seed=3):
    """Worst relative gradient error over every weight of a 2-layer float64 model."""
    from peftreview import model as mdl

    cfg = mdl.ModelConfig(vocab_size=11, dim=8, n_layers=2, n_heads=2, max_seq_len=8, ffn_hidden=12)
    rng = np.random.default_rng(seed)
    weights = mdl.init_weights(cfg, seed=5, dtype=np.float64, std=0.3).astype(np.float64, frozen=False)
    for name in ("layers.0.attention_norm", "layers.1.ffn_norm", "norm"):
        weights[name].data[:] = rng.uniform(0.5, 1.5, size=cfg.dim)
    ids = rng.integers(0, cfg.vocab_size, size=(2, 6))
    targets = rng.integers(0, cfg.vocab_size, size=12)
    targets[3] = -100

    def loss_of(w):
        logits = mdl.forward(w, ids)
        return nx.cross_entropy(nx.reshape(logits, (12, cfg.vocab_size)), targets)

    nx.backward(loss_of(weights))
    worst = 0.0
    for name in weights:

        def f(x, name=name):
            with nx.no_grad():
                return float(loss_of(weights.replace({name: x})).data)

        worst = max(worst, rel_error(weights[name].grad, central_difference(f, weights[name].data.copy())))
    return worst
