"""Acceptance suite: one test per criterion, each at its stated tolerance.

A PASS/FAIL line per criterion is printed at the end of the pytest run
(see ``pytest_terminal_summary`` in conftest.py).
"""

import time

import numpy as np
import pytest

import gradcheck
from oracles import BLEU_GOLDEN_HYP, BLEU_GOLDEN_REF, BLEU_GOLDEN_VALUE, confusion
from peftreview import cli, metrics
from peftreview import model as mdl
from peftreview import peft
from peftreview import pipeline as pl
from peftreview import tasks
from peftreview.errors import CompatibilityError, FormatError

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def base():
    return mdl.init_weights(mdl.ModelConfig(), seed=0)


def _random_prompts(n, seed, vocab=512):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, vocab, size=int(rng.integers(2, 48))) for _ in range(n)]


def test_c01_parameter_accounting(capsys):
    t0 = time.perf_counter()
    code = cli.main(["inspect", "--paper-scale"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    assert code == 0 and elapsed < 1.0
    rows = {(m, h): (n, mib) for m, h, n, mib in cli.scale_table()}
    assert rows[("lora", "r=8")][0] == 4_194_304
    assert rows[("lora", "r=16")][0] == 8_388_608
    assert rows[("prefix", "K=10 L=30")][0] == 1_229_760
    for key, published in ((("lora", "r=8"), 8.0), (("lora", "r=16"), 16.0), (("prefix", "K=10 L=30"), 2.4)):
        assert abs(rows[key][1] - published) / published <= 0.05
    for text in ("4,194,304", "8,388,608", "1,229,760"):
        assert text in out


def test_c02_zero_init_equivalence(base):
    t0 = time.perf_counter()
    adapters = [peft.init_adapter("lora", base.config, seed=1), peft.init_adapter("prefix", base.config, seed=2)]
    for ids in _random_prompts(32, seed=3):
        ref = mdl.forward(base, ids).data
        for adapter in adapters:
            assert np.max(np.abs(mdl.forward(base, ids, adapter).data - ref)) == 0.0
    assert time.perf_counter() - t0 < 10


def test_c03_merge_equivalence(tokenizer, base):
    t0 = time.perf_counter()
    adapter = peft.init_adapter("lora", base.config, seed=4)
    cfg = pl.TrainConfig(epochs=100, batch_size=8, max_tokens=256, learning_rate=0.01, weight_decay=0.01,
                         max_steps=200, seed=4)
    res = pl.train_stage(base, adapter, pl.instruction_dataset_load(), cfg, tokenizer)
    assert res.steps == 200
    merged = peft.lora_merge(base, adapter)
    worst = max(float(np.max(np.abs(mdl.forward(merged, ids).data - mdl.forward(base, ids, adapter).data)))
                for ids in _random_prompts(16, seed=5))
    assert worst <= 1e-5
    assert time.perf_counter() - t0 < 120


def test_c04_gated_mass_invariant(tokenizer, base):
    adapter = peft.init_adapter("prefix", base.config, seed=6)
    data = pl.instruction_dataset_load()
    probe = pl.build_batch(data[:4], tokenizer, 256).tokens
    worst, checked = 0.0, 0

    def check(step, loss, a):
        nonlocal worst, checked
        trace = []
        mdl.forward(base, probe, a, trace=trace)
        for layer in trace:
            if layer["prefix_probs"] is None:
                continue
            total = layer["probs"].sum(-1) + layer["prefix_probs"].sum(-1)
            want = 1.0 + layer["gate"].astype(np.float64)[None, :, None]
            worst = max(worst, float(np.max(np.abs(total - want))))
            checked += 1

    cfg = pl.TrainConfig(epochs=100, batch_size=8, max_tokens=256, learning_rate=0.05, weight_decay=0.02,
                         max_steps=100, seed=6)
    pl.train_stage(base, adapter, data, cfg, tokenizer, callback=check)
    assert checked == 100 * base.config.n_layers
    assert max(float(np.max(np.abs(g.data))) for g in adapter.gates.values()) > 0.01
    assert worst <= 1e-5


def test_c05_gradient_correctness():
    t0 = time.perf_counter()
    cases = gradcheck.primitive_cases(np.random.default_rng(7))
    errors = {name: gradcheck.check(build, arrays) for name, (build, arrays) in cases.items()}
    errors["two_layer_model"] = gradcheck.two_layer_model_error()
    assert max(errors.values()) <= 1e-5, errors
    assert time.perf_counter() - t0 < 60


@pytest.mark.parametrize("kind", ["lora", "prefix"])
def test_c06_frozen_base(tokenizer, base, kind):
    before = base.digests()
    adapter = peft.init_adapter(kind, base.config, seed=7)
    cfg = pl.TrainConfig(epochs=10, batch_size=8, max_tokens=256, learning_rate=0.05, max_steps=20, seed=7)
    pl.train_stage(base, adapter, pl.instruction_dataset_load(), cfg, tokenizer)
    task = [tasks.to_instruction(e) for e in tasks.load_task_dataset(task="cr")]
    pl.train_stage(base, adapter, task, pl.TrainConfig(stage="task", batch_size=8, max_tokens=256,
                                                       learning_rate=0.05, max_steps=5), tokenizer)
    assert base.digests() == before


MEMORIZE = pl.TrainConfig(epochs=500, batch_size=20, max_tokens=256, learning_rate=0.03, weight_decay=0.01,
                          max_steps=500, schedule="cosine", warmup_steps=20, seed=0)


def _exact_matches(weights, adapter, examples, tokenizer):
    hits = 0
    for ex in examples:
        r = pl.render_prompt(ex, tokenizer)
        n_out = len(r.token_ids) - r.output_start + 1
        seq = mdl.generate(weights, list(r.token_ids[:r.output_start]), n_out, adapter, eos_id=tokenizer.eos_id)
        gen = seq[r.output_start:]
        hits += bool(gen) and gen[-1] == tokenizer.eos_id and tokenizer.decode(gen[:-1]) == ex.output
    return hits


def test_c07_dual_stage_pipeline(tokenizer, base, tmp_path):
    t0 = time.perf_counter()
    before = base.digests()
    stage1_data = pl.instruction_dataset_load(mix="pl")[:20]
    stage1 = peft.init_adapter("lora", base.config, seed=0, rank=16, alpha=32)
    res = pl.train_stage(base, stage1, stage1_data, MEMORIZE, tokenizer)
    assert res.steps == 500
    hits = _exact_matches(base, stage1, stage1_data, tokenizer)
    print(f"memorization: {hits}/20 exact greedy reproductions")
    assert hits >= 19

    path = tmp_path / "stage1.bin"
    peft.save_adapter(stage1, path)
    stage2_cfg = pl.TrainConfig(stage="task", epochs=5, batch_size=8, max_tokens=256, learning_rate=0.003,
                                weight_decay=0.01, max_steps=10, seed=1)
    for task in ("rnp", "rcg", "cr"):
        adapter = peft.load_adapter(path, base.config)
        data = tasks.load_task_dataset(task=task)
        out = pl.train_stage(base, adapter, [tasks.to_instruction(e) for e in data], stage2_cfg, tokenizer)
        assert out.steps == 10 and all(np.isfinite(out.losses))
        report = tasks.evaluate(base, adapter, data, task, tokenizer, max_new_tokens=24)
        summary = report.summary()
        key = "f1" if task == "rnp" else "bleu4"
        assert summary[key] is not None and 0.0 <= summary[key] <= 1.0
        tasks.write_report(report, tmp_path / f"{task}.jsonl")
    assert base.digests() == before
    assert time.perf_counter() - t0 < 600


def test_c08_metric_conformance():
    s = "return the sum of the two values".split()
    assert metrics.bleu4(s, s) == 1.0
    assert metrics.bleu4("x y z".split(), s) == 0.0
    assert metrics.bleu4(BLEU_GOLDEN_HYP, BLEU_GOLDEN_REF) == BLEU_GOLDEN_VALUE
    rng = np.random.default_rng(8)
    for _ in range(100):
        n = int(rng.integers(1, 64))
        pred, gold = rng.integers(0, 2, n), rng.integers(0, 2, n)
        tp, fp, fn, tn = confusion(pred, gold)
        m = metrics.prf1(pred, gold)
        assert (m.tp, m.fp, m.fn, m.tn) == (tp, fp, fn, tn)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        assert (m.precision, m.recall) == (p, r)
        assert m.f1 == pytest.approx(2 * p * r / (p + r) if p + r else 0.0, abs=1e-15)
    scores, labels = rng.random(200).tolist(), rng.integers(0, 2, 200).tolist()
    rows = metrics.threshold_sweep(scores, labels)
    positives = [sum(s >= t for s in scores) for t, *_ in rows]
    assert all(a >= b for a, b in zip(positives, positives[1:]))
    at_half = metrics.prf1([s >= 0.5 for s in scores], labels)
    assert [r for r in rows if r[0] == 0.5] == [(0.5, at_half.precision, at_half.recall, at_half.f1)]


@pytest.mark.parametrize("kind", ["lora", "prefix"])
def test_c09_plugin_round_trip(base, tmp_path, kind):
    adapter = peft.init_adapter(kind, base.config, seed=9)
    rng = np.random.default_rng(9)
    for p in adapter.parameters():
        p.data[...] = rng.normal(0, 0.1, size=p.shape)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    peft.save_adapter(adapter, a)
    peft.save_adapter(peft.load_adapter(a, base.config), b)
    assert a.read_bytes() == b.read_bytes()
    blob = a.read_bytes()
    for pos in (3, 40, len(blob) // 2, len(blob) - 2):
        bad = bytearray(blob)
        bad[pos] ^= 0x10
        b.write_bytes(bytes(bad))
        with pytest.raises(FormatError):
            peft.load_adapter(b, base.config)
    b.write_bytes(blob[:-100])
    with pytest.raises(FormatError):
        peft.load_adapter(b, base.config)
    with pytest.raises(CompatibilityError):
        peft.load_adapter(a, mdl.ModelConfig(dim=32))


def _full_run(root):
    w = root / "w"
    steps = [
        ["init", "--out", w, "--seed", 3],
        ["train", "--base", w / "base.bin", "--stage", "instruct", "--mix", "pl-nl", "--max-steps", 6,
         "--lr", 0.01, "--seed", 3, "--out", root / "s1.bin"],
        ["train", "--base", w / "base.bin", "--stage", "task", "--task", "rnp", "--from-adapter", root / "s1.bin",
         "--max-steps", 4, "--seed", 3, "--out", root / "rnp.bin"],
        ["evaluate", "--base", w / "base.bin", "--adapter", root / "rnp.bin", "--task", "rnp",
         "--report", root / "rnp.jsonl"],
        ["train", "--base", w / "base.bin", "--method", "prefix", "--stage", "task", "--task", "rcg",
         "--no-instruction-stage", "--max-steps", 4, "--seed", 3, "--out", root / "rcg.bin"],
        ["evaluate", "--base", w / "base.bin", "--adapter", root / "rcg.bin", "--task", "rcg",
         "--max-new-tokens", 8, "--report", root / "rcg.jsonl"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0
    names = ["w/base.bin", "w/tokenizer.json", "s1.bin", "s1.loss.jsonl", "rnp.bin", "rnp.loss.jsonl",
             "rnp.jsonl", "rnp.curve.jsonl", "rcg.bin", "rcg.loss.jsonl", "rcg.jsonl"]
    return {n: (root / n).read_bytes() for n in names}


def test_c10_determinism(tmp_path):
    first = _full_run(tmp_path / "one")
    second = _full_run(tmp_path / "two")
    for name in first:
        assert first[name] == second[name], name
