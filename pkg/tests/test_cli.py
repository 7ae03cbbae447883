import json

import pytest

from peftreview import cli, peft
from peftreview import model as mdl


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["init", "--out", str(d / "w")]) == 0
    return d


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_init_writes_base_and_tokenizer(workdir):
    base = mdl.load_weights(workdir / "w" / "base.bin")
    assert base.config == mdl.ModelConfig()
    assert (workdir / "w" / "tokenizer.json").exists()


def test_inspect_full_scale_accounting(capsys):
    code, out, _ = run(capsys, "inspect", "--paper-scale")
    assert code == 0
    assert "1,229,760" in out and "4,194,304" in out and "8,388,608" in out
    assert "16.00 MiB" in out and "8.00 MiB" in out


def test_train_scale_flag_is_analytic(capsys):
    code, out, _ = run(capsys, "train", "--paper-scale", "--method", "prefix")
    assert code == 0 and "1,229,760" in out
    code, out, _ = run(capsys, "train", "--paper-scale", "--rank", "8")
    assert code == 0 and "4,194,304" in out


def test_two_stage_train_evaluate_predict_merge(workdir, capsys):
    base = workdir / "w" / "base.bin"
    s1, s2 = workdir / "s1.bin", workdir / "s2.bin"
    code, out, err = run(capsys, "train", "--base", base, "--rank", 4, "--max-steps", 2, "--lr", 0.01,
                         "--out", s1)
    assert code == 0, err
    assert "published defaults" in err and "learning_rate=0.01" in err.split("overrides:")[1]
    log = [json.loads(line) for line in (workdir / "s1.loss.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2]

    code, _, err = run(capsys, "train", "--base", base, "--stage", "task", "--task", "rnp", "--from-adapter", s1,
                       "--max-steps", 2, "--out", s2, "--lang-label", "input")
    assert code == 0, err
    code, out, _ = run(capsys, "inspect", s2)
    assert code == 0 and "rank: 4" in out and "trainable params: 4,096" in out

    report = workdir / "rnp.jsonl"
    code, out, _ = run(capsys, "evaluate", "--base", base, "--adapter", s2, "--task", "rnp", "--report", report)
    assert code == 0 and (workdir / "rnp.curve.jsonl").exists()

    inp = workdir / "in.jsonl"
    inp.write_text('{"code": "x = 1"}\n{"code": "y = 2", "lang": "python"}\n')
    code, out, _ = run(capsys, "predict", "--base", base, "--adapter", s2, "--task", "rnp", "--input", inp)
    rows = [json.loads(line) for line in out.splitlines()]
    assert code == 0 and len(rows) == 2 and rows[0]["label"] in ("yes", "no") and 0 <= rows[0]["p_positive"] <= 1

    merged = workdir / "merged.bin"
    code, _, _ = run(capsys, "merge", "--base", base, "--adapter", s2, "--out", merged)
    assert code == 0
    assert mdl.load_weights(merged).config == mdl.ModelConfig()


def test_generation_predict(workdir, capsys):
    base = workdir / "w" / "base.bin"
    inp = workdir / "cr.jsonl"
    inp.write_text('{"code": "x=1", "comment": "Add spaces."}\n')
    code, out, _ = run(capsys, "predict", "--base", base, "--task", "cr", "--input", inp, "--max-new-tokens", 3)
    assert code == 0 and "output" in json.loads(out)


def test_usage_and_validation_errors_exit_1(workdir, capsys):
    base = workdir / "w" / "base.bin"
    assert run(capsys, "train", "--bogus")[0] == 1
    assert run(capsys, "train", "--base", base, "--stage", "task", "--task", "rcg", "--out", workdir / "x.bin")[0] == 1
    code, _, err = run(capsys, "train", "--base", base, "--stage", "task", "--task", "rnp", "--method", "prefix",
                       "--no-instruction-stage", "--out", workdir / "x.bin")
    assert code == 1 and "prefix" in err
    assert run(capsys, "init", "--out", workdir / "v", "--vocab-size", 100)[0] == 1
    prefix = workdir / "p.bin"
    peft.save_adapter(peft.init_adapter("prefix", mdl.ModelConfig()), prefix)
    code, _, err = run(capsys, "merge", "--base", base, "--adapter", prefix, "--out", workdir / "m.bin")
    assert code == 1 and "LoRA" in err


def test_format_errors_exit_2(workdir, capsys):
    bad = workdir / "bad.bin"
    bad.write_bytes(b"PEFT" + b"\0" * 60)
    assert run(capsys, "inspect", bad)[0] == 2
    data = workdir / "bad.jsonl"
    data.write_text("{not json\n")
    code, _, err = run(capsys, "train", "--base", workdir / "w" / "base.bin", "--data", data,
                       "--out", workdir / "y.bin")
    assert code == 2 and ":1:" in err


def test_nan_exits_3(workdir, capsys):
    code, _, err = run(capsys, "train", "--base", workdir / "w" / "base.bin", "--lr", "1e30", "--max-steps", 3,
                       "--out", workdir / "nan.bin")
    assert code == 3 and "step" in err
