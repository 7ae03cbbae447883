"""Command-line entry point: init, train, evaluate, predict, merge, inspect.

Exit codes: 0 success, 1 validation/config error, 2 data format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import model as mdl
from . import peft, pipeline, tasks
from .errors import ConfigError, ReviewerError, ValidationError
from .tokenizer import Tokenizer

TASK_CHOICES = ("rnp", "rcg", "cr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _note(msg):
    print(msg, file=sys.stderr)


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _tokenizer_path(args):
    if args.tokenizer:
        return args.tokenizer
    return str(Path(args.base).with_name("tokenizer.json"))


def _load_base(args):
    weights = mdl.load_weights(args.base)
    tok = Tokenizer.load(_tokenizer_path(args))
    if tok.vocab_size > weights.config.vocab_size:
        raise ConfigError(f"tokenizer has {tok.vocab_size} ids but the model vocabulary is {weights.config.vocab_size}")
    return weights, tok


def _load_adapter(path, config):
    return None if path is None else peft.load_adapter(path, config)


def _adapter_method(adapter):
    return None if adapter is None else adapter.kind


# ---------------------------------------------------------------------------
# init


def cmd_init(args):
    cfg = mdl.ModelConfig(vocab_size=args.vocab_size, dim=args.dim, n_layers=args.layers, n_heads=args.heads,
                          max_seq_len=args.max_seq_len, ffn_hidden=args.ffn_hidden)
    tok = Tokenizer.train(tasks.bundled_corpus(), cfg.vocab_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights = mdl.init_weights(cfg, seed=args.seed)
    base_path, tok_path = out / "base.bin", out / "tokenizer.json"
    mdl.save_weights(weights, base_path)
    tok.save(tok_path)
    print(f"config: {json.dumps(cfg.to_dict(), sort_keys=True)}")
    print(f"config digest: {cfg.digest().hex()}")
    print(f"base weights: {base_path} ({cfg.n_params():,} params) sha256 {file_sha256(base_path)}")
    print(f"tokenizer: {tok_path} ({tok.vocab_size} tokens)")
    return 0


# ---------------------------------------------------------------------------
# train


def _hyper(args, config):
    if args.method == "lora":
        return {"rank": args.rank, "alpha": args.alpha}
    layers = args.prefix_layers if args.prefix_layers is not None else min(30, config.n_layers)
    return {"prefix_len": args.prefix_len, "prefix_layers": layers}


def _print_accounting(method, config, hyper, label):
    if method == "lora":
        acc = peft.accounting("lora", config, rank=hyper["rank"])
        desc = f"LoRA r={hyper['rank']}"
    else:
        acc = peft.accounting("prefix", config, prefix_len=hyper["prefix_len"], prefix_layers=hyper["prefix_layers"])
        desc = f"prefix K={hyper['prefix_len']} L={hyper['prefix_layers']}"
    s2 = acc["storage"][2]["MiB"]
    print(f"trainable params ({label}, {desc}): {acc['trainable']:,} (storage {s2:.2f} MiB at 2 bytes/param)")
    return acc["trainable"]


def _train_config(args, task):
    stage = args.stage
    if args.preset == "published":
        base = pipeline.TrainConfig.published(args.method, stage, task)
    else:
        base = pipeline.TrainConfig.desk(args.method, stage, task)
    published = pipeline.TrainConfig.published(args.method, stage, task)
    _note("published defaults: " + " ".join(f"{k}={v}" for k, v in asdict(published).items()))
    overrides = {}
    if args.config:
        overrides.update(pipeline.parse_config_file(args.config))
    cli = {"epochs": args.epochs, "batch_size": args.batch_size, "max_tokens": args.max_tokens,
           "learning_rate": args.lr, "weight_decay": args.weight_decay, "max_steps": args.max_steps,
           "schedule": args.schedule, "warmup_steps": args.warmup_steps}
    overrides.update({k: v for k, v in cli.items() if v is not None})
    overrides["seed"] = args.seed
    cfg = base.with_overrides(overrides)
    changed = {k: v for k, v in asdict(cfg).items() if asdict(published)[k] != v}
    if changed:
        _note("overrides: " + " ".join(f"{k}={v}" for k, v in changed.items()))
    return cfg


def cmd_train(args):
    task = args.task
    if args.stage == "task":
        if task is None:
            raise ConfigError("--stage task requires --task")
        if bool(args.from_adapter) == bool(args.no_instruction_stage):
            raise ConfigError("--stage task requires exactly one of --from-adapter or --no-instruction-stage")
        tasks.check_method_task(args.method, task)
    elif args.from_adapter:
        raise ConfigError("--from-adapter only applies to --stage task")

    if args.paper_scale:
        cfg = mdl.ModelConfig.full_scale()
        hyper = _hyper(args, cfg)
        if args.method == "prefix" and args.prefix_layers is None:
            hyper["prefix_layers"] = 30
        _print_accounting(args.method, cfg, hyper, "7B scale, analytic")
        return 0
    if not args.base or not args.out:
        raise ConfigError("train requires --base and --out")

    weights, tok = _load_base(args)
    cfg = weights.config
    hyper = _hyper(args, cfg)
    if args.from_adapter:
        adapter = peft.load_adapter(args.from_adapter, cfg)
        if adapter.kind != args.method:
            raise ConfigError(f"--from-adapter holds a {adapter.kind} adapter but --method is {args.method}")
        if adapter.kind == "lora":
            hyper = {"rank": adapter.rank, "alpha": adapter.alpha}
        else:
            hyper = {"prefix_len": adapter.prefix_len, "prefix_layers": adapter.n_prefix_layers}
    else:
        adapter = peft.init_adapter(args.method, cfg, seed=args.seed, **hyper)
    n = _print_accounting(args.method, cfg, hyper, "this model")
    if n != peft.count_trainable(adapter):
        raise ConfigError("adapter does not match the requested hyperparameters")

    if args.stage == "instruct":
        data = pipeline.instruction_dataset_load(args.data, args.mix, args.nl_data)
    else:
        data = [tasks.to_instruction(ex) for ex in tasks.load_task_dataset(args.data, task, args.lang_label)]
    tcfg = _train_config(args, task)
    before = weights.digests()
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported as a NumericError
        result = pipeline.train_stage(weights, adapter, data, tcfg, tok)
    if weights.digests() != before:
        raise ReviewerError("base weights changed during adapter training")
    size = peft.save_adapter(adapter, args.out)
    log_path = args.loss_log or str(Path(args.out).with_suffix(".loss.jsonl"))
    with open(log_path, "w", encoding="utf-8") as fh:
        for step, loss in enumerate(result.losses, 1):
            fh.write(json.dumps({"step": step, "loss": loss}) + "\n")
    for idx, why in result.rejected:
        _note(f"rejected example {idx}: {why}")
    last = f"{result.losses[-1]:.4f}" if result.losses else "n/a"
    print(f"trained {result.steps} steps on {len(data)} examples; final loss {last}")
    print(f"adapter: {args.out} ({size} bytes) sha256 {file_sha256(args.out)}")
    print(f"loss log: {log_path}")
    return 0


# ---------------------------------------------------------------------------
# evaluate / predict


def cmd_evaluate(args):
    weights, tok = _load_base(args)
    adapter = _load_adapter(args.adapter, weights.config)
    tasks.check_method_task(_adapter_method(adapter), args.task)
    data = tasks.load_task_dataset(args.data, args.task, args.lang_label)
    report = tasks.evaluate(weights, adapter, data, args.task, tok, threshold=args.threshold,
                            max_new_tokens=args.max_new_tokens)
    written = tasks.write_report(report, args.report)
    print(json.dumps(report.summary() if report.task != "necessity" else
                     {k: v for k, v in report.summary().items() if k != "threshold_curve"}, sort_keys=True))
    for p in written:
        print(f"wrote {p}")
    return 0


def _query(task, rec, placement, lineno):
    task = tasks.canonical_task(task)
    if not rec.get("code"):
        raise ValidationError(f"input line {lineno}: missing code")
    if task == "refinement" and not rec.get("comment"):
        raise ValidationError(f"input line {lineno}: refinement needs a comment")
    instruction, inp = tasks.task_prompt(task, rec["code"], rec.get("comment"), rec.get("lang"), placement)
    return tasks.Query(instruction, inp)


def cmd_predict(args):
    weights, tok = _load_base(args)
    adapter = _load_adapter(args.adapter, weights.config)
    tasks.check_method_task(_adapter_method(adapter), args.task)
    task = tasks.canonical_task(args.task)
    fh = sys.stdin if args.input in (None, "-") else open(args.input, encoding="utf-8")
    try:
        lines = fh.read().splitlines()
    finally:
        if fh is not sys.stdin:
            fh.close()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            from .errors import FormatError
            raise FormatError(f"input line {lineno}: invalid JSON ({exc.msg})") from exc
        q = _query(task, rec, args.lang_label, lineno)
        if task == "necessity":
            s = tasks.necessity_score(weights, adapter, q, tok, args.threshold)
            out = {"line": lineno, "label": "yes" if s.predicted else "no", "p_positive": s.p_positive,
                   "threshold": s.threshold}
        else:
            out = {"line": lineno, "output": tasks.generate_response(weights, adapter, q, tok, args.max_new_tokens)}
        print(json.dumps(out, ensure_ascii=False, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# merge / inspect


def cmd_merge(args):
    weights = mdl.load_weights(args.base)
    kind, _, _, _ = peft.read_adapter_file(args.adapter)
    if kind != "lora":
        raise ConfigError(f"only LoRA adapters can be merged; {args.adapter} is a {kind} adapter "
                          "(gated prompts have no weight-merge form)")
    adapter = peft.load_adapter(args.adapter, weights.config)
    merged = peft.lora_merge(weights, adapter)
    mdl.save_weights(merged, args.out)
    print(f"merged {len(adapter.entries)} matrices into {args.out} sha256 {file_sha256(args.out)}")
    return 0


def scale_table(prefix_len=10, prefix_layers=30, ranks=(8, 16)):
    """Rows of (method, hyper, trainable, MiB at 2 bytes/param), analytic only."""
    cfg = mdl.ModelConfig.full_scale()
    rows = []
    acc = peft.accounting("prefix", cfg, prefix_len=prefix_len, prefix_layers=prefix_layers)
    rows.append(("prefix", f"K={prefix_len} L={prefix_layers}", acc["trainable"], acc["storage"][2]["MiB"]))
    for r in ranks:
        acc = peft.accounting("lora", cfg, rank=r)
        rows.append(("lora", f"r={r}", acc["trainable"], acc["storage"][2]["MiB"]))
    return rows


def cmd_inspect(args):
    if args.paper_scale:
        cfg = mdl.ModelConfig.full_scale()
        ranks = sorted({8, 16, args.rank})
        print(f"7B-scale base: {cfg.n_layers} layers, dim {cfg.dim}, {cfg.n_params():,} params")
        print(f"{'method':<8}{'hyper':<14}{'trainable':>14}{'storage':>12}")
        for method, hyper, n, mib in scale_table(args.prefix_len, args.prefix_layers or 30, ranks):
            print(f"{method:<8}{hyper:<14}{n:>14,}{mib:>9.2f} MiB")
        if not args.adapter:
            return 0
    if not args.adapter:
        raise ConfigError("inspect needs an adapter path or --paper-scale")
    kind, digest, meta, tensors = peft.read_adapter_file(args.adapter)
    n = int(sum(a.size for a in tensors.values()))
    size = Path(args.adapter).stat().st_size
    print(f"kind: {kind}")
    if kind == "lora":
        rank = int(meta["rank"])
        shapes = [a.shape for name, a in tensors.items() if name.endswith("lora_down")]
        formula = sum(rank * (d + d) for d, _ in shapes)
        targets = sorted({name.split(".")[3] for name in tensors})
        layers = sorted({int(name.split(".")[1]) for name in tensors})
        print(f"rank: {rank}  alpha: {meta['alpha']:g}  targets: {','.join(targets)}  layers: {len(layers)}")
    else:
        prompts = [a for name, a in tensors.items() if name.endswith("prompt")]
        gates = [a for name, a in tensors.items() if name.endswith("gate")]
        k, c = prompts[0].shape
        formula = len(prompts) * k * c + sum(g.size for g in gates)
        layers = sorted({int(name.split(".")[1]) for name in tensors})
        print(f"prefix_len: {k}  prefix_layers: {len(prompts)} ({layers[0]}..{layers[-1]})  "
              f"gates: {'per head' if meta['per_head_gates'] else 'per layer'}  "
              f"rotate_prefix: {bool(meta['rotate_prefix'])}")
    if formula != n:
        raise ConfigError(f"tensor count {n} disagrees with the parameter formula {formula}")
    print(f"trainable params: {n:,}")
    print(f"file size: {size} bytes (payload {4 * n} bytes)")
    print(f"config digest: {digest.hex()}")
    print(f"sha256: {file_sha256(args.adapter)}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="peftreview", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--base", help="base-model checkpoint")
        sp.add_argument("--tokenizer", help="tokenizer file (default: tokenizer.json next to --base)")

    def adapter_hyper(sp):
        sp.add_argument("--method", choices=("lora", "prefix"), default="lora")
        sp.add_argument("--rank", type=int, default=16)
        sp.add_argument("--alpha", type=float, default=16.0)
        sp.add_argument("--prefix-len", type=int, default=10)
        sp.add_argument("--prefix-layers", type=int, default=None)
        sp.add_argument("--paper-scale", action="store_true", help="analytic accounting at 7B scale only")

    sp = sub.add_parser("init", help="write a seeded toy base model and tokenizer")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--vocab-size", type=int, default=512)
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--layers", type=int, default=4)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--ffn-hidden", type=int, default=172)
    sp.add_argument("--max-seq-len", type=int, default=256)
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("train", help="run one tuning stage")
    common(sp)
    adapter_hyper(sp)
    sp.add_argument("--stage", choices=("instruct", "task"), default="instruct")
    sp.add_argument("--task", choices=TASK_CHOICES)
    sp.add_argument("--mix", choices=("pl", "pl-nl"), default="pl")
    sp.add_argument("--data", help="dataset file (default: bundled fixture)")
    sp.add_argument("--nl-data", help="natural-language instruction file for --mix pl-nl")
    sp.add_argument("--from-adapter", help="stage-one adapter to continue from")
    sp.add_argument("--no-instruction-stage", action="store_true")
    sp.add_argument("--lang-label", choices=tasks.PLACEMENTS, default="none")
    sp.add_argument("--config", help="key = value training config file")
    sp.add_argument("--preset", choices=("desk", "published"), default="desk")
    sp.add_argument("--lr", type=float)
    sp.add_argument("--weight-decay", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--max-tokens", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--schedule", choices=("constant", "cosine"))
    sp.add_argument("--warmup-steps", type=int)
    sp.add_argument("--out", help="adapter output path")
    sp.add_argument("--loss-log", help="loss log path (default: <out>.loss.jsonl)")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "score a dataset and write reports"),
                                 ("predict", cmd_predict, "answer records from a file or stdin")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--adapter")
        sp.add_argument("--task", choices=TASK_CHOICES, required=True)
        sp.add_argument("--threshold", type=float, default=0.5)
        sp.add_argument("--lang-label", choices=tasks.PLACEMENTS, default="none")
        sp.add_argument("--max-new-tokens", type=int, default=64)
        if name == "evaluate":
            sp.add_argument("--data", help="task dataset (default: bundled fixture)")
            sp.add_argument("--report", required=True)
        else:
            sp.add_argument("--input", help="JSONL records (default: stdin)")
        sp.set_defaults(func=func)

    sp = sub.add_parser("merge", help="fold a LoRA adapter into the base weights")
    sp.add_argument("--base", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_merge)

    sp = sub.add_parser("inspect", help="summarise an adapter file or the 7B-scale accounting")
    sp.add_argument("adapter", nargs="?")
    sp.add_argument("--paper-scale", action="store_true")
    sp.add_argument("--rank", type=int, default=16)
    sp.add_argument("--prefix-len", type=int, default=10)
    sp.add_argument("--prefix-layers", type=int, default=None)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code
    if getattr(args, "base", "x") is None and args.command in ("evaluate", "predict"):
        parser.error("--base is required")
    try:
        return args.func(args)
    except ReviewerError as exc:
        step = getattr(exc, "step", None)
        where = f" (step {step})" if step is not None else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
