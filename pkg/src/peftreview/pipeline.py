"""Instruction records, prompt rendering, batching and the tuning loop.

Training is two-stage: an instruction stage on generic
``{instruction, input, output}`` records, then a task stage on one code
review task, typically starting from the instruction-stage adapter. Both
stages use the same prompt template and the same loop; only the data,
epochs and starting adapter differ.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import model as mdl
from . import numerics as nx
from .errors import ConfigError, FormatError, NumericError, ValidationError

log = logging.getLogger(__name__)

IGNORE_INDEX = -100


@dataclass(frozen=True)
class InstructionExample:
    instruction: str
    output: str
    input: str = ""

    def __post_init__(self):
        if not self.instruction or not self.instruction.strip():
            raise ValidationError("instruction must be non-empty")
        if not self.output:
            raise ValidationError("output must be non-empty")
        if self.input is None:
            object.__setattr__(self, "input", "")


@dataclass(frozen=True)
class PromptTemplate:
    """Alpaca-style wording; ``{instruction}`` and ``{input}`` are filled in."""

    with_input: str = (
        "Below is an instruction that describes a task, paired with an input that provides further "
        "context. Write a response that appropriately completes the request.\n\n"
        "### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n"
    )
    no_input: str = (
        "Below is an instruction that describes a task. Write a response that appropriately "
        "completes the request.\n\n### Instruction:\n{instruction}\n\n### Response:\n"
    )

    def pieces(self, example):
        """Split the prompt into ``(head, input, tail)`` around the input text."""
        if example.input:
            head, tail = self.with_input.split("{input}")
            return head.format(instruction=example.instruction), example.input, tail
        return self.no_input.format(instruction=example.instruction), "", ""


DEFAULT_TEMPLATE = PromptTemplate()


@dataclass(frozen=True)
class PromptRendering:
    prompt: str
    output: str
    full_text: str
    token_ids: tuple = ()
    output_start: int | None = None


def _encode_prompt(tokenizer, template, example, drop=0):
    head, body, tail = template.pieces(example)
    body_ids = tokenizer.encode(body)[drop:]
    return [tokenizer.bos_id] + tokenizer.encode(head) + body_ids + tokenizer.encode(tail)


def render_prompt(example, tokenizer=None, template=DEFAULT_TEMPLATE):
    """Render an example; with a tokenizer, also locate the response start.

    Token layout is ``[bos] + prompt + output``; ``output_start`` is the
    index of the first output token. Pieces are encoded separately so the
    boundary is exact.
    """
    if not isinstance(example, InstructionExample):
        raise ValidationError("render_prompt expects an InstructionExample")
    head, body, tail = template.pieces(example)
    prompt = head + body + tail
    if tokenizer is None:
        return PromptRendering(prompt, example.output, prompt + example.output)
    ids = _encode_prompt(tokenizer, template, example)
    start = len(ids)
    ids = ids + tokenizer.encode(example.output)
    return PromptRendering(prompt, example.output, prompt + example.output, tuple(ids), start)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    tokens: np.ndarray  # (B, T) input ids, right padded
    labels: np.ndarray  # (B, T) next-token targets, IGNORE_INDEX off the response
    mask: np.ndarray  # (B, T) True where the loss is taken
    index: list  # dataset index of each row
    rejected: list = field(default_factory=list)  # (dataset index, reason)

    @property
    def size(self):
        return self.tokens.shape[0]


def encode_example(example, tokenizer, max_tokens, template=DEFAULT_TEMPLATE):
    """Full training sequence ``[bos] prompt output [eos]`` and response start.

    Over-long sequences lose tokens from the left of the input text; the
    template, instruction and response are never cut.
    """
    out_ids = tokenizer.encode(example.output) + [tokenizer.eos_id]
    prompt = _encode_prompt(tokenizer, template, example)
    excess = len(prompt) + len(out_ids) - max_tokens
    if excess > 0:
        n_body = len(tokenizer.encode(template.pieces(example)[1]))
        if excess > n_body:
            raise ValidationError(
                f"response and template need {len(prompt) - n_body + len(out_ids)} tokens, over max_tokens {max_tokens}")
        prompt = _encode_prompt(tokenizer, template, example, drop=excess)
    return prompt + out_ids, len(prompt)


def encode_prompt(example, tokenizer, max_tokens, template=DEFAULT_TEMPLATE, reserve=0):
    """Prompt ids (with bos) left-truncated in the input text to leave ``reserve`` slots."""
    prompt = _encode_prompt(tokenizer, template, example)
    excess = len(prompt) + reserve - max_tokens
    if excess > 0:
        n_body = len(tokenizer.encode(template.pieces(example)[1]))
        if excess > n_body:
            raise ValidationError(f"prompt needs {len(prompt) - n_body} tokens without its input, "
                                  f"over the {max_tokens - reserve} available")
        prompt = _encode_prompt(tokenizer, template, example, drop=excess)
    return prompt


def build_batch(examples, tokenizer, max_tokens, template=DEFAULT_TEMPLATE, index=None):
    """Right-padded inputs, shifted labels and the response-only loss mask.

    Examples that cannot fit are listed in ``rejected`` instead of raising;
    if every example is rejected a ValidationError is raised.
    """
    examples = list(examples)
    if not examples:
        raise ValidationError("build_batch needs at least one example")
    index = list(range(len(examples))) if index is None else list(index)
    seqs, starts, kept, rejected = [], [], [], []
    for i, ex in zip(index, examples):
        try:
            seq, start = encode_example(ex, tokenizer, max_tokens, template)
        except ValidationError as exc:
            rejected.append((i, str(exc)))
            continue
        seqs.append(seq)
        starts.append(start)
        kept.append(i)
    if not seqs:
        raise ValidationError(f"every example was rejected: {rejected}")
    t = max(len(s) for s in seqs) - 1
    tokens = np.full((len(seqs), t), tokenizer.pad_id, dtype=np.int64)
    labels = np.full((len(seqs), t), IGNORE_INDEX, dtype=np.int64)
    mask = np.zeros((len(seqs), t), dtype=bool)
    for r, (seq, start) in enumerate(zip(seqs, starts)):
        n = len(seq) - 1
        tokens[r, :n] = seq[:-1]
        # position j predicts seq[j + 1]; keep it when that token is in the response
        mask[r, start - 1:n] = True
        labels[r, :n] = np.where(mask[r, :n], seq[1:], IGNORE_INDEX)
    return Batch(tokens, labels, mask, kept, rejected)


def batch_loss(weights, adapter, batch):
    """Mean over examples of each example's mean response-token loss."""
    logits = mdl.forward(weights, batch.tokens, adapter)
    b, t, v = logits.shape
    nll = nx.cross_entropy(nx.reshape(logits, (b * t, v)), batch.labels.reshape(-1),
                           ignore_index=IGNORE_INDEX, reduction="none")
    counts = batch.mask.sum(axis=1, keepdims=True)
    w = np.where(batch.mask, 1.0 / (np.maximum(counts, 1) * b), 0.0).reshape(-1)
    return nx.sum(nx.mul(nll, nx.Tensor(w, dtype=weights.dtype)))


# ---------------------------------------------------------------------------
# configuration

PUBLISHED_LR = {"prefix": 0.009, "lora": 0.0003}
PUBLISHED_WD = {"prefix": 0.02, "lora": 0.01}
PUBLISHED_EPOCHS = {"rnp": 5, "rcg": 10, "cr": 10, "instruct": 3}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "instruct"
    epochs: int = 3
    batch_size: int = 64
    max_tokens: int = 2048
    learning_rate: float = 0.0003
    weight_decay: float = 0.01
    seed: int = 0
    max_steps: int = 0  # 0 means no cap beyond the epoch count
    schedule: str = "constant"  # or "cosine" (decay to zero over the run)
    warmup_steps: int = 0

    def __post_init__(self):
        if self.stage not in ("instruct", "task"):
            raise ConfigError(f"stage must be 'instruct' or 'task', got {self.stage!r}")
        for name in ("epochs", "batch_size", "max_tokens"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.max_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("learning_rate, weight_decay and max_steps must be non-negative")

    @classmethod
    def published(cls, method, stage="instruct", task=None, **overrides):
        """Published hyperparameters for a method/stage, then overrides."""
        if method not in PUBLISHED_LR:
            raise ConfigError(f"unknown method {method!r}")
        epochs = PUBLISHED_EPOCHS["instruct" if stage == "instruct" else (task or "cr")]
        base = cls(stage=stage, epochs=epochs, batch_size=64, max_tokens=2048,
                   learning_rate=PUBLISHED_LR[method], weight_decay=PUBLISHED_WD[method])
        return replace(base, **overrides)

    @classmethod
    def desk(cls, method, stage="instruct", task=None, **overrides):
        """Published values shrunk to toy scale: batch 8, 256-token context."""
        return cls.published(method, stage, task, **{"batch_size": 8, "max_tokens": 256, **overrides})

    def with_overrides(self, values):
        return replace(self, **values)


def parse_config_file(path):
    """Read a flat ``key = value`` file into TrainConfig override values."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if types[key] in ("int", int):
                out[key] = int(value)
            elif types[key] in ("float", float):
                out[key] = float(value)
            else:
                out[key] = value
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return out


# ---------------------------------------------------------------------------
# datasets


def data_path(name):
    return Path(str(resources.files("peftreview") / "data" / name))


def read_jsonl(path, required=()):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: record must be an object")
            missing = [k for k in required if k not in rec]
            if missing:
                raise FormatError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            rows.append((lineno, rec))
    return rows


def load_instructions(path):
    out = []
    for lineno, rec in read_jsonl(path, ("instruction", "output")):
        try:
            out.append(InstructionExample(rec["instruction"], rec["output"], rec.get("input") or ""))
        except ValidationError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def instruction_dataset_load(path=None, mix="pl", nl_path=None):
    """Instruction records for stage one.

    ``mix="pl"`` reads the code-domain file only; ``"pl-nl"`` appends the
    natural-language file after it. Defaults are the bundled fixtures.
    """
    if mix not in ("pl", "pl-nl"):
        raise ConfigError(f"mix must be 'pl' or 'pl-nl', got {mix!r}")
    data = load_instructions(path or data_path("instruct_pl.jsonl"))
    if mix == "pl-nl":
        data += load_instructions(nl_path or data_path("instruct_nl.jsonl"))
    return data


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    adapter: object
    losses: list
    steps: int
    rejected: list = field(default_factory=list)


def plan_batches(n, config):
    """Deterministic list of index batches for the whole run."""
    rng = np.random.default_rng(config.seed)
    per_epoch = math.ceil(n / config.batch_size)
    order = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        order += [perm[i * config.batch_size:(i + 1) * config.batch_size] for i in range(per_epoch)]
    if config.max_steps:
        order = order[:config.max_steps]
    return order


def learning_rate_at(config, step, total):
    """Learning rate for 1-based ``step`` of ``total``."""
    lr = config.learning_rate
    if config.warmup_steps and step <= config.warmup_steps:
        return lr * step / config.warmup_steps
    if config.schedule == "cosine":
        span = max(total - config.warmup_steps, 1)
        progress = (step - config.warmup_steps - 1) / span
        return lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return lr


def train_stage(weights, adapter, dataset, config, tokenizer, template=DEFAULT_TEMPLATE, callback=None):
    """Tune ``adapter`` in place on ``dataset`` with AdamW; the base stays frozen.

    ``callback(step, loss, adapter)`` runs after every optimizer step.
    Raises NumericError (with the step index) on a non-finite loss.
    """
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("training dataset is empty")
    if not weights.frozen:
        raise ConfigError("base weights must be frozen for adapter training")
    adapter.check_compatible(weights.config)
    params = adapter.parameters()
    opt = nx.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    losses, rejected = [], {}
    batches = plan_batches(len(dataset), config)
    for step, idx in enumerate(batches, 1):
        try:
            batch = build_batch([dataset[i] for i in idx], tokenizer, config.max_tokens, template, index=idx)
        except ValidationError:
            for i in idx:
                rejected.setdefault(int(i), "too long")
            continue
        for i, why in batch.rejected:
            rejected.setdefault(int(i), why)
        opt.state.learning_rate = learning_rate_at(config, step, len(batches))
        opt.zero_grad()
        loss = batch_loss(weights, adapter, batch)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step}", step=step)
        nx.backward(loss)
        opt.step()
        losses.append(value)
        if callback is not None:
            callback(step, value, adapter)
    log.debug("trained %d steps, final loss %.4f", len(losses), losses[-1] if losses else float("nan"))
    return TrainResult(adapter, losses, len(losses), sorted(rejected.items()))


def train_tokenizer_corpus(instructions, template=DEFAULT_TEMPLATE):
    """Rendered texts used to learn the tokenizer merges."""
    return [render_prompt(ex, template=template).full_text for ex in instructions]
