"""The three code review tasks, necessity scoring and evaluation reports.

=============  ==========  ===========
task           input       output
=============  ==========  ===========
necessity      code        yes / no
comment_gen    code        comment
refinement     code, NL    code
=============  ==========  ===========

Records on disk use the short names ``rnp``, ``rcg`` and ``cr``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from . import model as mdl
from .errors import ConfigError, ValidationError
from .pipeline import (DEFAULT_TEMPLATE, InstructionExample, data_path, encode_prompt, instruction_dataset_load,
                       read_jsonl, render_prompt, train_tokenizer_corpus)

TASKS = ("necessity", "comment_gen", "refinement")
SHORT = {"necessity": "rnp", "comment_gen": "rcg", "refinement": "cr"}
_ALIASES = {**{v: k for k, v in SHORT.items()}, **{k: k for k in TASKS}}
PLACEMENTS = ("none", "instruction", "input")

INSTRUCTIONS = {
    "necessity": "Determine whether the provided diff hunk requires a code review. Respond with either 'yes' or 'no'.",
    "comment_gen": "Review the given code and provide a constructive code review comment.",
    "refinement": "Refine the given code according to the code review comment.",
}


def canonical_task(name):
    try:
        return _ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; expected one of {sorted(_ALIASES)}") from None


def check_method_task(method, task):
    """Prefix tuning is not offered for necessity prediction."""
    if method == "prefix" and canonical_task(task) == "necessity":
        raise ConfigError("prefix tuning is not supported for review necessity prediction (rnp); "
                          "its rigid prompt structure does not suit classification - use --method lora")


@dataclass(frozen=True)
class ReviewExample:
    task: str
    code: str
    comment: str | None = None
    label: int | None = None
    target: str | None = None
    lang_label: str | None = None
    lang_label_placement: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "task", canonical_task(self.task))
        if not self.code:
            raise ValidationError("code must be non-empty")
        if self.lang_label_placement not in PLACEMENTS:
            raise ValidationError(f"lang_label_placement must be one of {PLACEMENTS}")
        if self.task == "necessity":
            if self.label not in (0, 1, True, False):
                raise ValidationError("necessity examples need a 0/1 label")
        elif self.task == "comment_gen":
            if not self.comment:
                raise ValidationError("comment generation examples need a target comment")
        else:
            if not self.comment:
                raise ValidationError("refinement examples need a review comment as input")
            if not self.target:
                raise ValidationError("refinement examples need the refined code as target")

    @property
    def reference(self):
        if self.task == "necessity":
            return "yes" if self.label else "no"
        return self.comment if self.task == "comment_gen" else self.target


def lang_prefix(lang):
    return f"Language: {lang}\n"


@dataclass(frozen=True)
class Query:
    """A prompt without a known answer, used for prediction."""

    instruction: str
    input: str = ""


def task_prompt(task, code, comment=None, lang=None, placement="none"):
    """``(instruction, input)`` for one review record."""
    task = canonical_task(task)
    if placement not in PLACEMENTS:
        raise ValidationError(f"lang label placement must be one of {PLACEMENTS}")
    instruction = INSTRUCTIONS[task]
    if task == "refinement":
        inp = f"Code:\n{code}\n\nReview comment:\n{comment}"
    else:
        inp = code
    if placement != "none" and lang:
        if placement == "instruction":
            instruction = lang_prefix(lang) + instruction
        else:
            inp = lang_prefix(lang) + inp
    return instruction, inp


def to_instruction(example, placement=None):
    """Map a review record to the shared ``{instruction, input, output}`` form."""
    placement = example.lang_label_placement if placement is None else placement
    instruction, inp = task_prompt(example.task, example.code, example.comment, example.lang_label, placement)
    return InstructionExample(instruction, example.reference, inp)


def _as_prompt(example):
    return to_instruction(example) if isinstance(example, ReviewExample) else example


def load_task_dataset(path=None, task=None, placement="none"):
    """Read review records (``task, code, comment, label, lang[, target]``).

    With ``task`` given, every record must belong to it; ``path=None``
    loads the bundled fixture for that task.
    """
    if path is None:
        if task is None:
            raise ConfigError("load_task_dataset needs a path or a task")
        path = data_path(f"task_{SHORT[canonical_task(task)]}.jsonl")
    want = canonical_task(task) if task else None
    out = []
    for lineno, rec in read_jsonl(path, ("task", "code", "comment", "label", "lang")):
        try:
            ex = ReviewExample(rec["task"], rec["code"], rec["comment"], rec["label"], rec.get("target"),
                               rec["lang"], placement)
        except (ValidationError, ConfigError) as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from exc
        if want and ex.task != want:
            raise ValidationError(f"{path}:{lineno}: record is for task {SHORT[ex.task]}, expected {SHORT[want]}")
        out.append(ex)
    return out


def bundled_corpus():
    """Rendered texts of every bundled fixture, for training the tokenizer."""
    texts = train_tokenizer_corpus(instruction_dataset_load(mix="pl-nl"))
    for task in TASKS:
        for placement in PLACEMENTS:
            for ex in load_task_dataset(task=task, placement=placement):
                texts.append(render_prompt(to_instruction(ex)).full_text)
    return texts


# ---------------------------------------------------------------------------
# necessity scoring


@dataclass(frozen=True)
class NecessityScore:
    p_positive: float
    threshold: float
    predicted: int


def label_logprobs(weights, adapter, example, tokenizer, template=DEFAULT_TEMPLATE):
    """Log-probabilities of the yes/no tokens at the first response position."""
    inst = _as_prompt(example)
    ids = encode_prompt(inst, tokenizer, weights.config.max_seq_len, template)
    lp = mdl.token_logprobs(weights, np.asarray(ids, dtype=np.int64), adapter)[-1]
    return float(lp[tokenizer.label_ids["yes"]]), float(lp[tokenizer.label_ids["no"]])


def p_positive_from_logprobs(lp_yes, lp_no):
    """``P(yes) / (P(yes) + P(no))``, computed stably."""
    d = lp_no - lp_yes
    if d >= 0:
        e = math.exp(-d)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(d))


def classify(p_positive, threshold):
    return NecessityScore(p_positive, threshold, int(p_positive >= threshold))


def necessity_score(weights, adapter, example, tokenizer, threshold=0.5, template=DEFAULT_TEMPLATE):
    lp_yes, lp_no = label_logprobs(weights, adapter, example, tokenizer, template)
    return classify(p_positive_from_logprobs(lp_yes, lp_no), threshold)


# ---------------------------------------------------------------------------
# generation


def generate_response(weights, adapter, example, tokenizer, max_new_tokens=64, template=DEFAULT_TEMPLATE):
    """Greedy top-1 response text for one example."""
    inst = _as_prompt(example)
    cfg = weights.config
    budget = min(max_new_tokens, cfg.max_seq_len - 1)
    ids = encode_prompt(inst, tokenizer, cfg.max_seq_len, template, reserve=budget)
    seq = mdl.generate(weights, ids, budget, adapter, eos_id=tokenizer.eos_id)
    gen = seq[len(ids):]
    if gen and gen[-1] == tokenizer.eos_id:
        gen = gen[:-1]
    return tokenizer.decode(gen)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    task: str
    n_examples: int
    bleu4: float | None = None
    corpus_bleu4: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    threshold: float | None = None
    threshold_curve: list | None = None
    undefined: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def summary(self):
        out = {"record": "summary", "task": SHORT[self.task], "n_examples": self.n_examples}
        if self.task == "necessity":
            out.update(precision=self.precision, recall=self.recall, f1=self.f1, threshold=self.threshold,
                       undefined=list(self.undefined),
                       threshold_curve=[list(row) for row in self.threshold_curve])
        else:
            out.update(bleu4=self.bleu4, corpus_bleu4=self.corpus_bleu4)
        return out


def _bleu_tokens_for(task, text, lowercase_comments):
    return metrics.bleu_tokens(text, lowercase=lowercase_comments and task == "comment_gen")


def evaluate(weights, adapter, dataset, task, tokenizer, threshold=0.5, thresholds=None,
             max_new_tokens=64, lowercase_comments=True, template=DEFAULT_TEMPLATE):
    """Score ``dataset`` on ``task``.

    Generation tasks use greedy decoding and report the mean sentence
    BLEU-4 (corpus-level BLEU-4 alongside). Necessity prediction reports
    precision/recall/F1 at ``threshold`` plus a full threshold curve.
    """
    task = canonical_task(task)
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("evaluation dataset is empty")
    for i, ex in enumerate(dataset):
        if ex.task != task:
            raise ValidationError(f"example {i} is for task {SHORT[ex.task]}, not {SHORT[task]}")
    report = EvalReport(task, len(dataset))
    if task == "necessity":
        scores, labels = [], []
        for i, ex in enumerate(dataset):
            s = necessity_score(weights, adapter, ex, tokenizer, threshold, template)
            scores.append(s.p_positive)
            labels.append(int(ex.label))
            report.records.append({"record": "example", "index": i, "task": SHORT[task], "label": int(ex.label),
                                   "p_positive": s.p_positive, "predicted": s.predicted, "threshold": threshold})
        curve_t = metrics.default_thresholds() if thresholds is None else list(thresholds)
        if threshold not in curve_t:
            curve_t.append(threshold)
        m = metrics.prf1([s >= threshold for s in scores], labels)
        report.precision, report.recall, report.f1 = m.precision, m.recall, m.f1
        report.undefined = list(m.undefined)
        report.threshold = threshold
        report.threshold_curve = metrics.threshold_sweep(scores, labels, curve_t)
        return report
    hyps, refs = [], []
    for i, ex in enumerate(dataset):
        pred = generate_response(weights, adapter, ex, tokenizer, max_new_tokens, template)
        h = _bleu_tokens_for(task, pred, lowercase_comments)
        r = _bleu_tokens_for(task, ex.reference, lowercase_comments)
        hyps.append(h)
        refs.append(r)
        report.records.append({"record": "example", "index": i, "task": SHORT[task], "prediction": pred,
                               "reference": ex.reference, "bleu4": metrics.bleu4(h, r)})
    report.bleu4 = metrics.mean_sentence_bleu4(hyps, refs)
    report.corpus_bleu4 = metrics.corpus_bleu4(hyps, refs)
    return report


def recompute_summary(records, lowercase_comments=True, thresholds=None):
    """Rebuild the summary metrics from dumped per-example records."""
    records = [r for r in records if r.get("record") == "example"]
    if not records:
        raise ConfigError("no example records to summarise")
    task = canonical_task(records[0]["task"])
    if task == "necessity":
        threshold = records[0]["threshold"]
        scores = [r["p_positive"] for r in records]
        labels = [r["label"] for r in records]
        m = metrics.prf1([s >= threshold for s in scores], labels)
        curve_t = metrics.default_thresholds() if thresholds is None else list(thresholds)
        if threshold not in curve_t:
            curve_t.append(threshold)
        return {"record": "summary", "task": SHORT[task], "n_examples": len(records),
                "precision": m.precision, "recall": m.recall, "f1": m.f1, "threshold": threshold,
                "undefined": list(m.undefined),
                "threshold_curve": [list(row) for row in metrics.threshold_sweep(scores, labels, curve_t)]}
    hyps = [_bleu_tokens_for(task, r["prediction"], lowercase_comments) for r in records]
    refs = [_bleu_tokens_for(task, r["reference"], lowercase_comments) for r in records]
    return {"record": "summary", "task": SHORT[task], "n_examples": len(records),
            "bleu4": metrics.mean_sentence_bleu4(hyps, refs), "corpus_bleu4": metrics.corpus_bleu4(hyps, refs)}


def _dumps(rec):
    return json.dumps(rec, sort_keys=True, ensure_ascii=False)


def write_report(report, path):
    """Per-example records, then one summary record, one JSON object per line.

    Necessity reports also get a ``<stem>.curve.jsonl`` file with one
    ``{threshold, precision, recall, f1}`` row per threshold.
    """
    path = Path(path)
    lines = [_dumps(r) for r in report.records] + [_dumps(report.summary())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written = [path]
    if report.task == "necessity":
        curve = path.with_name(path.stem + ".curve.jsonl")
        rows = [_dumps({"threshold": t, "precision": p, "recall": r, "f1": f})
                for t, p, r, f in report.threshold_curve]
        curve.write_text("\n".join(rows) + "\n", encoding="utf-8")
        written.append(curve)
    return written


def read_report(path):
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
