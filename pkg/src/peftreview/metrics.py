"""BLEU-4 and precision/recall/F1 with threshold sweeps."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

from .errors import UsageError

SMOOTHING_EPS = 1e-9
_BLEU_TOKEN = re.compile(r"\w+|[^\w\s]")


def bleu_tokens(text, lowercase=False):
    """Whitespace-plus-punctuation split used before scoring."""
    if lowercase:
        text = text.lower()
    return _BLEU_TOKEN.findall(text)


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(hypothesis, reference, n):
    """``(clipped matches, hypothesis n-gram count)`` for order ``n``."""
    hyp = ngrams(hypothesis, n)
    ref = ngrams(reference, n)
    matches = sum(min(c, ref[g]) for g, c in hyp.items())
    return matches, max(len(hypothesis) - n + 1, 0)


def brevity_penalty(hyp_len, ref_len):
    if hyp_len == 0:
        return 0.0
    if hyp_len >= ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / hyp_len)


def _combine(stats, hyp_len, ref_len, eps):
    if hyp_len == 0 or ref_len == 0 or stats[0][0] == 0:
        return 0.0
    log_p = 0.0
    for matches, total in stats:
        log_p += math.log(matches / total if matches else eps / max(total, 1))
    return brevity_penalty(hyp_len, ref_len) * math.exp(log_p / len(stats))


def bleu4(hypothesis, reference, eps=SMOOTHING_EPS):
    """Sentence-level BLEU-4 on token lists.

    Geometric mean of the clipped 1..4-gram precisions times the brevity
    penalty. A zero count at some order is replaced by ``eps`` (divided by
    that order's n-gram total). With no unigram overlap at all, or an empty
    hypothesis, the score is exactly 0.
    """
    hypothesis, reference = list(hypothesis), list(reference)
    stats = [modified_precision(hypothesis, reference, n) for n in range(1, 5)]
    return _combine(stats, len(hypothesis), len(reference), eps)


def corpus_bleu4(hypotheses, references, eps=SMOOTHING_EPS):
    """Corpus-level BLEU-4: n-gram statistics and lengths pooled first."""
    if len(hypotheses) != len(references):
        raise UsageError("corpus_bleu4: hypothesis and reference counts differ")
    stats = [[0, 0] for _ in range(4)]
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            m, t = modified_precision(list(hyp), list(ref), n)
            stats[n - 1][0] += m
            stats[n - 1][1] += t
    return _combine(stats, hyp_len, ref_len, eps)


def mean_sentence_bleu4(hypotheses, references, eps=SMOOTHING_EPS):
    if len(hypotheses) != len(references):
        raise UsageError("mean_sentence_bleu4: hypothesis and reference counts differ")
    if not hypotheses:
        return 0.0
    return sum(bleu4(h, r, eps) for h, r in zip(hypotheses, references)) / len(hypotheses)


@dataclass(frozen=True)
class PRF1:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    undefined: tuple = ()  # metrics whose denominator was zero (reported as 0)

    def as_dict(self):
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "undefined": list(self.undefined)}


def prf1(predictions, labels):
    """Precision, recall and F1 with 1 (needs review) as the positive class."""
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise UsageError(f"prf1: {len(predictions)} predictions vs {len(labels)} labels")
    if not labels:
        raise UsageError("prf1: empty input")
    tp = fp = fn = tn = 0
    for p, y in zip(predictions, labels):
        p, y = bool(p), bool(y)
        if p and y:
            tp += 1
        elif p:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    undefined = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        undefined.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        undefined.append("recall")
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    return PRF1(precision, recall, f1, tp, fp, fn, tn, tuple(undefined))


def default_thresholds(steps=100):
    return [round(i / steps, 10) for i in range(steps + 1)]


def threshold_sweep(scores, labels, thresholds=None):
    """``(threshold, precision, recall, f1)`` rows; predicted = score >= threshold."""
    thresholds = default_thresholds() if thresholds is None else sorted(thresholds)
    rows = []
    for t in thresholds:
        m = prf1([s >= t for s in scores], labels)
        rows.append((t, m.precision, m.recall, m.f1))
    return rows
