"""Reversible byte-level BPE tokenizer.

Ids 0..2 are the special tokens (bos, eos, pad), ids 3..258 the 256 raw
bytes, and the remaining ids are learned merges. Text is first split into
chunks (letters, digits, punctuation runs, whitespace runs) and merges
never cross a chunk boundary. Decoding concatenates the bytes of each id,
so ``decode(encode(s)) == s`` for every string, whitespace included.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from pathlib import Path

from .errors import ConfigError, FormatError

SPECIALS = ("<bos>", "<eos>", "<pad>")
BOS, EOS, PAD = 0, 1, 2
_BYTE_OFFSET = len(SPECIALS)

_CHUNK = re.compile(r" ?[A-Za-z]+| ?[0-9]+| ?[^\sA-Za-z0-9]+|\s+(?!\S)|\s+")


def _chunks(text):
    return _CHUNK.findall(text)


class Tokenizer:
    def __init__(self, merges, label_words=("yes", "no")):
        self.merges = [tuple(m) for m in merges]
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        self.vocab = [s.encode() for s in SPECIALS] + [bytes([b]) for b in range(256)]
        for a, b in self.merges:
            self.vocab.append(self.vocab[a] + self.vocab[b])
        self.pair_to_id = {pair: _BYTE_OFFSET + 256 + i for i, pair in enumerate(self.merges)}
        self.label_words = tuple(label_words)
        self._cache = {}
        self.label_ids = {}
        for word in self.label_words:
            ids = self.encode(word)
            if len(ids) != 1:
                raise ConfigError(f"label word {word!r} must encode to a single token, got {len(ids)}")
            self.label_ids[word] = ids[0]

    bos_id, eos_id, pad_id = BOS, EOS, PAD

    @property
    def vocab_size(self):
        return len(self.vocab)

    @classmethod
    def train(cls, texts, vocab_size=512, label_words=("yes", "no")):
        """Learn merges greedily by pair frequency.

        Merges spelling out each label word come first, so that every label
        word is a single token regardless of the corpus.
        """
        n_base = _BYTE_OFFSET + 256
        if vocab_size < n_base:
            raise ConfigError(f"vocab_size {vocab_size} is below the {n_base} special and byte tokens")
        merges = []
        pair_ids = {}

        def add_merge(a, b):
            pair_ids[(a, b)] = n_base + len(merges)
            merges.append((a, b))
            return pair_ids[(a, b)]

        for word in label_words:
            ids = [b + _BYTE_OFFSET for b in word.encode()]
            while len(ids) > 1:
                pair = (ids[0], ids[1])
                new = pair_ids.get(pair)
                if new is None:
                    if n_base + len(merges) >= vocab_size:
                        raise ConfigError("vocab_size too small to hold the label words as single tokens")
                    new = add_merge(*pair)
                ids = [new] + ids[2:]

        words = Counter()
        for text in texts:
            words.update(_chunks(text))
        seqs = {}
        for w in words:
            ids = [b + _BYTE_OFFSET for b in w.encode()]
            for pair in list(merges):
                ids = _apply_merge(ids, pair, pair_ids[pair])
            seqs[w] = ids
        while n_base + len(merges) < vocab_size:
            counts = Counter()
            for w, ids in seqs.items():
                for pair in zip(ids, ids[1:]):
                    counts[pair] += words[w]
            if not counts:
                break
            # deterministic tie break on the pair itself
            pair = max(counts.items(), key=lambda kv: (kv[1], -kv[0][0], -kv[0][1]))[0]
            if counts[pair] < 2:
                break
            new = add_merge(*pair)
            for w, ids in seqs.items():
                if len(ids) > 1:
                    seqs[w] = _apply_merge(ids, pair, new)
        return cls(merges, label_words)

    def _encode_chunk(self, chunk):
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        ids = [b + _BYTE_OFFSET for b in chunk.encode()]
        while len(ids) > 1:
            best = min(zip(ids, ids[1:]), key=lambda p: self.ranks.get(p, float("inf")))
            if best not in self.ranks:
                break
            ids = _apply_merge(ids, best, self.pair_to_id[best])
        self._cache[chunk] = ids
        return ids

    def encode(self, text):
        out = []
        for chunk in _chunks(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode(self, ids, skip_special=True):
        parts = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.vocab):
                raise FormatError(f"token id {i} is outside the vocabulary of {len(self.vocab)}")
            if i < _BYTE_OFFSET:
                if skip_special:
                    continue
                raise FormatError(f"special token id {i} cannot be decoded to text")
            parts.append(self.vocab[i])
        return b"".join(parts).decode("utf-8", errors="replace")

    def to_dict(self):
        return {"specials": list(SPECIALS), "merges": [list(m) for m in self.merges],
                "label_words": list(self.label_words)}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            if data["specials"] != list(SPECIALS):
                raise FormatError(f"{path}: unexpected special tokens {data['specials']}")
            return cls(data["merges"], data.get("label_words", ("yes", "no")))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: cannot read tokenizer ({exc})") from exc


def _apply_merge(ids, pair, new):
    out = []
    i = 0
    a, b = pair
    while i < len(ids):
        if i + 1 < len(ids) and ids[i] == a and ids[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out
