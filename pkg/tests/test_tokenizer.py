import pytest
from hypothesis import given
from hypothesis import strategies as st

from peftreview.errors import ConfigError, FormatError
from peftreview.tokenizer import BOS, EOS, PAD, Tokenizer


@given(st.text(max_size=200))
def test_round_trip_any_text(tokenizer, text):
    ids = tokenizer.encode(text)
    assert all(3 <= i < tokenizer.vocab_size for i in ids)
    assert tokenizer.decode(ids) == text


@pytest.mark.parametrize("text", ["", "  leading", "trailing  \n\n", "tabs\tand\r\nCRLF", "naïve café 数据 🙂",
                                  "def f(x):\n    return x  # ok"])
def test_round_trip_edge_cases(tokenizer, text):
    assert tokenizer.decode(tokenizer.encode(text)) == text


def test_specials_and_labels(tokenizer):
    assert (BOS, EOS, PAD) == (0, 1, 2)
    assert tokenizer.vocab_size == 512
    assert len(tokenizer.encode("yes")) == 1 and len(tokenizer.encode("no")) == 1
    assert tokenizer.label_ids["yes"] != tokenizer.label_ids["no"]
    assert tokenizer.decode([BOS, *tokenizer.encode("hi"), EOS, PAD]) == "hi"
    with pytest.raises(FormatError):
        tokenizer.decode([0], skip_special=False)
    with pytest.raises(FormatError):
        tokenizer.decode([512])


def test_merges_compress_common_text(tokenizer):
    text = "Write a function that returns the value."
    assert len(tokenizer.encode(text)) < len(text.encode()) / 2


def test_training_is_deterministic_and_serialisable(tokenizer, tmp_path):
    from peftreview.tasks import bundled_corpus

    again = Tokenizer.train(bundled_corpus(), 512)
    assert again.merges == tokenizer.merges
    path = tmp_path / "tok.json"
    tokenizer.save(path)
    back = Tokenizer.load(path)
    assert back.merges == tokenizer.merges and back.label_ids == tokenizer.label_ids


def test_vocab_too_small():
    with pytest.raises(ConfigError):
        Tokenizer.train(["abc"], 100)
    small = Tokenizer.train(["abc abc"], 262)
    assert small.vocab_size == 262 and small.encode("yes") != []


def test_bad_tokenizer_file(tmp_path):
    path = tmp_path / "tok.json"
    path.write_text("{not json")
    with pytest.raises(FormatError):
        Tokenizer.load(path)
