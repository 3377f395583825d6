import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from promptparse.tokenizer import (
    BOS,
    EOS,
    PAD,
    UNK,
    DuplicateSurface,
    IdOutOfRange,
    TokenizerError,
    add_atomic_token,
    build_vocab,
    decode,
    encode,
    load_vocab,
    save_vocab,
    segment,
    strip_atomic,
)


@pytest.fixture
def abc():
    return build_vocab(["a b", "b c"])


def test_reserved_ids():
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)


def test_build_vocab_first_seen_order(abc):
    assert abc.surfaces == ["<pad>", "<s>", "</s>", "<unk>", "a", "b", "c"]
    assert [abc.index[s] for s in abc.surfaces] == list(range(7))


def test_empty_entries_contribute_nothing():
    assert build_vocab(["", "a", "   "]).surfaces[4:] == ["a"]


def test_vocab_size_matches_distinct_words():
    rng = np.random.default_rng(0)
    lexicon = [f"w{i}" for i in range(300)]
    corpus = [" ".join(rng.choice(lexicon, size=int(rng.integers(1, 12)))) for _ in range(100)]
    distinct = {w for line in corpus for w in line.split()}
    assert len(build_vocab(corpus)) == 4 + len(distinct)


def test_encode_examples(abc):
    assert encode(abc, "a b") == [4, 5]
    assert encode(abc, "zzz") == [UNK]
    assert encode(abc, "") == []


def test_atomic_token_encodes_as_one_id(abc):
    assert add_atomic_token(abc, "IN:GET_WEATHER") == 7
    ids = encode(abc, "[ IN:GET_WEATHER ]")
    assert ids.count(7) == 1 and len(ids) == 3
    # also when glued to the bracket, as targets are serialized
    assert encode(abc, "[IN:GET_WEATHER a ]") == [UNK, 7, 4, UNK]


def test_atomic_surface_with_spaces_wins_over_splitting(abc):
    idx = add_atomic_token(abc, "a b")
    assert encode(abc, "c a b a") == [6, idx, 4]


def test_longest_atomic_match_first(abc):
    short = add_atomic_token(abc, "SL:A")
    long = add_atomic_token(abc, "SL:AB")
    assert encode(abc, "SL:AB SL:A") == [long, short]


def test_add_atomic_twice(abc):
    add_atomic_token(abc, "IN:X")
    with pytest.raises(DuplicateSurface):
        add_atomic_token(abc, "IN:X")
    with pytest.raises(DuplicateSurface):
        add_atomic_token(abc, "a")


def test_add_slot_labels_in_call_order(abc):
    labels = [f"SL:SLOT_{i:02d}" for i in range(32)]
    ids = [add_atomic_token(abc, s) for s in labels]
    assert ids == list(range(7, 39))


def test_decode_examples(abc):
    assert decode(abc, [4, 5]) == "a b"
    assert decode(abc, [1, 4, 2]) == "a"
    with pytest.raises(IdOutOfRange):
        decode(abc, [7])
    with pytest.raises(IdOutOfRange):
        decode(abc, [-1])


def test_decode_matches_join_oracle(abc):
    rng = np.random.default_rng(1)
    for _ in range(200):
        ids = rng.integers(0, len(abc), size=int(rng.integers(0, 10))).tolist()
        expected = " ".join(abc.surfaces[i] for i in ids if i > 3)
        assert decode(abc, ids) == expected


words = st.text(alphabet="abcxyz:_[]", min_size=1, max_size=6)


@given(st.lists(st.lists(words, min_size=1, max_size=6), min_size=1, max_size=6))
def test_decode_encode_identity(lines):
    corpus = [" ".join(l) for l in lines]
    vocab = build_vocab(corpus)
    for text in corpus:
        assert decode(vocab, encode(vocab, text)) == text


@given(st.lists(st.lists(words, min_size=1, max_size=5), min_size=1, max_size=5))
def test_build_vocab_deterministic(lines):
    corpus = [" ".join(l) for l in lines]
    assert build_vocab(corpus) == build_vocab(list(corpus))


def test_strip_atomic():
    assert strip_atomic("[IN:A [SL:B x ] ]", ["IN:A", "SL:B"]).split() == ["[", "[", "x", "]", "]"]
    assert strip_atomic("x", []) == "x"


def test_segment_without_atomic(abc):
    assert segment(abc, " a\tb ") == ["a", "b"]


def test_vocab_file_round_trip(tmp_path, abc):
    add_atomic_token(abc, "IN:GET_WEATHER")
    path = tmp_path / "vocab.txt"
    save_vocab(abc, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == abc.surfaces
    again = load_vocab(path)
    assert again == abc
    assert encode(again, "[IN:GET_WEATHER a ]") == encode(abc, "[IN:GET_WEATHER a ]")


def test_vocab_file_requires_reserved_header(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("a\nb\n", encoding="utf-8")
    with pytest.raises(TokenizerError):
        load_vocab(path)
