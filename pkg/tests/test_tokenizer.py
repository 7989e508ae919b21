from collections import Counter

from oracles import brute_force_bpe, random_corpus

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iplforge.errors import TokenizerError
from iplforge.manifest import Manifest, UttRecord
from iplforge.synthcorpus import BL_RATIOS, generate_dataset, scaled_counts
from iplforge.tokenizer import (
    BLANK,
    BOUNDARY,
    UNK,
    Vocab,
    base_inventory,
    decode_tokens,
    dumps_vocab,
    loads_vocab,
    pool_transcripts,
    train_bpe,
)


def test_matches_brute_force_on_random_corpora():
    rng = np.random.default_rng(0)
    for _ in range(25):
        corpus = random_corpus(rng)
        size = int(rng.integers(len(base_inventory(corpus)) + 1, 80))
        vocab = train_bpe(corpus, size)
        merges, tokens = brute_force_bpe(corpus, size)
        assert vocab.merges == merges
        assert vocab.tokens == tokens


def test_single_distinct_character():
    vocab = train_bpe("a", 10)
    assert vocab.merges == []
    # blank plus the marked character, with the unknown fallback and the marker itself
    assert vocab.tokens == [BLANK, UNK, BOUNDARY, "a"]
    assert vocab.decode(vocab.encode("a")) == "a"


def test_first_merge_is_most_frequent_pair():
    corpus = "abab abab"
    counts = Counter()
    for w in corpus.split():
        sym = [BOUNDARY] + list(w)
        counts.update(zip(sym, sym[1:]))
    top = max(counts.values())
    expected = min(p for p, n in counts.items() if n == top)
    assert train_bpe(corpus, 100).merges[0] == expected == ("a", "b")


def test_budget_of_base_plus_blank_allows_no_merges():
    corpus = "abab abab"
    vocab = train_bpe(corpus, len(base_inventory(corpus)) + 1)
    assert vocab.merges == []


def test_errors():
    with pytest.raises(TokenizerError):
        train_bpe("", 10)
    with pytest.raises(TokenizerError):
        train_bpe("   \n ", 10)
    with pytest.raises(TokenizerError):
        train_bpe("abc", 3)


def test_blank_is_id_zero():
    vocab = train_bpe("ab ab", 10)
    assert vocab.tokens[0] == BLANK and vocab.blank_id == 0


def test_encode_empty_and_merged_surface():
    vocab = train_bpe("ab ab ab", 10)
    assert vocab.encode("") == []
    # ties break lexicographically and the marker sorts after ASCII: ▁ a b -> ▁ ab -> ▁ab
    assert vocab.merges[:2] == [("a", "b"), (BOUNDARY, "ab")]
    assert vocab.encode("ab") == [vocab.token_id("".join(vocab.merges[1]))]
    assert vocab.encode("ab") == [vocab.token_id(BOUNDARY + "ab")]


def test_unknown_characters_map_to_unk():
    vocab = train_bpe("ab ab", 10)
    ids = vocab.encode("aq")
    assert vocab.unk_id in ids


def test_decode_inserts_one_space_between_marked_tokens():
    vocab = train_bpe("ab ab cd cd", 20)
    ids = [vocab.token_id(BOUNDARY + "ab"), vocab.token_id(BOUNDARY + "cd")]
    assert decode_tokens(vocab, ids) == "ab cd"
    assert decode_tokens(vocab, vocab.encode("ab cd")) == "ab cd"
    assert decode_tokens(vocab, []) == ""


@pytest.mark.parametrize("bad", [0, -1, 10_000])
def test_decode_rejects_blank_and_out_of_range(bad):
    vocab = train_bpe("ab ab", 10)
    with pytest.raises(TokenizerError):
        decode_tokens(vocab, [bad])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.text(alphabet="abcdef", min_size=1, max_size=6), max_size=6))
def test_round_trip(words):
    vocab = train_bpe("abc fed cab bad face deaf fad bead", 30)
    text = " ".join(words)
    assert vocab.decode(vocab.encode(text)) == text


def test_serialisation_round_trip(tmp_path):
    vocab = train_bpe("abc abd abe bcd bce", 14)
    again = loads_vocab(dumps_vocab(vocab))
    assert again.tokens == vocab.tokens
    assert again.merges == vocab.merges
    vocab.save(tmp_path / "v.vocab")
    assert Vocab.load(tmp_path / "v.vocab").tokens == vocab.tokens
    with pytest.raises(TokenizerError):
        loads_vocab("nonsense\n")
    with pytest.raises(TokenizerError):
        Vocab.load(tmp_path / "missing.vocab")


def _manifest(*transcripts):
    return Manifest([UttRecord(f"u{i}", "UKR", f"f{i}", t) for i, t in enumerate(transcripts)])


def test_pool_single_record():
    assert pool_transcripts([_manifest("ab cd")]) == "ab cd"


def test_pool_line_count():
    corpus = pool_transcripts({"b": _manifest("x", "y z"), "a": _manifest("w")})
    assert corpus.split("\n") == ["w", "x", "y z"]


def test_pool_of_balanced_sets_covers_both_scripts(toy_family, tmp_path):
    counts = scaled_counts(BL_RATIOS, 0.4)
    manifest = generate_dataset(toy_family, counts, 0, tmp_path)
    corpus = set(pool_transcripts({l: manifest.by_language(l) for l in counts}))
    for script in ("UKR", "POL"):
        assert corpus & set(toy_family.language(script).alphabet)
