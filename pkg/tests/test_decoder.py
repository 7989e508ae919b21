import numpy as np
import pytest
from scipy.stats import spearmanr

from iplforge.decoder import DecodeResult, batch_decode, certainty, decode_manifest, greedy_decode
from iplforge.errors import DecodeError, ModelError
from iplforge.manifest import Manifest, UttRecord
from iplforge.metrics import corpus_wer, edit_distance
from iplforge.tokenizer import train_bpe
from iplforge.transducer import ArchConfig, init_model, zero_model

ARCH = ArchConfig(feature_dim=3, encoder_dim=4, label_dim=3, joiner_dim=3, vocab_size=4)


def test_zero_model_emits_nothing():
    res = greedy_decode(zero_model(ARCH), np.ones((6, 3)))
    assert res.token_ids == [] and res.token_logprobs == [] and res.frames_consumed == 3


def one_token_model(k):
    """Label k wins from the start state; once k is emitted, blank wins."""
    model = zero_model(ARCH)
    p = model.params
    p["lab.emb"][k, 0] = 1.0
    p["lab.wx"][:] = 5 * np.eye(3)
    p["join.wl"][:] = np.eye(3)
    p["join.bo"][k] = 2.0
    p["join.wo"][0, 0] = 10.0
    return model


def test_hand_built_lattice_trace():
    k = 3
    res = greedy_decode(one_token_model(k), np.zeros((2, 3)), max_symbols_per_frame=4)
    bias = np.zeros(5)
    bias[k] = 2.0
    expected = bias[k] - np.log(np.exp(bias).sum())
    assert res.token_ids == [k]
    assert res.token_logprobs == [pytest.approx(expected)]


def test_symbol_cap_per_frame():
    model = zero_model(ARCH)
    model.params["join.bo"][2] = 5.0  # label 2 always beats blank
    res = greedy_decode(model, np.zeros((6, 3)), max_symbols_per_frame=2)
    assert res.token_ids == [2] * 6
    with pytest.raises(DecodeError):
        greedy_decode(model, np.zeros((6, 3)), max_symbols_per_frame=0)


def test_decoding_is_deterministic():
    model = init_model(ARCH, 3)
    x = np.random.default_rng(0).normal(size=(10, 3))
    assert greedy_decode(model, x) == greedy_decode(model, x)


def test_certainty_values():
    assert certainty(DecodeResult()) == 0.0
    assert certainty(DecodeResult([1, 2, 3], [-0.1, -0.2, -0.3])) == pytest.approx(-0.6)


def _manifest(tmp_path, n):
    from iplforge.manifest import write_features

    recs = []
    for i in range(n):
        write_features(tmp_path / f"{i}.feat", np.zeros((4, 3)) + i)
        recs.append(UttRecord(f"u{i}", "UKR", f"{i}.feat", "ab"))
    return Manifest(recs, tmp_path)


def test_batch_decode_shapes(tmp_path):
    vocab = train_bpe("ab ab ba", 5)
    model = one_token_model(3)
    assert len(batch_decode(model, Manifest([], tmp_path), vocab, "S")) == 0
    m = _manifest(tmp_path, 3)
    out = batch_decode(model, m, vocab, "S", workers=2)
    assert out.ids == m.ids
    assert {r.source for r in out} == {"pseudo:S"}
    assert all(r.transcript == vocab.decode([3]) and r.certainty < 0 for r in out)


def test_batch_decode_names_missing_files(tmp_path):
    m = _manifest(tmp_path, 2)
    (tmp_path / "1.feat").unlink()
    with pytest.raises(DecodeError, match="u1"):
        batch_decode(one_token_model(1), m, train_bpe("ab ab ba", 5), "S")


def test_vocabulary_mismatch_is_rejected(tmp_path):
    with pytest.raises(ModelError):
        batch_decode(one_token_model(1), _manifest(tmp_path, 1), train_bpe("ab ab ba", 9), "S")


def test_threaded_decoding_matches_serial(trained_toy):
    serial = decode_manifest(trained_toy.model, trained_toy.dev_set, workers=1)
    threaded = decode_manifest(trained_toy.model, trained_toy.dev_set, workers=4)
    assert serial == threaded


def test_certainty_tracks_errors(trained_toy):
    decoded = batch_decode(trained_toy.model, trained_toy.dev_set, trained_toy.vocab, "toy")
    truth = {r.utt_id: r.transcript for r in trained_toy.dev_set}
    wers = [edit_distance(truth[r.utt_id], r.transcript).wer for r in decoded]
    rho = spearmanr([r.certainty for r in decoded], wers).statistic
    assert rho < 0
    wer = corpus_wer((truth[r.utt_id], r.transcript) for r in decoded)
    assert np.isfinite(wer)
