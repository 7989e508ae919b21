from collections import Counter

import numpy as np
import pytest

from conftest import tiny_family_config
from iplforge.errors import ConfigError, DatasetError, SelectionError
from iplforge.metrics import corpus_wer
from iplforge.synthcorpus import (
    BL_RATIOS,
    NW_RATIOS,
    LanguageSpec,
    apply_reference,
    build_family,
    draw_finals,
    generate_dataset,
    random_transition,
    reference_transcribe,
    restrict,
    sample_utterance,
    sample_word,
    scaled_counts,
    subsample,
)


def test_ratio_tables():
    assert sum(NW_RATIOS.values()) == 648 and sum(BL_RATIOS.values()) == 109
    assert scaled_counts(BL_RATIOS, 2) == {k: 2 * v for k, v in BL_RATIOS.items()}
    assert scaled_counts({"UKR": 3}, 0.5) == {"UKR": 2}


def test_build_is_deterministic(tiny_config):
    a, b = build_family(tiny_config, 11), build_family(tiny_config, 11)
    for la, lb in zip(a.languages, b.languages):
        np.testing.assert_array_equal(la.transition_matrix, lb.transition_matrix)
    for ch in a.prototype_table:
        np.testing.assert_array_equal(a.prototype_table[ch], b.prototype_table[ch])
    c = build_family(tiny_config, 12)
    assert not np.array_equal(a.languages[0].transition_matrix, c.languages[0].transition_matrix)


def test_matrices_are_row_stochastic(toy_family):
    for lang in toy_family.languages:
        m = lang.transition_matrix
        assert m.shape == (len(lang.alphabet) + 1,) * 2
        np.testing.assert_allclose(m.sum(axis=1), 1.0)
        assert m[lang.boundary, lang.boundary] == 0.0


def test_full_proximity_copies_the_parent(tiny_config):
    tiny_config["languages"][0]["proximity"] = 1.0
    spec = build_family(tiny_config, 5)
    np.testing.assert_array_equal(
        spec.language("UKR").transition_matrix, spec.language("RUS").transition_matrix
    )


def test_zero_proximity_is_the_independent_perturbation(tiny_config):
    for lc in tiny_config["languages"]:
        lc["proximity"] = 0.0
    seed = 9
    spec = build_family(tiny_config, seed)
    params = tiny_config["transitions"]
    # replay the family-level draws: phones, two script offsets, finals
    rng = np.random.default_rng(seed)
    rng.normal(size=(3, 4))
    rng.normal(size=(3, 4))
    rng.normal(size=(3, 4))
    finals = draw_finals(rng, 3, params)
    for lc in tiny_config["languages"]:
        pert = random_transition(np.random.default_rng([seed, lc["relatedness_seed"]]), 3, params, finals)
        np.testing.assert_allclose(spec.language(lc["lang_id"]).transition_matrix, restrict(pert, [0, 1, 2]))


def test_mixture_by_hand(tiny_config):
    seed = 4
    spec = build_family(tiny_config, seed)
    zero = tiny_family_config()
    for lc in zero["languages"]:
        lc["proximity"] = 0.0
    pert = {l.lang_id: l.transition_matrix for l in build_family(zero, seed).languages}
    one = tiny_family_config()
    one["languages"][1]["proximity"] = 1.0
    base = build_family(one, seed).language("RUS").transition_matrix
    rus = 0.5 * base + 0.5 * pert["RUS"]
    np.testing.assert_allclose(spec.language("RUS").transition_matrix, rus)
    np.testing.assert_allclose(spec.language("UKR").transition_matrix, 0.5 * rus + 0.5 * pert["UKR"])


def test_excluded_characters_leave_the_alphabet(toy_family):
    assert "ы" not in toy_family.language("UKR").alphabet
    assert "ы" in toy_family.language("RUS").alphabet


@pytest.mark.parametrize(
    "patch",
    [
        {"frames_per_char": [3, 2]},
        {"scripts": {"cyr": "", "lat": ""}},
        {"scripts": {"cyr": "абв", "lat": "ab"}},
        {"feature_dim": 1},
        {"noise_sigma": -1},
    ],
)
def test_invalid_configs(patch):
    with pytest.raises(ConfigError):
        build_family(tiny_family_config(**patch), 0)


def test_invalid_language_settings(tiny_config):
    tiny_config["languages"][0]["exclude"] = "абв"
    with pytest.raises(ConfigError):
        build_family(tiny_config, 0)
    cfg = tiny_family_config()
    cfg["languages"][0]["word_len"] = [4, 2]
    with pytest.raises(ConfigError):
        build_family(cfg, 0)
    cfg = tiny_family_config()
    cfg["languages"][1]["parent"] = "UKR"
    with pytest.raises(ConfigError, match="cycle"):
        build_family(cfg, 0)


def test_noiseless_single_frame_rendering():
    spec = build_family(tiny_family_config(noise_sigma=0.0, frames_per_char=[1, 1]), 2)
    text, feats = sample_utterance(spec, "UKR", np.random.default_rng(0))
    chars = text.replace(" ", "")
    assert feats.shape == (len(chars), 4)
    for row, ch in zip(feats, chars):
        np.testing.assert_array_equal(row, spec.prototype_table[ch])


def test_single_character_transcripts(tiny_config):
    for lc in tiny_config["languages"]:
        lc["word_len"] = [1, 1]
        lc["words_per_utt"] = [1, 1]
    spec = build_family(tiny_config, 0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        text, _ = sample_utterance(spec, "POL", rng)
        assert len(text) == 1 and text in spec.language("POL").alphabet


def test_bigram_frequencies_follow_the_matrix():
    m = np.array([
        [0.0, 0.5, 0.2, 0.3],
        [0.4, 0.0, 0.3, 0.3],
        [0.3, 0.3, 0.1, 0.3],
        [0.5, 0.3, 0.2, 0.0],
    ])
    lang = LanguageSpec("X", "lat", "abc", m, (1, 1000), (1, 1), 0)
    rng = np.random.default_rng(0)
    counts = np.zeros_like(m)
    for _ in range(10_000):
        prev = 3
        for ch in sample_word(lang, rng):
            cur = "abc".index(ch)
            counts[prev, cur] += 1
            prev = cur
        counts[prev, 3] += 1
    empirical = counts / counts.sum(axis=1, keepdims=True)
    assert np.abs(empirical - m).max() < 0.02


def test_reference_transcriber_extremes(toy_family):
    lang = toy_family.language("UKR")
    rng = np.random.default_rng(0)
    assert reference_transcribe("аб вг де", (0, 0, 0), rng, lang) == "аб вг де"
    assert reference_transcribe("аб вг де", (0, 1, 0), rng, lang) == ""
    with pytest.raises(ConfigError):
        reference_transcribe("аб", (0.7, 0.7, 0), rng, lang)


def test_reference_transcriber_error_rate(toy_family):
    lang = toy_family.language("UKR")
    rng = np.random.default_rng(3)
    refs = [" ".join(sample_word(lang, rng) for _ in range(10)) for _ in range(1000)]
    hyps = [reference_transcribe(r, (0.10, 0.05, 0.05), rng, lang) for r in refs]
    assert corpus_wer(zip(refs, hyps)) == pytest.approx(0.20, abs=0.01)


def test_generate_dataset(tiny_family, tmp_path):
    m = generate_dataset(tiny_family, {"UKR": 3, "POL": 2}, 5, tmp_path / "a")
    assert m.ids == ["train-UKR-000000", "train-UKR-000001", "train-UKR-000002", "train-POL-000000", "train-POL-000001"]
    assert all(r.source == "truth" for r in m)
    assert len(list((tmp_path / "a" / "feats").iterdir())) == 5
    # per-utterance streams: a smaller request is a prefix of a larger one
    small = generate_dataset(tiny_family, {"UKR": 2}, 5, tmp_path / "b")
    assert [r.transcript for r in small] == [r.transcript for r in m.records[:2]]
    np.testing.assert_array_equal(small.load_features(small.records[1]), m.load_features(m.records[1]))


def test_generate_nothing(tiny_family, tmp_path):
    m = generate_dataset(tiny_family, {"UKR": 0}, 5, tmp_path / "empty")
    assert len(m) == 0
    assert not (tmp_path / "empty").exists()


def test_generate_errors(tiny_family, tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset(tiny_family, {"XXX": 1}, 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(DatasetError, match="file"):
        generate_dataset(tiny_family, {"UKR": 1}, 0, blocker)


def test_apply_reference_marks_source(tiny_family, tmp_path):
    m = generate_dataset(tiny_family, {"UKR": 4}, 1, tmp_path)
    ref = apply_reference(m, tiny_family, (0.3, 0.1, 0.1), 2)
    assert ref.ids == m.ids
    assert {r.source for r in ref} == {"reference"}
    assert ref == apply_reference(m, tiny_family, (0.3, 0.1, 0.1), 2)


def _pool(tiny_family, tmp_path):
    return generate_dataset(tiny_family, {"UKR": 10, "RUS": 4}, 0, tmp_path)


def test_subsample_full_and_empty_targets(tiny_family, tmp_path):
    pool = _pool(tiny_family, tmp_path)
    assert set(subsample(pool, {"UKR": 10, "RUS": 4}, 1).ids) == set(pool.ids)
    part = subsample(pool, {"UKR": 3, "RUS": 0}, 1)
    assert part.languages() == ["UKR"] and len(part) == 3


def test_subsample_rejects_excess(tiny_family, tmp_path):
    with pytest.raises(SelectionError, match="RUS"):
        subsample(_pool(tiny_family, tmp_path), {"RUS": 5}, 0)


def test_subsample_is_uniform(tiny_family, tmp_path):
    pool = _pool(tiny_family, tmp_path)
    hits = Counter()
    for seed in range(1000):
        hits.update(subsample(pool, {"UKR": 4}, seed).ids)
    for utt in pool.by_language("UKR").ids:
        assert hits[utt] / 1000 == pytest.approx(0.4, abs=0.05)
