import json

import numpy as np
import pytest

from iplforge.pipeline import builtin_path
from iplforge.synthcorpus import build_family, load_family_config


def tiny_family_config(**overrides):
    """Three-phone, two-script family that renders fast and is easy to reason about."""
    cfg = {
        "feature_dim": 4,
        "noise_sigma": 0.1,
        "frames_per_char": [2, 3],
        "scripts": {"cyr": "абв", "lat": "abv"},
        "transitions": {"concentration": 1.0, "final_fraction": 0.5, "end_prob_final": 0.6, "end_prob_other": 0.2},
        "languages": [
            {"lang_id": "UKR", "script": "cyr", "parent": "RUS", "proximity": 0.5, "relatedness_seed": 1},
            {"lang_id": "RUS", "script": "cyr", "proximity": 0.5, "relatedness_seed": 2},
            {"lang_id": "POL", "script": "lat", "proximity": 0.5, "relatedness_seed": 3},
        ],
    }
    cfg.update(overrides)
    return cfg


@pytest.fixture
def tiny_config():
    return tiny_family_config()


@pytest.fixture
def tiny_family():
    return build_family(tiny_family_config(), 3)


@pytest.fixture(scope="session")
def toy_config():
    return load_family_config(builtin_path("toy_family.json"))


@pytest.fixture(scope="session")
def toy_family(toy_config):
    return build_family(toy_config, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


class TrainedToy:
    """A 2,000-step monolingual model on 500 clean target-language utterances."""

    def __init__(self, root, toy_family):
        from iplforge.tokenizer import pool_transcripts, train_bpe
        from iplforge.trainer import TrainConfig, train
        from iplforge.synthcorpus import generate_dataset
        from iplforge.transducer import ArchConfig, init_model

        self.train_set = generate_dataset(toy_family, {"UKR": 500}, 11, root / "train", "train")
        self.dev_set = generate_dataset(toy_family, {"UKR": 60}, 11, root / "dev", "dev")
        self.vocab = train_bpe(pool_transcripts([self.train_set]), 64)
        arch = ArchConfig(encoder_dim=48, label_dim=32, joiner_dim=64, vocab_size=self.vocab.size - 1)
        self.untrained = init_model(arch, 0)
        self.cfg = TrainConfig(steps=2000, learning_rate=3e-3, eval_every=500, seed=0)
        self.model, self.report = train(self.untrained, self.train_set, self.dev_set, self.vocab, self.cfg)


@pytest.fixture(scope="session")
def trained_toy(tmp_path_factory, toy_family):
    return TrainedToy(tmp_path_factory.mktemp("trained"), toy_family)


# ------------------------------------------------------------ acceptance


_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance verdict for the terminal summary."""
    verdicts = request.config.stash.setdefault(_VERDICTS, {})
    seen = []

    def record(number, ok, detail=""):
        verdicts[number] = (bool(ok), detail)
        seen.append(number)
        return ok

    yield record
    if not seen:
        verdicts[request.node.name] = (False, "raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts, key=lambda k: (isinstance(k, str), str(k).zfill(3))):
        ok, detail = verdicts[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
