import numpy as np
import pytest

from ustr.corpus import AcousticConfig, build_inventory, build_lexicon, make_domain_pair
from ustr.model import UstrConfig, UstrModel


@pytest.fixture(scope="session")
def inventory():
    return build_inventory(24, 16, 1.0, seed=7)


@pytest.fixture(scope="session")
def domains():
    return make_domain_pair(seed=0)


@pytest.fixture(scope="session")
def lexicon(inventory, domains):
    src, tgt = domains
    return build_lexicon(inventory, src.vocabulary + tgt.vocabulary, seed=0)


@pytest.fixture(scope="session")
def acoustic():
    return AcousticConfig()


def tiny_config(**kw):
    base = dict(
        feature_dim=4,
        model_dim=8,
        shared_blocks=1,
        num_heads=2,
        conv_channels=2,
        conv_kernel=3,
        ff_mult=2,
        text_vocab_size=6,
        output_vocab_size=5,
        predictor_dim=6,
        joint_dim=7,
    )
    base.update(kw)
    return UstrConfig(**base)


@pytest.fixture
def tiny_model():
    return UstrModel.init(tiny_config(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY_EXPERIMENT = {
    "name": "toy",
    "seed": 0,
    "splits": {"source_train": 20, "source_dev": 4, "source_test": 4, "target_text": 20, "target_val": 4, "target_dev": 4},
    "bpe_merges": 20,
    "model": {"model_dim": 16, "predictor_dim": 16, "joint_dim": 16, "shared_blocks": 1, "conv_channels": 2},
}


class Toy:
    """Small corpus, tokenizers and samples shared by the training/decoding tests."""

    def __init__(self, root):
        from ustr.harness import ExperimentConfig, build_corpora, build_resources, model_config
        from ustr.training import prepare_samples

        self.cfg = ExperimentConfig.from_json(TOY_EXPERIMENT)
        self.corpora = build_corpora(self.cfg, root)
        self.res = build_resources(self.cfg, self.corpora)
        self.model_cfg = model_config(self.cfg, self.corpora, self.res)
        m = self.corpora.manifests
        self.paired = prepare_samples(m["source_train"], self.res)
        self.text = prepare_samples(m["target_text"], self.res)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    return Toy(tmp_path_factory.mktemp("toy"))


# one "PASS/FAIL criterion N" line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
