import numpy as np
import pytest

from bustr import load_config
from bustr.pipeline import attach_reports
from bustr.synth import sample_corpus


@pytest.fixture(scope="session")
def breast_cfg():
    return load_config("breast")


@pytest.fixture(scope="session")
def busbra_cfg():
    return load_config("busbra")


@pytest.fixture(scope="session")
def breast_corpus(breast_cfg):
    samples = sample_corpus(breast_cfg, 40, seed=123)
    attach_reports(samples, breast_cfg)
    return samples


@pytest.fixture(scope="session")
def busbra_corpus(busbra_cfg):
    samples = sample_corpus(busbra_cfg, 64, seed=123)
    attach_reports(samples, busbra_cfg)
    return samples


@pytest.fixture()
def rng():
    return np.random.default_rng(7)
