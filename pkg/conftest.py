"""
Shared fixtures for the test scripts
The default toy model is cheap; the trained SAE is built once per session
"""

import pytest

from backend.config import RunConfig
from backend.sae import SaeTrainConfig, train_sae
from backend.toylm import alternating_schedule, build_toylm, sample_strategy_corpus


@pytest.fixture(scope="session")
def lm():
    return build_toylm()


@pytest.fixture(scope="session")
def corpus(lm):
    data, segments = sample_strategy_corpus(lm, alternating_schedule(lm.n_strategies, 40, 64), seed=1)
    return data, segments


@pytest.fixture(scope="session")
def trained_sae(corpus):
    """Default-config SAE (20k steps); only the slow tests ask for it"""
    data, _ = corpus
    return train_sae(data, SaeTrainConfig(seed=2))


@pytest.fixture
def small_config(tmp_path):
    """A config that runs every stage in well under a minute"""
    return RunConfig().updated({
        "corpus": {"rounds": 8, "run_length": 32},
        "sae": {"m_dim": 128, "steps": 400, "batch_size": 64, "dead_feature_window": 100,
                "init_sample_size": 256},
        "identify": {"validation_size": 4, "horizon": 32},
        "router": {"steps": 50, "train_problems": 20, "eval_problems": 20},
        "correct": {"problems": 20, "horizon": 48},
        "run": {"seed": 5, "output_dir": str(tmp_path / "run")},
    })
