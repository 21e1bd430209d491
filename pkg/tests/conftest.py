import pytest

from spi.config import ModelConfig, SpiConfig
from spi.data import SyntheticSpec, generate_corpus
from spi.training import train


@pytest.fixture(scope="session")
def tiny_corpus():
    """Twelve-example corpus for wiring tests."""
    spec = SyntheticSpec(vocab_size=32, m_candidates=3, candidate_len=4,
                         n_styles=2, n_train=12, n_valid=4, n_test=4,
                         history_len=4, seed=5)
    return generate_corpus(spec)


@pytest.fixture(scope="session")
def small_corpus():
    spec = SyntheticSpec(vocab_size=48, m_candidates=4, candidate_len=6,
                         n_styles=2, n_train=160, n_valid=40, n_test=40,
                         history_len=6, seed=11)
    return generate_corpus(spec)


@pytest.fixture(scope="session")
def small_config(small_corpus):
    return SpiConfig(model=ModelConfig(vocab_size=small_corpus.vocab.size),
                     top_s=3, langevin_steps=2, batch_size=16, epochs=3, seed=7)


@pytest.fixture(scope="session")
def small_trained(small_corpus, small_config):
    """One modest training run shared by the evaluation-level tests."""
    return train(small_corpus.train, small_corpus.valid, small_config, quiet=True)
