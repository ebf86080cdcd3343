from pathlib import Path

import pytest

from pikv import ModelConfig, Tokenizer, build_vocab, random_weights

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def tok():
    return Tokenizer(build_vocab())


@pytest.fixture(scope="session")
def tiny_cfg():
    # throwaway model for engine-mechanics tests; vocab is arbitrary
    return ModelConfig(n_layers=2, n_heads=2, n_kv_heads=1, head_dim=4,
                       hidden_dim=8, ffn_dim=16, vocab_size=50)


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg):
    return random_weights(tiny_cfg, seed=42)


@pytest.fixture(scope="session")
def task_cfg(tok):
    # big enough to run real tasks, small enough to stay fast
    return ModelConfig(n_layers=3, n_heads=4, n_kv_heads=2, head_dim=8,
                       hidden_dim=32, ffn_dim=64, vocab_size=tok.vocab_size)


@pytest.fixture(scope="session")
def task_weights(task_cfg):
    return random_weights(task_cfg, seed=7)


@pytest.fixture(scope="session")
def golden(tok):
    """The trained checked-in checkpoint every end-to-end result relies on."""
    from pikv import load_model, load_tokenizer
    weights, config = load_model(FIXTURES / "tiny_rag.pkvm")
    gtok = load_tokenizer(FIXTURES / "tokenizer.json")
    assert gtok.tokens == tok.tokens
    return weights, config, gtok
