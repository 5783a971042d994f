import numpy as np
import pytest

from specdec import ModelConfig, SyntheticBackend, SyntheticModelSpec, init_model
from specdec.synthetic import uniform_profile


@pytest.fixture(scope="session")
def toy_backend():
    config = ModelConfig(
        n_layers=6, d_model=32, n_heads=4, vocab_size=32, max_seq_len=128, seed=11
    )
    return init_model(config)


@pytest.fixture(scope="session")
def oracle_backend():
    """Synthetic backend with a mid-agreement rising profile."""
    profile = {l: min(1.0, 0.1 + 0.12 * l) for l in range(1, 9)}
    profile[8] = 1.0
    spec = SyntheticModelSpec(
        n_layers=8, vocab_size=32, seed=7, agreement_profile=profile, max_seq_len=512
    )
    return SyntheticBackend(spec)


def all_agree_backend(n_layers=8, vocab_size=32, seed=3, max_seq_len=512):
    spec = SyntheticModelSpec(
        n_layers=n_layers,
        vocab_size=vocab_size,
        seed=seed,
        agreement_profile=uniform_profile(n_layers, 1.0),
        max_seq_len=max_seq_len,
    )
    return SyntheticBackend(spec)


def random_prompt(rng: np.random.Generator, vocab_size: int, lo=2, hi=10) -> list[int]:
    length = int(rng.integers(lo, hi + 1))
    return [int(t) for t in rng.integers(0, vocab_size, size=length)]
