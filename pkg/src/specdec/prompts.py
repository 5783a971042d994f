"""Prompt corpora: seeded random token sequences and a byte-level text shim."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError


def random_prompts(
    count: int,
    vocab_size: int,
    min_len: int,
    max_len: int,
    seed: int,
) -> list[list[int]]:
    """Deterministic prompt set; same arguments always produce the same corpus."""
    if count < 1:
        raise ConfigError("prompt count must be >= 1")
    if not 1 <= min_len <= max_len:
        raise ConfigError("need 1 <= min_len <= max_len")
    rng = np.random.default_rng(seed)
    prompts = []
    for _ in range(count):
        length = int(rng.integers(min_len, max_len + 1))
        prompts.append([int(t) for t in rng.integers(0, vocab_size, size=length)])
    return prompts


def byte_tokenize(text: str, vocab_size: int) -> list[int]:
    """Byte-level tokens folded into the vocabulary."""
    data = text.encode("utf-8")
    if not data:
        raise ConfigError("cannot tokenize empty text")
    return [b % vocab_size for b in data]


def prompts_from_text(path: str | Path, vocab_size: int, max_len: int) -> list[list[int]]:
    """One prompt per non-empty line, byte-tokenized and truncated to max_len."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    prompts = [byte_tokenize(line, vocab_size)[:max_len] for line in lines if line.strip()]
    if not prompts:
        raise ConfigError(f"no usable lines in {path}")
    return prompts
