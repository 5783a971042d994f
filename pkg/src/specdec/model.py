"""Minimal deterministic decoder-only transformer with partial forward passes.

The model exists to exercise cache management and decode strategies, not
to be good at language: weights are a pure function of the seed and there
is no training. Every exit layer shares one unembedding head, with the
final normalization applied before it at every exit.

Determinism contract: all math is float64 and every position is computed
with the same sequence of vector-matrix products regardless of how work
is batched into forward calls. Splitting a layer range or re-running a
prefix therefore reproduces results bit for bit, which is what makes the
recompute-based consistency oracle meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backend import TokenDistribution, check_layer_range
from .errors import AlignmentError, ConfigError
from .state import LayeredState

_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    max_seq_len: int
    seed: int

    def __post_init__(self) -> None:
        if self.n_layers < 3:
            raise ConfigError("n_layers must be >= 3")
        if self.d_model < 1:
            raise ConfigError("d_model must be positive")
        if self.n_heads < 1:
            raise ConfigError("n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model not divisible by n_heads")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


class ToyTransformer:
    """Decoder-only transformer over float64 with per-position evaluation."""

    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        self.n_layers = config.n_layers
        self.vocab_size = config.vocab_size
        self.max_seq_len = config.max_seq_len
        self.d_model = config.d_model
        self._d_head = config.d_model // config.n_heads
        rng = np.random.default_rng(config.seed)
        d, d_ff = config.d_model, 4 * config.d_model
        scale = 1.0 / np.sqrt(d)
        self.embedding = rng.normal(0.0, scale, size=(config.vocab_size, d))
        self.pos_table = rng.normal(0.0, scale, size=(config.max_seq_len, d))
        self.layers = []
        for _ in range(config.n_layers):
            self.layers.append(
                {
                    "w_q": rng.normal(0.0, scale, size=(d, d)),
                    "w_k": rng.normal(0.0, scale, size=(d, d)),
                    "w_v": rng.normal(0.0, scale, size=(d, d)),
                    "w_o": rng.normal(0.0, scale, size=(d, d)),
                    "w_up": rng.normal(0.0, scale, size=(d, d_ff)),
                    "w_down": rng.normal(0.0, 1.0 / np.sqrt(d_ff), size=(d_ff, d)),
                }
            )
        self.unembedding = rng.normal(0.0, scale, size=(d, config.vocab_size))

    # -- state -------------------------------------------------------

    def new_state(self, buffered_layers: Sequence[int] = ()) -> LayeredState:
        return LayeredState(
            n_layers=self.n_layers,
            max_seq_len=self.max_seq_len,
            d_model=self.d_model,
            buffered_layers=buffered_layers,
        )

    # -- forward -----------------------------------------------------

    def _embed(self, token: int, position: int) -> np.ndarray:
        if not 0 <= token < self.vocab_size:
            raise AlignmentError(f"token {token} outside vocabulary")
        if position >= self.max_seq_len:
            raise AlignmentError(f"position {position} beyond max_seq_len")
        return self.embedding[token] + self.pos_table[position]

    def _attend(self, state: LayeredState, layer: int, position: int, x: np.ndarray) -> np.ndarray:
        """One causal attention step for a single position, extending the cache."""
        weights = self.layers[layer - 1]
        xn = _rms_norm(x)
        q = xn @ weights["w_q"]
        k = xn @ weights["w_k"]
        v = xn @ weights["w_v"]
        state.append_kv(layer, position, k, v)
        n_heads, d_head = self.config.n_heads, self._d_head
        keys = state.kv_k[layer - 1][: position + 1].reshape(position + 1, n_heads, d_head)
        values = state.kv_v[layer - 1][: position + 1].reshape(position + 1, n_heads, d_head)
        q_heads = q.reshape(n_heads, d_head)
        out = np.empty_like(q_heads)
        inv_sqrt = 1.0 / np.sqrt(d_head)
        for h in range(n_heads):
            scores = (keys[:, h, :] @ q_heads[h]) * inv_sqrt
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            out[h] = w @ values[:, h, :]
        return x + out.reshape(-1) @ weights["w_o"]

    def _mlp(self, layer: int, x: np.ndarray) -> np.ndarray:
        weights = self.layers[layer - 1]
        return x + _silu(_rms_norm(x) @ weights["w_up"]) @ weights["w_down"]

    def _run_layer(
        self, state: LayeredState, layer: int, start_pos: int, hiddens: list[np.ndarray]
    ) -> list[np.ndarray]:
        out = []
        for i, h in enumerate(hiddens):
            x = self._attend(state, layer, start_pos + i, h)
            out.append(self._mlp(layer, x))
        if layer in state.buffered_layers:
            for i, h in enumerate(out):
                state.buffer_hidden(layer, start_pos + i, h)
        return out

    def forward_range(
        self,
        state: LayeredState,
        start_layer: int,
        end_layer: int,
        start_pos: int,
        end_pos: int,
    ) -> np.ndarray:
        """Run layers [start_layer, end_layer] over positions [start_pos, end_pos).

        Inputs come from token embeddings when starting at layer 1, else
        from the buffered hidden states at start_layer - 1. Produced K/V
        pairs are appended as tentative entries; buffered exit layers in
        the range also record their outputs. Returns the end-layer hidden
        states for the span.
        """
        check_layer_range(self.n_layers, start_layer, end_layer)
        if end_pos <= start_pos:
            raise AlignmentError("empty position span")
        if end_pos > self.max_seq_len:
            raise AlignmentError(f"position {end_pos - 1} beyond max_seq_len")
        if end_pos > len(state.tokens):
            raise AlignmentError(f"no token recorded at position {end_pos - 1}")
        for layer in range(start_layer, end_layer + 1):
            if state.filled(layer) != start_pos:
                raise AlignmentError(
                    f"layer {layer} filled to {state.filled(layer)}, expected {start_pos}"
                )
        if start_layer == 1:
            hiddens = [self._embed(state.tokens[p], p) for p in range(start_pos, end_pos)]
        else:
            resume = start_layer - 1
            if resume not in state.buffered_layers:
                raise AlignmentError(
                    f"missing hidden state at (layer {resume}, position {start_pos})"
                )
            if state.filled(resume) < end_pos:
                raise AlignmentError(
                    f"missing hidden state at (layer {resume}, position {state.filled(resume)})"
                )
            hiddens = [state.hidden[resume][p].copy() for p in range(start_pos, end_pos)]
        for layer in range(start_layer, end_layer + 1):
            hiddens = self._run_layer(state, layer, start_pos, hiddens)
        return np.stack(hiddens)

    # -- heads -------------------------------------------------------

    def exit_logits(self, hidden: np.ndarray, position: int, source_layer: int) -> TokenDistribution:
        """Shared unembedding head applied after the final normalization."""
        if hidden.shape != (self.d_model,):
            raise AlignmentError(f"hidden state must have {self.d_model} entries")
        logits = _rms_norm(hidden) @ self.unembedding
        return TokenDistribution(logits=logits, position=position, source_layer=source_layer)

    def exit_distribution(self, state: LayeredState, layer: int, position: int) -> TokenDistribution:
        hs = state.hidden_at(layer, position)
        return self.exit_logits(hs.values, position=position, source_layer=layer)

    # -- consistency oracle --------------------------------------------

    def reference_state(
        self,
        tokens: Sequence[int],
        fills: Sequence[int],
        buffered_layers: Sequence[int],
    ) -> LayeredState:
        """Fresh monolithic recompute brought to the given per-layer extents."""
        ref = self.new_state(buffered_layers)
        ref.set_tokens(tokens)
        if fills[0] > len(tokens):
            raise AlignmentError(f"layer 1 fill {fills[0]} exceeds token count {len(tokens)}")
        hiddens = [self._embed(ref.tokens[p], p) for p in range(fills[0])]
        prev_fill = fills[0]
        for layer in range(1, self.n_layers + 1):
            fill = fills[layer - 1]
            if fill > prev_fill:
                raise AlignmentError(
                    f"layer {layer} filled to {fill} beyond layer {layer - 1} ({prev_fill})"
                )
            hiddens = self._run_layer(ref, layer, 0, hiddens[:fill])
            prev_fill = fill
        return ref
