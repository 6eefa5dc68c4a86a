"""Augmentors: random position noise on embedding tensors, the FreeLB
perturbation step, and two token-level baselines (AEDA, EDA swap/delete).

Random position noise needs no gradients.  Each step samples a 0/1 mask
over the ``(batch, seq, dim)`` embedding cells, moves the masked values
together with their mask rows through a random row permutation, and writes
them into the cells the permuted mask marks.  A cell therefore either keeps
its value or takes the value of the same embedding dimension from another
word.

This module deliberately imports nothing from the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rpnaug.errors import ConfigError
from rpnaug.tensor import RngStream, frobenius_norm, hadamard

PER_SAMPLE = "per-sample-rows"
CROSS_BATCH = "cross-batch-rows"
PUNCTUATION = (".", ";", "?", ":", "!", ",")


@dataclass(frozen=True)
class RpnConfig:
    epsilon: float = 0.3
    steps: int = 3
    shuffle_scope: str = PER_SAMPLE
    mask_padding: bool = False
    # Use X - X*P' + X*P (unshuffled values) instead of the shuffled update.
    eq4_literal: bool = False

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"rpn.epsilon must lie in [0, 1], got {self.epsilon}")
        if self.steps < 0 or int(self.steps) != self.steps:
            raise ConfigError(f"rpn.steps must be a non-negative integer, got {self.steps}")
        if self.shuffle_scope not in (PER_SAMPLE, CROSS_BATCH):
            raise ConfigError(f"rpn.shuffle_scope must be {PER_SAMPLE!r} or {CROSS_BATCH!r}")


@dataclass(frozen=True)
class FreeLbConfig:
    norm_bound: float = 1e-2
    step_size: float = 1e-4
    ascent_steps: int = 3
    init_range: float = 1e-4

    def __post_init__(self):
        if self.norm_bound <= 0:
            raise ConfigError(f"freelb.norm_bound must be positive, got {self.norm_bound}")
        if self.step_size < 0:
            raise ConfigError(f"freelb.step_size must be non-negative, got {self.step_size}")
        if self.ascent_steps < 1 or int(self.ascent_steps) != self.ascent_steps:
            raise ConfigError(f"freelb.ascent_steps must be a positive integer, got {self.ascent_steps}")
        if self.init_range < 0:
            raise ConfigError(f"freelb.init_range must be non-negative, got {self.init_range}")


@dataclass
class RpnStep:
    """One noise step.

    ``mask`` is the permuted mask P' (same shape as X).  ``perm`` has shape
    ``(batch, seq)`` for per-sample scope, where row ``i`` of sample ``b``
    receives from row ``perm[b, i]``; for cross-batch scope it is a single
    permutation over the ``batch * seq`` flattened rows.
    """

    X_next: np.ndarray
    mask: np.ndarray
    perm: np.ndarray
    scope: str = PER_SAMPLE

    def carry(self, values: np.ndarray) -> np.ndarray:
        """Apply this step's cell moves to any array shaped like X."""
        moved = _permute(values, self.perm, self.scope)
        return np.where(self.mask == 1.0, moved, values)


def _permute(values, perm, scope):
    if scope == CROSS_BATCH:
        b, n, m = values.shape
        return values.reshape(b * n, m)[perm].reshape(b, n, m)
    return np.take_along_axis(values, perm[:, :, None], axis=1)


def _sample_mask_and_perm(gen, rows, dim, epsilon, n_valid):
    mask = (gen.random((rows, dim)) < epsilon).astype(np.float64)
    perm = np.arange(rows)
    perm[:n_valid] = gen.permutation(n_valid)
    if n_valid < rows:
        mask[n_valid:] = 0.0
    return mask, perm


def rpn_step(X, cfg: RpnConfig, rng: RngStream, sample_ids=None, pad_mask=None) -> RpnStep:
    """Produce the next virtual sample from ``X`` without touching gradients.

    Per-sample scope draws each sample's mask and permutation from
    ``rng.derive(sample_id)`` (batch position when ``sample_ids`` is None),
    so a sample's noise does not depend on its batch neighbours.  With
    ``cfg.mask_padding`` and a ``pad_mask``, padded rows neither give nor
    receive values.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ConfigError(f"rpn_step expects a (batch, seq, dim) tensor, got shape {X.shape}")
    batch, seq, dim = X.shape
    lengths = np.full(batch, seq)
    if cfg.mask_padding and pad_mask is not None:
        lengths = np.asarray(pad_mask).sum(axis=1).astype(int)

    if cfg.shuffle_scope == PER_SAMPLE:
        ids = range(batch) if sample_ids is None else sample_ids
        P = np.empty_like(X)
        perm = np.empty((batch, seq), dtype=np.int64)
        for b, sid in enumerate(ids):
            gen = rng.derive(int(sid)).generator()
            P[b], perm[b] = _sample_mask_and_perm(gen, seq, dim, cfg.epsilon, lengths[b])
    else:
        gen = rng.generator()
        P = (gen.random(X.shape) < cfg.epsilon).astype(np.float64)
        valid = np.ones((batch, seq), dtype=bool)
        if cfg.mask_padding and pad_mask is not None:
            valid = np.asarray(pad_mask, dtype=bool)
        P[~valid] = 0.0
        flat_valid = np.flatnonzero(valid.reshape(-1))
        perm = np.arange(batch * seq)
        perm[flat_valid] = flat_valid[gen.permutation(flat_valid.size)]

    X_next, P_shuf = apply_position_noise(X, P, perm, cfg.shuffle_scope, cfg.eq4_literal)
    return RpnStep(X_next, P_shuf, perm, cfg.shuffle_scope)


def apply_position_noise(X, P, perm, scope=PER_SAMPLE, eq4_literal=False):
    """Move masked cells of ``X`` through ``perm``: returns ``(X_next, P')``.

    ``delta = X*P`` and ``P`` are permuted by the same row permutation and
    ``X_next = X - X*P' + delta'``.  The update is evaluated as a selection
    (``delta'`` where ``P'`` is set, ``X`` elsewhere), which equals the
    arithmetic form exactly except that it never flips the sign of a zero.
    """
    delta = hadamard(X, P)
    P_shuf = _permute(P, perm, scope)
    if eq4_literal:
        return X - hadamard(P_shuf, X) + delta, P_shuf
    delta_shuf = _permute(delta, perm, scope)
    return np.where(P_shuf == 1.0, delta_shuf, X), P_shuf


def rpn_chain(X0, cfg: RpnConfig, rng: RngStream, sample_ids=None, pad_mask=None):
    """Yield ``cfg.steps`` successive ``RpnStep`` objects starting from ``X0``."""
    X = X0
    for t in range(1, cfg.steps + 1):
        step = rpn_step(X, cfg, rng.derive("step", t), sample_ids, pad_mask)
        yield step
        X = step.X_next


def rpn_augment(X0, cfg: RpnConfig, rng: RngStream, sample_ids=None, pad_mask=None) -> list:
    """Virtual samples ``[X_1, ..., X_K]``, each derived from the previous one."""
    return [step.X_next for step in rpn_chain(X0, cfg, rng, sample_ids, pad_mask)]


def freelb_init(shape, cfg: FreeLbConfig, rng: RngStream) -> np.ndarray:
    if cfg.init_range == 0:
        return np.zeros(shape)
    return rng.generator().uniform(-cfg.init_range, cfg.init_range, size=shape)


def freelb_update(delta, grad_wrt_delta, cfg: FreeLbConfig) -> np.ndarray:
    """Normalised ascent step, then projection onto the Frobenius ball.

    The step is scaled by ``1/||delta||``; a zero ``delta`` uses divisor 1.
    """
    norm = frobenius_norm(delta)
    step = cfg.step_size * np.asarray(grad_wrt_delta) / (norm if norm > 0 else 1.0)
    updated = delta + step
    new_norm = frobenius_norm(updated)
    if new_norm > cfg.norm_bound:
        updated = updated * (cfg.norm_bound / new_norm)
    return updated


def aeda(tokens, insert_ratio: float, rng: RngStream) -> list:
    """Insert ``floor(ratio * len)`` punctuation marks at interior gaps.

    Interior gaps sit strictly between two tokens; one-token inputs fall back
    to the end gap.  Several marks may land in the same gap.
    """
    if insert_ratio < 0:
        raise ConfigError(f"insert_ratio must be non-negative, got {insert_ratio}")
    tokens = list(tokens)
    count = math.floor(insert_ratio * len(tokens))
    if count == 0:
        return tokens
    gen = rng.generator()
    low, high = (1, len(tokens) - 1) if len(tokens) >= 2 else (len(tokens), len(tokens))
    gaps = np.sort(gen.integers(low, high + 1, size=count))
    marks = gen.integers(0, len(PUNCTUATION), size=count)
    out, g = [], 0
    for pos, tok in enumerate(tokens + [None]):
        while g < count and gaps[g] == pos:
            out.append(PUNCTUATION[marks[g]])
            g += 1
        if tok is not None:
            out.append(tok)
    return out


def eda_lite(tokens, op: str, strength: float, rng: RngStream) -> list:
    """EDA random swap (``ceil(strength*len)`` transpositions) or random deletion."""
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(f"strength must lie in [0, 1], got {strength}")
    tokens = list(tokens)
    if strength == 0 or not tokens:
        return tokens
    gen = rng.generator()
    if op == "random_swap":
        if len(tokens) < 2:
            return tokens
        for _ in range(math.ceil(strength * len(tokens))):
            i, j = gen.choice(len(tokens), size=2, replace=False)
            tokens[i], tokens[j] = tokens[j], tokens[i]
        return tokens
    if op == "random_delete":
        keep = gen.random(len(tokens)) >= strength
        if not keep.any():
            return [tokens[int(gen.integers(len(tokens)))]]
        return [tok for tok, k in zip(tokens, keep) if k]
    raise ConfigError(f"unknown EDA operation {op!r}; expected random_swap or random_delete")
