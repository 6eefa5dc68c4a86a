"""TextCNN classifier with hand-written forward and backward passes.

The network consumes an embedding batch ``X`` of shape ``(batch, seq, dim)``
rather than token ids, so augmentors can hand it perturbed embeddings.
Gradients reach the embedding table only through the token ids passed to
``forward``; a batch forwarded without them is treated as detached.

Layout per kernel length ``k``: ``conv{k}.weight`` has shape
``(k, dim, filters)``, outputs are ReLU'd, max-pooled over time and
concatenated, then dropout and a dense head produce the logits.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from rpnaug.data import PAD, pad_batch
from rpnaug.errors import ConfigError, ContractError, DataError, NumericError
from rpnaug.tensor import RngStream

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TextCnnConfig:
    vocab_size: int
    num_classes: int = 2
    embed_dim: int = 64
    kernel_sizes: tuple = (10, 20, 30)
    num_filters: int = 32
    dropout: float = 0.1
    max_len: int = 64
    zero_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if self.vocab_size < 2 or self.num_classes < 2:
            raise ConfigError("vocab_size and num_classes must both be at least 2")
        if self.embed_dim < 1 or self.num_filters < 1 or not self.kernel_sizes:
            raise ConfigError("embed_dim, num_filters and kernel_sizes must be non-empty/positive")
        if max(self.kernel_sizes) > self.max_len or min(self.kernel_sizes) < 1:
            raise ConfigError(f"kernel lengths {self.kernel_sizes} must fit in max_len={self.max_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


class TextCnn:
    def __init__(self, config: TextCnnConfig, params: dict):
        self.config = config
        self.params = params
        self.velocity = {name: np.zeros_like(p) for name, p in params.items()}
        self.version = 0

    @classmethod
    def init(cls, config: TextCnnConfig, rng: RngStream) -> "TextCnn":
        gen = rng.generator()
        d, f = config.embed_dim, config.num_filters
        params = {}
        emb = gen.uniform(-0.1, 0.1, size=(config.vocab_size, d))
        emb[PAD] = 0.0
        params["embedding"] = emb
        for k in config.kernel_sizes:
            bound = 1.0 / np.sqrt(k * d)
            params[f"conv{k}.weight"] = gen.uniform(-bound, bound, size=(k, d, f))
            params[f"conv{k}.bias"] = gen.uniform(-bound, bound, size=f)
        hidden = f * len(config.kernel_sizes)
        if config.zero_head:
            params["head.weight"] = np.zeros((hidden, config.num_classes))
            params["head.bias"] = np.zeros(config.num_classes)
        else:
            bound = 1.0 / np.sqrt(hidden)
            params["head.weight"] = gen.uniform(-bound, bound, size=(hidden, config.num_classes))
            params["head.bias"] = gen.uniform(-bound, bound, size=config.num_classes)
        model = cls(config, params)
        log.info("TextCnn with %d parameters", model.num_parameters())
        return model

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "TextCnn":
        clone = TextCnn(self.config, {k: v.copy() for k, v in self.params.items()})
        clone.velocity = {k: v.copy() for k, v in self.velocity.items()}
        return clone


@dataclass
class GradientSet:
    params: dict
    d_input: np.ndarray


@dataclass
class ForwardResult:
    loss: float
    logits: np.ndarray
    cache: dict = field(repr=False)
    losses: np.ndarray = None


def embed(token_ids, weights: np.ndarray) -> np.ndarray:
    """Row lookup ``weights[token_ids]``: a one-hot matrix times the table."""
    ids = np.asarray(token_ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weights.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of size {weights.shape[0]}")
    return weights[ids]


def embed_sequences(sequences, model: TextCnn):
    """Pad ``sequences`` to ``max_len`` and look them up: ``(ids, X)``."""
    ids = pad_batch(sequences, model.config.max_len)
    return ids, embed(ids, model.params["embedding"])


def _require_finite(arr, layer):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite activation in layer {layer!r}")


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(model: TextCnn, X, labels, dropout_rng: RngStream | None = None,
            token_ids=None, pad_mask=None, loss_weights=None) -> ForwardResult:
    """Mean softmax cross-entropy of the classifier on embedding batch ``X``.

    ``pad_mask`` (batch, seq) zeroes padded positions before the convolutions.
    ``token_ids`` routes the input gradient into the embedding table during
    ``backward``: shape (batch, seq) for plain lookups, or (batch, seq, dim)
    when each cell was copied from a different token.  Dropout runs only when
    ``dropout_rng`` is given.
    """
    cfg = model.config
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 3 or X.shape[2] != cfg.embed_dim:
        raise ConfigError(f"expected input of shape (batch, seq, {cfg.embed_dim}), got {X.shape}")
    batch, seq, _ = X.shape
    if labels.shape != (batch,):
        raise ConfigError(f"{batch} inputs but {labels.size} labels")
    if max(cfg.kernel_sizes) > seq:
        raise ConfigError(f"sequence length {seq} shorter than kernel {max(cfg.kernel_sizes)}")
    if pad_mask is None:
        pad_mask = np.ones((batch, seq))
    pad_mask = np.asarray(pad_mask, dtype=np.float64)
    weights = np.ones(batch) if loss_weights is None else np.asarray(loss_weights, dtype=np.float64)
    _require_finite(X, "input")

    Xm = X * pad_mask[:, :, None]
    branches = []
    pooled = []
    for k in cfg.kernel_sizes:
        W = model.params[f"conv{k}.weight"]
        win = sliding_window_view(Xm, k, axis=1)  # (batch, T, dim, k)
        win = win.transpose(0, 1, 3, 2).reshape(batch, seq - k + 1, k * cfg.embed_dim)
        pre = win @ W.reshape(k * cfg.embed_dim, -1) + model.params[f"conv{k}.bias"]
        _require_finite(pre, f"conv{k}")
        act = np.maximum(pre, 0.0)
        arg = act.argmax(axis=1)  # (batch, filters)
        pooled.append(np.take_along_axis(act, arg[:, None, :], axis=1)[:, 0, :])
        branches.append((k, win, pre, arg))
    hidden = np.concatenate(pooled, axis=1)

    if dropout_rng is not None and cfg.dropout > 0.0:
        keep = dropout_rng.generator().random(hidden.shape) >= cfg.dropout
        drop = keep / (1.0 - cfg.dropout)
    else:
        drop = np.ones_like(hidden)
    hidden_d = hidden * drop
    logits = hidden_d @ model.params["head.weight"] + model.params["head.bias"]
    _require_finite(logits, "head")

    logp = _log_softmax(logits)
    per_sample = -logp[np.arange(batch), labels]
    loss = math.fsum(weights * per_sample) / batch
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    cache = {
        "version": model.version, "model": id(model), "shape": X.shape, "pad_mask": pad_mask,
        "branches": branches, "drop": drop, "hidden_d": hidden_d, "probs": np.exp(logp),
        "labels": labels, "weights": weights, "token_ids": token_ids,
    }
    return ForwardResult(loss, logits, cache, per_sample)


def backward(model: TextCnn, cache: dict) -> GradientSet:
    """Gradients of the ``forward`` loss for every parameter and for ``X``."""
    if cache.get("model") != id(model) or cache.get("version") != model.version:
        raise ContractError("backward called with a cache from a different or since-updated model")
    cfg = model.config
    batch, seq, dim = cache["shape"]
    grads = {}

    d_logits = cache["probs"].copy()
    d_logits[np.arange(batch), cache["labels"]] -= 1.0
    d_logits *= cache["weights"][:, None] / batch
    grads["head.weight"] = cache["hidden_d"].T @ d_logits
    grads["head.bias"] = d_logits.sum(axis=0)
    d_hidden = (d_logits @ model.params["head.weight"].T) * cache["drop"]

    dX = np.zeros((batch, seq, dim))
    f = cfg.num_filters
    for i, (k, win, pre, arg) in enumerate(cache["branches"]):
        steps = seq - k + 1
        d_pool = d_hidden[:, i * f:(i + 1) * f]
        gate = np.take_along_axis(pre, arg[:, None, :], axis=1)[:, 0, :] > 0.0
        d_pre = np.zeros((batch, steps, f))
        b_idx, f_idx = np.nonzero(gate)
        np.add.at(d_pre, (b_idx, arg[b_idx, f_idx], f_idx), d_pool[b_idx, f_idx])
        W = model.params[f"conv{k}.weight"]
        grads[f"conv{k}.weight"] = (
            win.reshape(-1, k * dim).T @ d_pre.reshape(-1, f)).reshape(k, dim, f)
        grads[f"conv{k}.bias"] = d_pre.sum(axis=(0, 1))
        d_win = (d_pre @ W.reshape(k * dim, f).T).reshape(batch, steps, k, dim)
        for j in range(k):
            dX[:, j:j + steps, :] += d_win[:, :, j, :]
    dX *= cache["pad_mask"][:, :, None]

    grads["embedding"] = embedding_gradient(cache["token_ids"], dX, cfg.vocab_size)
    grads = {name: grads[name] for name in model.params}
    return GradientSet(grads, dX)


def embedding_gradient(token_ids, dX, vocab_size) -> np.ndarray:
    """Scatter ``dX`` into table rows; zero when ``token_ids`` is None."""
    dim = dX.shape[2]
    dV = np.zeros((vocab_size, dim))
    if token_ids is None:
        return dV
    ids = np.asarray(token_ids)
    if ids.ndim == 2:
        np.add.at(dV, ids.reshape(-1), dX.reshape(-1, dim))
    else:
        cols = np.broadcast_to(np.arange(dim), ids.shape)
        np.add.at(dV, (ids.reshape(-1), cols.reshape(-1)), dX.reshape(-1))
    dV[PAD] = 0.0
    return dV


def add_gradients(acc: dict | None, grads: dict, scale: float = 1.0) -> dict:
    if acc is None:
        return {k: g * scale for k, g in grads.items()} if scale != 1.0 else dict(grads)
    return {k: acc[k] + (g * scale if scale != 1.0 else g) for k, g in grads.items()}


def sgd_step(model: TextCnn, grads: dict, lr: float, momentum: float = 0.0) -> TextCnn:
    """In-place ``v <- momentum*v + g``; ``theta <- theta - lr*v``."""
    if lr < 0 or not 0.0 <= momentum < 1.0:
        raise ConfigError(f"need lr >= 0 and momentum in [0, 1), got lr={lr} momentum={momentum}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
    for name, g in grads.items():
        v = model.velocity[name]
        if momentum:
            v = momentum * v + g
        else:
            v = g
        model.velocity[name] = v
        model.params[name] = model.params[name] - lr * v
    model.params["embedding"][PAD] = 0.0
    model.version += 1
    return model


def save_checkpoint(model: TextCnn, path):
    meta = {"format_version": CHECKPOINT_VERSION, "config": asdict(model.config)}
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"velocity/{k}": v for k, v in model.velocity.items()})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> TextCnn:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path) as npz:
        meta = json.loads(bytes(npz["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        params = {k.split("/", 1)[1]: npz[k] for k in npz.files if k.startswith("param/")}
        velocity = {k.split("/", 1)[1]: npz[k] for k in npz.files if k.startswith("velocity/")}
    model = TextCnn(TextCnnConfig(**meta["config"]), params)
    model.velocity.update(velocity)
    return model
