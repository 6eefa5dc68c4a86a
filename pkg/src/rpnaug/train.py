"""Training loops for every augmentation mode, evaluation and metrics.

All randomness is derived from ``RngStream(cfg.seed)`` by purpose:

* ``("shuffle", epoch)``                 batch order
* ``("dropout", epoch, batch, n, s)``    dropout mask of one forward pass
* ``("rpn", epoch)`` then step, sample   noise of one sample at one step
* ``("freelb", epoch, batch, n)``        initial perturbation
* ``("token_aug", index, copy)``         offline token-level copies

The baseline and every degenerate configuration of the other modes draw
the same streams, which is what makes them bitwise comparable.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from rpnaug.augment import (FreeLbConfig, RpnConfig, aeda, eda_lite, freelb_init,
                            freelb_update, rpn_step)
from rpnaug.data import PAD, LabeledDataset, TokenSequence, pad_batch, tokenize
from rpnaug.errors import ConfigError, NumericError
from rpnaug.model import TextCnn, add_gradients, backward, embed, forward, sgd_step
from rpnaug.tensor import RngStream, frobenius_norm

log = logging.getLogger(__name__)

MODES = ("baseline", "rpn", "freelb", "freelb_rpn", "aeda", "eda_lite")
SCHEDULES = ("literal", "average")
METRICS_HEADER = ("epoch", "split", "loss", "accuracy", "wall_time_s")


@dataclass(frozen=True)
class TokenAugConfig:
    copies: int = 3
    aeda_ratio: float = 0.3
    eda_op: str = "random_swap"
    eda_strength: float = 0.1

    def __post_init__(self):
        if self.copies < 0:
            raise ConfigError(f"token_aug.copies must be non-negative, got {self.copies}")
        if self.eda_op not in ("random_swap", "random_delete"):
            raise ConfigError(f"token_aug.eda_op must be random_swap or random_delete, got {self.eda_op!r}")
        if not 0.0 <= self.eda_strength <= 1.0 or self.aeda_ratio < 0:
            raise ConfigError("token_aug.eda_strength must lie in [0, 1] and aeda_ratio be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    mode: str = "baseline"
    rpn: RpnConfig = RpnConfig()
    freelb: FreeLbConfig = FreeLbConfig()
    token_aug: TokenAugConfig = TokenAugConfig()
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    eval_every: int = 1
    # "literal": update after every noise step with the running gradient sum;
    # "average": one update per batch with the averaged gradient.
    update_schedule: str = "literal"
    # Route virtual-sample gradients back into the embedding table.
    rpn_embedding_grad: bool = False
    wall_time: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.update_schedule not in SCHEDULES:
            raise ConfigError(f"update_schedule must be one of {SCHEDULES}")
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("lr must be >= 0 and momentum in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and eval_every >= 1 are required")


PRESETS = {
    # Pretrained-encoder fine-tuning settings: eps 0.3, three noise steps, lr 3e-5.
    "encoder-finetune": {"mode": "rpn", "rpn.epsilon": "0.3", "rpn.steps": "3", "lr": "3e-5"},
    # TextCNN settings: lr 1e-4, ten epochs, eps 0.3.
    "textcnn": {"mode": "rpn", "rpn.epsilon": "0.3", "rpn.steps": "3", "lr": "1e-4", "epochs": "10"},
    "freelb-rpn": {"mode": "freelb_rpn", "rpn.epsilon": "0.3", "rpn.steps": "3",
                   "freelb.ascent_steps": "3"},
}


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)
    batch_losses: list = field(default_factory=list)

    def add(self, epoch, split, loss, accuracy, wall_time_s):
        if not 0.0 <= accuracy <= 1.0 or loss < 0:
            raise NumericError(f"invalid metrics: loss={loss} accuracy={accuracy}")
        if self.records and wall_time_s < self.records[-1]["wall_time_s"]:
            raise NumericError("metrics timestamps must not decrease")
        self.records.append({"epoch": epoch, "split": split, "loss": loss,
                             "accuracy": accuracy, "wall_time_s": wall_time_s})

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for r in self.records:
                writer.writerow([r["epoch"], r["split"], repr(r["loss"]), repr(r["accuracy"]),
                                 f"{r['wall_time_s']:.6f}"])


@dataclass
class TrainResult:
    model: TextCnn
    metrics: MetricsLog


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    logits: np.ndarray


@dataclass
class _Batch:
    epoch: int
    index: int
    sample_ids: np.ndarray
    ids: np.ndarray
    pad_mask: np.ndarray
    labels: np.ndarray


def _batches(dataset: LabeledDataset, cfg: TrainConfig, epoch: int, max_len: int):
    run = RngStream(cfg.seed)
    order = run.derive("shuffle", epoch).generator().permutation(len(dataset))
    for index, start in enumerate(range(0, len(order), cfg.batch_size)):
        chosen = order[start:start + cfg.batch_size]
        seqs = [dataset.sequences[i] for i in chosen]
        ids = pad_batch(seqs, max_len)
        yield _Batch(epoch, index, chosen, ids, (ids != PAD).astype(np.float64),
                     np.array([s.label for s in seqs], dtype=np.int64))


def _dropout_rng(cfg, batch, outer, inner):
    return RngStream(cfg.seed).derive("dropout", batch.epoch, batch.index, outer, inner)


def _forward_backward(model, X, batch, dropout_rng, token_ids, where):
    try:
        res = forward(model, X, batch.labels, dropout_rng=dropout_rng, token_ids=token_ids,
                      pad_mask=batch.pad_mask)
    except NumericError as exc:
        raise NumericError(f"epoch {batch.epoch} batch {batch.index} {where}: {exc}") from exc
    return res, backward(model, res.cache)


def baseline_batch(model, batch, cfg) -> float:
    X = embed(batch.ids, model.params["embedding"])
    res, grads = _forward_backward(model, X, batch, _dropout_rng(cfg, batch, 0, 0), batch.ids, "step 0")
    sgd_step(model, grads.params, cfg.lr, cfg.momentum)
    return res.loss


def rpn_batch(model, batch, cfg) -> float:
    """Original sample plus ``K`` noise steps, losses weighted ``1/(K+1)``.

    Only the pass on the original sample (t=0) reaches the embedding table
    unless ``cfg.rpn_embedding_grad`` is set, in which case each cell's
    gradient goes to the token its value came from.
    """
    K = cfg.rpn.steps
    scale = 1.0 / (K + 1)
    X = embed(batch.ids, model.params["embedding"])
    noise = RngStream(cfg.seed).derive("rpn", batch.epoch)
    sources = np.broadcast_to(batch.ids[:, :, None], X.shape) if cfg.rpn_embedding_grad else None
    acc, losses = None, []
    for t in range(K + 1):
        token_ids = batch.ids if t == 0 else sources
        res, grads = _forward_backward(model, X, batch, _dropout_rng(cfg, batch, t, 0), token_ids,
                                       f"step {t}")
        losses.append(res.loss)
        acc = add_gradients(acc, grads.params, scale)
        if cfg.update_schedule == "literal":
            sgd_step(model, acc, cfg.lr, cfg.momentum)
        if t < K:
            step = rpn_step(X, cfg.rpn, noise.derive("step", t + 1), batch.sample_ids, batch.pad_mask)
            X = step.X_next
            if sources is not None:
                sources = step.carry(sources)
    if cfg.update_schedule == "average":
        sgd_step(model, acc, cfg.lr, cfg.momentum)
    return scale * math.fsum(losses)


def combo_loss_scale(rpn_steps: int, ascent_steps: int) -> float:
    """Weight of each inner loss term when FreeLB runs on every noise sample."""
    return 1.0 / ((rpn_steps + 1) * ascent_steps)


def freelb_batch(model, batch, cfg, rpn_steps=0, norm_log=None) -> float:
    """FreeLB ascent on ``X_0`` and on each of ``rpn_steps`` noise samples.

    Parameter gradients of every inner step are accumulated with weight
    ``combo_loss_scale`` and applied once per batch.
    """
    fl = cfg.freelb
    scale = combo_loss_scale(rpn_steps, fl.ascent_steps)
    X = embed(batch.ids, model.params["embedding"])
    noise = RngStream(cfg.seed).derive("rpn", batch.epoch)
    run = RngStream(cfg.seed)
    sources = np.broadcast_to(batch.ids[:, :, None], X.shape) if cfg.rpn_embedding_grad else None
    acc, losses = None, []
    for n in range(rpn_steps + 1):
        token_ids = batch.ids if n == 0 else sources
        delta = freelb_init(X.shape, fl, run.derive("freelb", batch.epoch, batch.index, n))
        delta = delta * batch.pad_mask[:, :, None]
        for s in range(fl.ascent_steps):
            res, grads = _forward_backward(model, X + delta, batch, _dropout_rng(cfg, batch, n, s),
                                           token_ids, f"sample {n} ascent {s}")
            losses.append(res.loss)
            acc = add_gradients(acc, grads.params, scale)
            delta = freelb_update(delta, grads.d_input, fl)
            if norm_log is not None:
                norm_log.append(frobenius_norm(delta))
        if n < rpn_steps:
            step = rpn_step(X, cfg.rpn, noise.derive("step", n + 1), batch.sample_ids, batch.pad_mask)
            X = step.X_next
            if sources is not None:
                sources = step.carry(sources)
    sgd_step(model, acc, cfg.lr, cfg.momentum)
    return scale * math.fsum(losses)


def evaluate(model: TextCnn, dataset: LabeledDataset, batch_size=256) -> EvalResult:
    """Dropout-free loss and accuracy; ties in the logits go to the lowest class."""
    if len(dataset) == 0:
        raise ConfigError(f"cannot evaluate on empty split {dataset.split!r}")
    per_sample, logits = [], []
    for start in range(0, len(dataset), batch_size):
        seqs = dataset.sequences[start:start + batch_size]
        ids = pad_batch(seqs, model.config.max_len)
        labels = np.array([s.label for s in seqs], dtype=np.int64)
        res = forward(model, embed(ids, model.params["embedding"]), labels,
                      pad_mask=(ids != PAD).astype(np.float64))
        per_sample.append(res.losses)
        logits.append(res.logits)
    per_sample = np.concatenate(per_sample)
    logits = np.concatenate(logits)
    accuracy = float(np.mean(logits.argmax(axis=1) == dataset.labels()))
    return EvalResult(math.fsum(per_sample) / len(dataset), accuracy, logits)


def _run(model, dataset, cfg, batch_fn, dev=None, train_eval=None) -> TrainResult:
    metrics = MetricsLog()
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        for batch in _batches(dataset, cfg, epoch, model.config.max_len):
            loss = batch_fn(model, batch, cfg)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {batch.index}")
            metrics.batch_losses.append(loss)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            for split, data in (("train", train_eval or dataset), ("dev", dev)):
                if data is None or len(data) == 0:
                    continue
                res = evaluate(model, data)
                elapsed = time.perf_counter() - start if cfg.wall_time else 0.0
                metrics.add(epoch, split, res.loss, res.accuracy, elapsed)
                log.info("epoch %d %s loss %.4f acc %.4f", epoch, split, res.loss, res.accuracy)
    return TrainResult(model, metrics)


def _require_mode(cfg, *modes):
    if cfg.mode not in modes:
        raise ConfigError(f"expected mode in {modes}, got {cfg.mode!r}")


def train_baseline(model, dataset, cfg, dev=None) -> TrainResult:
    _require_mode(cfg, "baseline")
    return _run(model, dataset, cfg, baseline_batch, dev)


def train_rpn(model, dataset, cfg, dev=None) -> TrainResult:
    _require_mode(cfg, "rpn")
    return _run(model, dataset, cfg, rpn_batch, dev)


def train_freelb(model, dataset, cfg, dev=None, norm_log=None) -> TrainResult:
    _require_mode(cfg, "freelb")
    return _run(model, dataset, cfg,
                lambda m, b, c: freelb_batch(m, b, c, 0, norm_log), dev)


def train_freelb_rpn(model, dataset, cfg, dev=None, norm_log=None) -> TrainResult:
    """Outer loop over ``rpn.steps`` noise samples, ``freelb.ascent_steps`` inside."""
    _require_mode(cfg, "freelb_rpn")
    return _run(model, dataset, cfg,
                lambda m, b, c: freelb_batch(m, b, c, c.rpn.steps, norm_log), dev)


def augment_tokens(tokens, cfg: TrainConfig, rng: RngStream) -> list:
    ta = cfg.token_aug
    if cfg.mode == "aeda":
        return aeda(tokens, ta.aeda_ratio, rng)
    return eda_lite(tokens, ta.eda_op, ta.eda_strength, rng)


def expand_dataset(dataset: LabeledDataset, cfg: TrainConfig, max_len: int) -> LabeledDataset:
    """Originals followed by ``copies`` augmented versions of every sample."""
    _require_mode(cfg, "aeda", "eda_lite")
    if dataset.vocab is None:
        raise ConfigError("token-level augmentation needs a dataset with a vocabulary")
    run = RngStream(cfg.seed)
    extra = []
    for copy in range(1, cfg.token_aug.copies + 1):
        for i, seq in enumerate(dataset.sequences):
            tokens = augment_tokens(tokenize(seq.raw_text), cfg, run.derive("token_aug", i, copy))
            ids = tuple(dataset.vocab.encode(tokens)[:max_len])
            extra.append(TokenSequence(ids, seq.label, " ".join(tokens)))
    return replace(dataset, sequences=list(dataset.sequences) + extra)


def train_token_aug(model, dataset, cfg, dev=None) -> TrainResult:
    expanded = expand_dataset(dataset, cfg, model.config.max_len)
    return _run(model, expanded, cfg, baseline_batch, dev, train_eval=dataset)


def train(model, dataset, cfg: TrainConfig, dev=None) -> TrainResult:
    if cfg.mode == "baseline":
        return train_baseline(model, dataset, cfg, dev)
    if cfg.mode == "rpn":
        return train_rpn(model, dataset, cfg, dev)
    if cfg.mode == "freelb":
        return train_freelb(model, dataset, cfg, dev)
    if cfg.mode == "freelb_rpn":
        return train_freelb_rpn(model, dataset, cfg, dev)
    return train_token_aug(model, dataset, cfg, dev)
