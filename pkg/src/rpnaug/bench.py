"""Augmentation cost benchmark: offline preprocessing versus in-loop work.

For every dataset size the harness times two things per method:

* preprocessing: the work done before training starts (the offline
  expansion pass for token-level methods, just configuration for the
  embedding-space methods);
* one epoch of input production: embedding lookups plus any in-loop
  augmentation, for all batches of that epoch.

Each measurement is repeated ``trials + 1`` times, the first run is thrown
away as warm-up and the median of the rest is reported.  Only scaling
trends are meaningful; absolute times depend on the machine.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from rpnaug.augment import FreeLbConfig, RpnConfig, freelb_init, freelb_update, rpn_augment
from rpnaug.data import PAD, LabeledDataset, pad_batch, synth_dataset
from rpnaug.errors import ConfigError
from rpnaug.model import TextCnn, TextCnnConfig, backward, embed, forward
from rpnaug.tensor import RngStream
from rpnaug.train import TokenAugConfig, TrainConfig, expand_dataset

METHODS = ("rpn", "freelb", "aeda", "eda_lite")
REPORT_HEADER = ("method", "size", "preprocess_time_s", "per_epoch_time_s",
                 "per_batch_augment_time_us")


@dataclass
class BenchReport:
    method: str
    sizes: list
    preprocess_time_s: list = field(default_factory=list)
    per_epoch_time_s: list = field(default_factory=list)
    per_batch_augment_time_us: list = field(default_factory=list)
    slope: float = 0.0
    slope_ci: tuple = (0.0, 0.0)
    r_squared: float = 0.0

    def rows(self):
        for i, n in enumerate(self.sizes):
            yield (self.method, n, self.preprocess_time_s[i], self.per_epoch_time_s[i],
                   self.per_batch_augment_time_us[i])


@dataclass(frozen=True)
class BenchSetup:
    copies: int = 3
    batch_size: int = 32
    seq_len: int = 32
    embed_dim: int = 32
    vocab_size: int = 1000
    seed: int = 0


def fit_line(x, y, confidence=0.95):
    """Least-squares slope, its two-sided confidence interval and R^2."""
    fit = stats.linregress(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    t = stats.t.ppf(0.5 + confidence / 2, len(x) - 2)
    half = t * fit.stderr
    return fit.slope, (fit.slope - half, fit.slope + half), fit.rvalue ** 2


def _median_time(fn, trials):
    times = []
    for _ in range(trials + 1):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times[1:])


def _preprocess(method, data: LabeledDataset, setup: BenchSetup):
    if method == "rpn":
        return lambda: (RpnConfig(epsilon=0.3, steps=setup.copies), RngStream(setup.seed))
    if method == "freelb":
        return lambda: (FreeLbConfig(ascent_steps=setup.copies), RngStream(setup.seed))
    cfg = TrainConfig(seed=setup.seed, mode=method, token_aug=TokenAugConfig(copies=setup.copies))
    return lambda: expand_dataset(data, cfg, setup.seq_len)


def _epoch(method, data: LabeledDataset, setup: BenchSetup, model: TextCnn):
    V = model.params["embedding"]
    seqs = data.sequences
    if method in ("aeda", "eda_lite"):
        cfg = TrainConfig(seed=setup.seed, mode=method, token_aug=TokenAugConfig(copies=setup.copies))
        seqs = expand_dataset(data, cfg, setup.seq_len).sequences
    batches = [pad_batch(seqs[i:i + setup.batch_size], setup.seq_len)
               for i in range(0, len(seqs), setup.batch_size)]
    rpn_cfg = RpnConfig(epsilon=0.3, steps=setup.copies)
    fl_cfg = FreeLbConfig(ascent_steps=setup.copies)
    rng = RngStream(setup.seed)

    def run():
        for b, ids in enumerate(batches):
            X = embed(ids, V)
            mask = (ids != PAD).astype(np.float64)
            if method == "rpn":
                rpn_augment(X, rpn_cfg, rng.derive("bench", b), pad_mask=mask)
            elif method == "freelb":
                labels = np.zeros(len(ids), dtype=np.int64)
                delta = freelb_init(X.shape, fl_cfg, rng.derive("bench", b))
                for _ in range(fl_cfg.ascent_steps):
                    res = forward(model, X + delta, labels, pad_mask=mask)
                    delta = freelb_update(delta, backward(model, res.cache).d_input, fl_cfg)

    return run, len(batches)


def bench_augment(method, sizes, trials=5, setup: BenchSetup = BenchSetup()) -> BenchReport:
    """Median timings per dataset size plus a linear fit of preprocessing time."""
    if method not in METHODS:
        raise ConfigError(f"unknown bench method {method!r}; expected one of {METHODS}")
    sizes = [int(n) for n in sizes]
    if not sizes:
        raise ConfigError("bench needs at least one dataset size")
    if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] <= 0:
        raise ConfigError(f"bench sizes must be positive and strictly increasing, got {sizes}")
    if trials < 3:
        raise ConfigError(f"bench needs at least 3 trials, got {trials}")
    corpus = synth_dataset(sizes[-1], setup.vocab_size, setup.seq_len, 2, RngStream(setup.seed))
    model = TextCnn.init(TextCnnConfig(vocab_size=setup.vocab_size, embed_dim=setup.embed_dim,
                                       kernel_sizes=(3, 4, 5), num_filters=16,
                                       max_len=setup.seq_len), RngStream(setup.seed))
    report = BenchReport(method, sizes)
    for n in sizes:
        data = LabeledDataset(corpus.sequences[:n], corpus.num_classes, "train", corpus.vocab)
        report.preprocess_time_s.append(_median_time(_preprocess(method, data, setup), trials))
        run, n_batches = _epoch(method, data, setup, model)
        epoch_time = _median_time(run, trials)
        report.per_epoch_time_s.append(epoch_time)
        report.per_batch_augment_time_us.append(1e6 * epoch_time / n_batches)
    if len(sizes) >= 3:
        report.slope, report.slope_ci, report.r_squared = fit_line(sizes, report.preprocess_time_s)
    return report


def write_reports(reports, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for report in reports:
            writer.writerows(report.rows())


def summary_table(reports) -> str:
    lines = [f"{'method':<10}{'size':>8}{'preprocess s':>15}{'epoch s':>12}{'batch us':>12}"]
    for report in reports:
        for method, n, pre, epoch, per_batch in report.rows():
            lines.append(f"{method:<10}{n:>8}{pre:>15.6f}{epoch:>12.4f}{per_batch:>12.1f}")
        lo, hi = report.slope_ci
        lines.append(f"  {report.method}: preprocess slope {report.slope:.3e} s/sample "
                     f"(95% CI {lo:.3e} .. {hi:.3e}), R^2 {report.r_squared:.3f}")
    return "\n".join(lines)
