"""Command-line entry point: ``rpnaug {train,eval,augment,grid,bench}``.

Every subcommand takes ``--config FILE`` plus ``key=value`` overrides and
validates the whole configuration before reading any data.

Exit codes: 0 success, 2 usage/config error, 3 data/IO error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from rpnaug import bench as bench_mod
from rpnaug import config as cfgmod
from rpnaug.augment import rpn_chain
from rpnaug.data import TsvSchema, Vocabulary, load_splits, load_tsv, read_manifest, synth_dataset
from rpnaug.dump import read_tensor, write_tensor, write_trace
from rpnaug.errors import ConfigError, DataError, RpnAugError
from rpnaug.model import TextCnn, TextCnnConfig, load_checkpoint, save_checkpoint
from rpnaug.tensor import RngStream
from rpnaug.train import evaluate, train

log = logging.getLogger("rpnaug")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _flatten(obj, prefix=""):
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = value
    return out


def _model_config(values, vocab_size, num_classes) -> TextCnnConfig:
    kwargs = {k.split(".", 1)[1]: v for k, v in values.items()
              if k.startswith("model.") and k != "model.vocab_size"}
    return TextCnnConfig(vocab_size=vocab_size, num_classes=num_classes, **kwargs)


def _schema(values) -> TsvSchema:
    def col(key, default):
        raw = values.get(key, default)
        return int(raw) if isinstance(raw, str) and raw.isdigit() else raw
    return TsvSchema(col("data.text_column", 0), col("data.label_column", 1),
                     values.get("data.has_header", True))


def _check_data_source(values):
    sources = [k for k in ("data.manifest", "data.train") if k in values]
    if values.get("data.synthetic"):
        sources.append("data.synthetic")
    if len(sources) != 1:
        raise ConfigError("set exactly one of data.manifest, data.train or data.synthetic=true")


def _load_data(values) -> dict:
    if values.get("data.synthetic"):
        s = {**cfgmod.SYNTHETIC_DEFAULTS, **values}
        root = RngStream(values["seed"]).derive("data")
        args = (s["data.synthetic.vocab_size"], s["data.synthetic.seq_len"],
                s["data.synthetic.num_classes"])
        splits = {"train": synth_dataset(s["data.synthetic.samples"], *args, root.derive("train"))}
        if s["data.synthetic.dev_samples"] > 0:
            dev = synth_dataset(s["data.synthetic.dev_samples"], *args, root.derive("dev"), split="dev")
            dev.vocab = splits["train"].vocab
            splits["dev"] = dev
        return splits
    paths = {}
    if "data.manifest" in values:
        manifest = read_manifest(values["data.manifest"])
        paths = {k: manifest[k] for k in ("train", "dev", "test") if k in manifest}
        for key in ("text_column", "label_column", "has_header"):
            if key in manifest and f"data.{key}" not in values:
                values[f"data.{key}"] = (cfgmod._bool(manifest[key]) if key == "has_header"
                                         else manifest[key])
    else:
        paths = {k: values[f"data.{k}"] for k in ("train", "dev", "test") if f"data.{k}" in values}
    return load_splits(paths, _schema(values), max_len=values.get("model.max_len", 64),
                       vocab_size=values.get("model.vocab_size"), strict=values.get("data.strict", True))


def _prepare_train(values):
    """Validate everything that can be checked without touching data."""
    tc = cfgmod.train_config(values)
    _check_data_source(values)
    _model_config(values, vocab_size=2, num_classes=2)
    return tc


def _train_once(values, out_dir: Path | None):
    tc = _prepare_train(values)
    splits = _load_data(values)
    train_set = splits["train"]
    vocab = train_set.vocab
    mcfg = _model_config(values, len(vocab), train_set.num_classes)
    model = TextCnn.init(mcfg, RngStream(tc.seed).derive("init"))
    result = train(model, train_set, tc, dev=splits.get("dev"))
    test_result = None
    if "test" in splits and len(splits["test"]):
        test_result = evaluate(result.model, splits["test"])
        last = result.metrics.records[-1] if result.metrics.records else None
        result.metrics.add(tc.epochs, "test", test_result.loss, test_result.accuracy,
                           last["wall_time_s"] if last else 0.0)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.metrics.write_csv(out_dir / "metrics.csv")
        save_checkpoint(result.model, out_dir / "model.npz")
        vocab.save(out_dir / "vocab.txt")
        resolved = {**_flatten(tc), **{f"model.{k}": v for k, v in _flatten(mcfg).items()},
                    **{k: v for k, v in values.items() if k.startswith("data.") or k == "preset"}}
        (out_dir / "resolved.cfg").write_text(cfgmod.echo(resolved), encoding="utf-8")
    return result, splits


def run_train(values, out_dir: Path) -> int:
    _train_once(values, out_dir)
    return EXIT_OK


def run_eval(values, out_dir: Path) -> int:
    for key in ("eval.checkpoint", "eval.vocab"):
        if key not in values:
            raise ConfigError(f"eval needs {key}")
    split = values.get("eval.split", "test")
    path_key = f"data.{split}"
    if path_key not in values:
        raise ConfigError(f"eval needs {path_key} for split {split!r}")
    model = load_checkpoint(values["eval.checkpoint"])
    vocab = Vocabulary.load(values["eval.vocab"])
    data = load_tsv(values[path_key], _schema(values), vocab=vocab, split=split,
                    max_len=model.config.max_len, num_classes=model.config.num_classes,
                    strict=values.get("data.strict", True))
    res = evaluate(model, data)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savetxt(out_dir / "logits.csv", res.logits, delimiter=",", fmt="%.17g")
    with open(out_dir / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("split", "loss", "accuracy", "samples"))
        w.writerow((split, repr(res.loss), repr(res.accuracy), len(data)))
    print(f"{split}: loss {res.loss:.6f} accuracy {res.accuracy:.4f} over {len(data)} samples")
    return EXIT_OK


def run_augment(values, out_dir: Path) -> int:
    for key in ("augment.input", "augment.output"):
        if key not in values:
            raise ConfigError(f"augment needs {key}")
    rcfg = cfgmod.rpn_config(values)
    X = read_tensor(values["augment.input"])
    original_shape = X.shape
    if X.ndim == 2:
        X = X[None]
    elif X.ndim != 3:
        raise DataError(f"augment expects a rank-2 or rank-3 dump, got shape {X.shape}")
    steps = list(rpn_chain(X, rcfg, RngStream(values["seed"]).derive("augment")))
    result = steps[-1].X_next if steps else X
    write_tensor(values["augment.output"], result.reshape(original_shape))
    trace = values.get("augment.trace", str(Path(values["augment.output"]).with_suffix(".trace.jsonl")))
    write_trace(trace, steps)
    return EXIT_OK


def _grid_cell(args):
    values, eps, steps, seed = args
    cell = {**values, "mode": "rpn", "rpn.epsilon": eps, "rpn.steps": steps, "seed": seed}
    result, splits = _train_once(cell, None)
    dev = splits.get("dev") or splits["train"]
    res = evaluate(result.model, dev)
    return res.accuracy, res.loss


def grid_seed(seed, i, j) -> int:
    return RngStream(seed).derive("grid", i, j).stream_id & 0x7FFFFFFFFFFFFFFF


def best_cell(rows):
    """Highest dev accuracy; ties go to the smaller epsilon, then fewer steps."""
    return min(rows, key=lambda r: (-r["dev_accuracy"], r["epsilon"], r["steps"]))


def run_grid(values, out_dir: Path, workers=1) -> int:
    eps_axis = values.get("grid.epsilon", ())
    step_axis = values.get("grid.steps", ())
    if not eps_axis or not step_axis:
        raise ConfigError("grid.epsilon and grid.steps must each list at least one value")
    base = {k: v for k, v in values.items() if not k.startswith("grid.")}
    _prepare_train({**base, "mode": "rpn"})
    jobs = [(base, e, k, grid_seed(values["seed"], i, j))
            for i, e in enumerate(eps_axis) for j, k in enumerate(step_axis)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_grid_cell, jobs))
    else:
        outcomes = [_grid_cell(job) for job in jobs]
    rows = [{"epsilon": e, "steps": k, "seed": s, "dev_accuracy": acc, "dev_loss": loss}
            for (_, e, k, s), (acc, loss) in zip(jobs, outcomes)]
    best = best_cell(rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "grid_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epsilon", "steps", "seed", "dev_accuracy", "dev_loss", "best"))
        for r in rows:
            w.writerow((r["epsilon"], r["steps"], r["seed"], f"{100 * r['dev_accuracy']:.2f}",
                        repr(r["dev_loss"]), int(r is best)))
    table = _grid_table(rows, eps_axis, step_axis, best)
    (out_dir / "grid_table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def _grid_table(rows, eps_axis, step_axis, best):
    lookup = {(r["epsilon"], r["steps"]): r for r in rows}
    corner = "eps|K"
    lines = ["dev accuracy (%)", f"{corner:>8}" + "".join(f"{k:>9}" for k in step_axis)]
    for e in eps_axis:
        cells = []
        for k in step_axis:
            r = lookup[(e, k)]
            mark = "*" if r is best else " "
            cells.append(f"{100 * r['dev_accuracy']:>8.2f}{mark}")
        lines.append(f"{e:>8}" + "".join(cells))
    return "\n".join(lines)


def run_bench(values, out_dir: Path) -> int:
    methods = [m.strip() for m in values.get("bench.methods", "rpn,aeda,eda_lite").split(",") if m.strip()]
    sizes = values.get("bench.sizes", (1000, 2000, 4000, 8000))
    for m in methods:
        if m not in bench_mod.METHODS:
            raise ConfigError(f"unknown bench method {m!r}")
    setup = bench_mod.BenchSetup(copies=values.get("bench.copies", 3),
                                 batch_size=values.get("bench.batch_size", 32),
                                 seq_len=values.get("bench.seq_len", 32), seed=values["seed"])
    reports = [bench_mod.bench_augment(m, sizes, values.get("bench.trials", 5), setup) for m in methods]
    out_dir.mkdir(parents=True, exist_ok=True)
    bench_mod.write_reports(reports, out_dir / "bench.csv")
    print(bench_mod.summary_table(reports))
    return EXIT_OK


COMMANDS = {"train": run_train, "eval": run_eval, "augment": run_augment, "grid": run_grid,
            "bench": run_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rpnaug", description="Random position noise augmentation for text classifiers.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key=value config file")
        p.add_argument("--out", type=Path, default=Path("runs") / name, help="output directory")
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
        if name == "grid":
            p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = cfgmod.read_config(args.config) if args.config else {}
        raw.update(cfgmod.parse_pairs(args.overrides))
        values = cfgmod.resolve(raw, args.command)
        if args.command == "grid":
            return run_grid(values, args.out, workers=args.workers)
        return COMMANDS[args.command](values, args.out)
    except RpnAugError as exc:
        print(f"rpnaug {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC) else EXIT_DATA
    except OSError as exc:
        print(f"rpnaug {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
