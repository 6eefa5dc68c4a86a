import csv
import json
import math
import struct

import numpy as np
import pytest

from rpnaug import config as cfgmod
from rpnaug.bench import BenchSetup, bench_augment, fit_line, summary_table, write_reports
from rpnaug.cli import best_cell, grid_seed, main
from rpnaug.dump import MAGIC, decode_tensor, encode_tensor, read_tensor, write_tensor
from rpnaug.errors import ConfigError, DataError, ParseError

SMALL = ["data.synthetic=true", "data.synthetic.samples=80", "data.synthetic.dev_samples=40",
         "model.embed_dim=8", "model.kernel_sizes=2,3", "model.num_filters=4", "model.max_len=12",
         "epochs=3", "batch_size=16"]
# big enough to learn, with a step size that stays stable up to K=5
LEARN = ["data.synthetic=true", "data.synthetic.samples=200", "data.synthetic.dev_samples=100",
         "model.embed_dim=32", "model.kernel_sizes=2,3", "model.num_filters=16", "model.max_len=12",
         "epochs=20", "batch_size=16", "lr=0.03"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_parse_pairs(self):
        assert cfgmod.parse_pairs(["# c", "", "a = 1", "b=x=y"]) == {"a": "1", "b": "x=y"}
        with pytest.raises(ParseError, match=":2:"):
            cfgmod.parse_pairs(["a=1", "oops"])

    def test_resolve_types_and_preset(self):
        values = cfgmod.resolve({"seed": "3", "preset": "textcnn", "epochs": "4"}, "train")
        assert values["mode"] == "rpn" and values["rpn.epsilon"] == 0.3 and values["epochs"] == 4
        assert cfgmod.train_config(values).rpn.steps == 3

    def test_resolve_errors(self):
        with pytest.raises(ConfigError, match="bogus"):
            cfgmod.resolve({"seed": "1", "bogus": "2"}, "train")
        with pytest.raises(ConfigError, match="seed"):
            cfgmod.resolve({"mode": "rpn"}, "train")
        with pytest.raises(ConfigError, match="rpn.steps"):
            cfgmod.resolve({"seed": "1", "rpn.steps": "three"}, "train")

    def test_echo_sorted(self):
        assert cfgmod.echo({"b": True, "a": (1, 2)}) == "a=1,2\nb=true\n"


class TestDump:
    def test_round_trip(self, tmp_path):
        X = np.random.default_rng(0).normal(size=(2, 3, 4))
        write_tensor(tmp_path / "x.bin", X)
        assert read_tensor(tmp_path / "x.bin").tobytes() == X.tobytes()

    def test_header_layout(self):
        buf = encode_tensor(np.zeros((2, 5)))
        assert buf[:8] == MAGIC
        assert struct.unpack_from("<IIQQ", buf, 8) == (1, 2, 2, 5)
        assert len(buf) == 8 + 8 + 16 + 80

    @pytest.mark.parametrize("mutate, offset", [
        (lambda b: b"XXXXXXXX" + b[8:], 0),
        (lambda b: b[:8] + struct.pack("<I", 9) + b[12:], 8),
        (lambda b: b[:12] + struct.pack("<I", 7) + b[16:], 12),
        (lambda b: b[:-3], 8 + 8 + 16 + 80 - 3),
        (lambda b: b[:10], 10),
    ])
    def test_malformed(self, mutate, offset):
        buf = mutate(encode_tensor(np.ones((2, 5))))
        with pytest.raises(ParseError) as err:
            decode_tensor(buf)
        assert err.value.location == offset

    def test_missing(self, tmp_path):
        with pytest.raises(DataError, match="none.bin"):
            read_tensor(tmp_path / "none.bin")


class TestBench:
    def test_fit_line_exact(self):
        slope, (lo, hi), r2 = fit_line([1, 2, 3, 4], [3, 5, 7, 9])
        assert abs(slope - 2) < 1e-12 and abs(r2 - 1) < 1e-12 and lo <= 2 <= hi

    def test_fit_line_ci_against_formula(self):
        x, y = np.array([1.0, 2, 4, 8]), np.array([0.9, 2.3, 3.8, 8.4])
        slope, (lo, hi), _ = fit_line(x, y)
        xc = x - x.mean()
        b = (xc @ (y - y.mean())) / (xc @ xc)
        resid = y - (y.mean() + b * xc)
        se = math.sqrt(resid @ resid / 2 / (xc @ xc))
        # t quantile 0.975 with 2 degrees of freedom
        assert abs(slope - b) < 1e-12 and abs(hi - lo - 2 * 4.302652729911275 * se) < 1e-9

    def test_report_shape(self, tmp_path):
        reports = [bench_augment(m, [20, 40, 80], trials=3, setup=BenchSetup(seq_len=8, vocab_size=50))
                   for m in ("rpn", "aeda")]
        write_reports(reports, tmp_path / "b.csv")
        rows = read_rows(tmp_path / "b.csv")
        assert [(r["method"], r["size"]) for r in rows] == [
            (m, str(n)) for m in ("rpn", "aeda") for n in (20, 40, 80)]
        assert all(float(r["per_epoch_time_s"]) > 0 for r in rows)
        assert "preprocess slope" in summary_table(reports)

    def test_validation(self):
        with pytest.raises(ConfigError):
            bench_augment("rpn", [10, 10, 20])
        with pytest.raises(ConfigError):
            bench_augment("rpn", [10, 20], trials=2)
        with pytest.raises(ConfigError):
            bench_augment("mixup", [10])


class TestTrainCommand:
    def test_missing_config_names_path(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")])
        assert code != 0 and "missing.cfg" in capsys.readouterr().err

    def test_resolved_echo(self, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--out", str(out), "seed=1", "mode=rpn", "rpn.epsilon=0.3", "rpn.steps=3",
                     *SMALL]) == 0
        lines = (out / "resolved.cfg").read_text().splitlines()
        for expected in ("mode=rpn", "rpn.epsilon=0.3", "rpn.steps=3"):
            assert expected in lines
        assert (out / "model.npz").is_file() and (out / "vocab.txt").is_file()
        rows = read_rows(out / "metrics.csv")
        assert {r["split"] for r in rows} == {"train", "dev"}

    def test_byte_identical_metrics(self, tmp_path):
        args = ["seed=7", "mode=rpn", "wall_time=false", *SMALL]
        assert main(["train", "--out", str(tmp_path / "a"), *args]) == 0
        assert main(["train", "--out", str(tmp_path / "b"), *args]) == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_config_file_with_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 2\nmode = baseline\n" + "\n".join(SMALL) + "\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "epochs=1"]) == 0
        assert {r["epoch"] for r in read_rows(tmp_path / "o" / "metrics.csv")} == {"1"}

    @pytest.mark.parametrize("args, code", [
        (["seed=1", "nonsense=1"], 2),
        (["mode=rpn"], 2),
        (["seed=1", "rpn.epsilon=2"], 2),
        (["seed=1", "data.train=/nonexistent/train.tsv"], 3),
        (["seed=1"], 2),
    ])
    def test_exit_codes(self, tmp_path, args, code):
        assert main(["train", "--out", str(tmp_path / "o"), *args]) == code

    def test_usage_error(self):
        assert main(["frobnicate"]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_abort_code(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "o"), "seed=1", "lr=1e300", "momentum=0",
                     *SMALL]) == 4

    def test_tsv_train_and_eval(self, tmp_path):
        gen = np.random.default_rng(0)
        good, bad = ["great", "fun", "warm"], ["dull", "flat", "boring"]
        for split, n in (("train", 60), ("test", 20)):
            lines = ["sentence\tlabel"]
            for _ in range(n):
                y = int(gen.integers(0, 2))
                words = list(gen.choice(good if y else bad, size=2)) + list(gen.choice(["a", "film"], size=3))
                lines.append(" ".join(words) + f"\t{y}")
            (tmp_path / f"{split}.tsv").write_text("\n".join(lines) + "\n")
        (tmp_path / "m.cfg").write_text("train=train.tsv\ntest=test.tsv\n")
        out = tmp_path / "run"
        small = [a for a in SMALL if not a.startswith("data.")]
        assert main(["train", "--out", str(out), "seed=1", f"data.manifest={tmp_path / 'm.cfg'}",
                     *small]) == 0
        assert any(r["split"] == "test" for r in read_rows(out / "metrics.csv"))
        assert main(["eval", "--out", str(tmp_path / "ev"), f"eval.checkpoint={out / 'model.npz'}",
                     f"eval.vocab={out / 'vocab.txt'}", f"data.test={tmp_path / 'test.tsv'}"]) == 0
        logits = np.loadtxt(tmp_path / "ev" / "logits.csv", delimiter=",")
        assert logits.shape == (20, 2)
        row = read_rows(tmp_path / "ev" / "eval.csv")[0]
        assert row["samples"] == "20" and 0 <= float(row["accuracy"]) <= 1


class TestAugmentCommand:
    def run(self, tmp_path, X, *extra):
        write_tensor(tmp_path / "in.bin", X)
        return main(["augment", "--out", str(tmp_path), "seed=5", f"augment.input={tmp_path / 'in.bin'}",
                     f"augment.output={tmp_path / 'out.bin'}", *extra])

    def test_epsilon_zero_is_byte_identical(self, tmp_path):
        X = np.random.default_rng(1).normal(size=(4, 6, 5))
        assert self.run(tmp_path, X, "rpn.epsilon=0", "rpn.steps=3") == 0
        assert (tmp_path / "out.bin").read_bytes() == (tmp_path / "in.bin").read_bytes()

    def test_trace(self, tmp_path):
        X = np.random.default_rng(2).normal(size=(64, 32))
        assert self.run(tmp_path, X, "rpn.epsilon=0.3", "rpn.steps=4") == 0
        records = [json.loads(line) for line in (tmp_path / "out.trace.jsonl").read_text().splitlines()]
        assert [r["step"] for r in records] == [1, 2, 3, 4]
        bound = 3 * math.sqrt(0.3 * 0.7 / X.size)
        assert all(abs(r["mask_density"] - 0.3) <= bound for r in records)
        out = read_tensor(tmp_path / "out.bin")
        assert out.shape == X.shape
        for j in range(X.shape[1]):
            assert set(out[:, j]) <= set(X[:, j])

    def test_malformed_dump(self, tmp_path, capsys):
        (tmp_path / "in.bin").write_bytes(MAGIC + b"\x01\x00")
        code = main(["augment", "--out", str(tmp_path), "seed=5", f"augment.input={tmp_path / 'in.bin'}",
                     f"augment.output={tmp_path / 'out.bin'}"])
        assert code == 3 and "byte 10" in capsys.readouterr().err


class TestGridCommand:
    axes = ["grid.epsilon=0.1,0.2,0.5", "grid.steps=1,3,5"]

    def grid(self, out, *extra):
        return main(["grid", "--out", str(out), "seed=4", *self.axes, *SMALL, *extra])

    def test_summary_and_determinism(self, tmp_path):
        assert self.grid(tmp_path / "a") == 0
        assert self.grid(tmp_path / "b", "--workers", "2") == 0
        a = (tmp_path / "a" / "grid_summary.csv").read_bytes()
        assert a == (tmp_path / "b" / "grid_summary.csv").read_bytes()
        rows = read_rows(tmp_path / "a" / "grid_summary.csv")
        assert len(rows) == 9 and sum(int(r["best"]) for r in rows) == 1
        assert {(float(r["epsilon"]), int(r["steps"])) for r in rows} == {
            (e, k) for e in (0.1, 0.2, 0.5) for k in (1, 3, 5)}
        assert "*" in (tmp_path / "a" / "grid_table.txt").read_text()

    def test_sanity_band(self, tmp_path):
        # every cell within 5 points of the baseline trained on the same data
        assert main(["grid", "--out", str(tmp_path / "g"), "seed=4", *self.axes, *LEARN]) == 0
        rows = read_rows(tmp_path / "g" / "grid_summary.csv")
        assert main(["train", "--out", str(tmp_path / "base"), "seed=4", "mode=baseline", *LEARN]) == 0
        base = [r for r in read_rows(tmp_path / "base" / "metrics.csv") if r["split"] == "dev"][-1]
        base_acc = 100 * float(base["accuracy"])
        assert base_acc >= 90.0
        assert all(abs(float(r["dev_accuracy"]) - base_acc) <= 5.0 for r in rows), (base_acc, rows)

    def test_empty_grid(self, tmp_path):
        assert main(["grid", "--out", str(tmp_path), "seed=1", "grid.epsilon=", "grid.steps=1", *SMALL]) == 2

    def test_seeds_and_best(self):
        assert grid_seed(1, 0, 0) == grid_seed(1, 0, 0) != grid_seed(1, 0, 1)
        rows = [{"epsilon": 0.5, "steps": 1, "dev_accuracy": 0.9},
                {"epsilon": 0.1, "steps": 3, "dev_accuracy": 0.9},
                {"epsilon": 0.1, "steps": 1, "dev_accuracy": 0.8}]
        assert best_cell(rows) is rows[1]


def test_bench_command(tmp_path):
    assert main(["bench", "--out", str(tmp_path), "seed=0", "bench.sizes=20,40,60", "bench.trials=3",
                 "bench.seq_len=8", "bench.methods=rpn,eda_lite"]) == 0
    assert len(read_rows(tmp_path / "bench.csv")) == 6
