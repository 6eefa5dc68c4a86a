import math
from collections import Counter

import numpy as np
import pytest

import rpnaug.train as train_mod
from rpnaug.augment import FreeLbConfig, RpnConfig, rpn_augment
from rpnaug.data import PAD, pad_batch, synth_dataset
from rpnaug.errors import ConfigError, NumericError
from rpnaug.model import TextCnn, TextCnnConfig, backward, embed, forward
from rpnaug.tensor import RngStream
from rpnaug.train import (MetricsLog, TokenAugConfig, TrainConfig, combo_loss_scale, evaluate,
                          expand_dataset, train)

SEQ = 10


def dataset(n=48, seed=0):
    return synth_dataset(n, 40, SEQ, 2, RngStream(seed))


def model(seed=1, dropout=0.1, **kw):
    cfg = TextCnnConfig(vocab_size=40, embed_dim=6, kernel_sizes=(2, 3), num_filters=4, max_len=SEQ,
                        dropout=dropout, **kw)
    return TextCnn.init(cfg, RngStream(seed))


def snapshot(m):
    return {k: v.tobytes() for k, v in m.params.items()}


def run(cfg, data=None, seed=1, dropout=0.1):
    return train(model(seed, dropout), data or dataset(), cfg)


class TestDegeneracies:
    base = TrainConfig(seed=3, epochs=2, batch_size=16)

    def reference(self):
        return run(self.base)

    def assert_same(self, a, b):
        assert snapshot(a.model) == snapshot(b.model)
        assert a.metrics.batch_losses == b.metrics.batch_losses

    def test_rpn_zero_steps(self):
        cfg = TrainConfig(seed=3, epochs=2, batch_size=16, mode="rpn", rpn=RpnConfig(steps=0))
        self.assert_same(run(cfg), self.reference())

    def test_freelb_without_perturbation(self):
        fl = FreeLbConfig(ascent_steps=1, init_range=0.0, step_size=0.0)
        cfg = TrainConfig(seed=3, epochs=2, batch_size=16, mode="freelb", freelb=fl)
        self.assert_same(run(cfg), self.reference())

    def test_freelb_rpn_zero_samples(self):
        fl = FreeLbConfig(ascent_steps=2)
        a = run(TrainConfig(seed=3, epochs=2, batch_size=16, mode="freelb", freelb=fl))
        b = run(TrainConfig(seed=3, epochs=2, batch_size=16, mode="freelb_rpn", freelb=fl,
                            rpn=RpnConfig(steps=0)))
        self.assert_same(a, b)

    @pytest.mark.parametrize("mode", ["aeda", "eda_lite"])
    def test_token_aug_zero_copies(self, mode):
        cfg = TrainConfig(seed=3, epochs=2, batch_size=16, mode=mode, token_aug=TokenAugConfig(copies=0))
        self.assert_same(run(cfg), self.reference())


class TestRpnSchedule:
    def test_literal_schedule_replay(self):
        # with eps=0 every virtual sample equals X_0, so the update sequence can be replayed by hand
        K, lr = 3, 0.3
        data = dataset(16)
        cfg = TrainConfig(seed=5, mode="rpn", rpn=RpnConfig(epsilon=0.0, steps=K), lr=lr, momentum=0.0,
                          epochs=1, batch_size=16)
        got = run(cfg, data, dropout=0.0).model

        ref = model(1, 0.0)
        order = RngStream(5).derive("shuffle", 1).generator().permutation(len(data))
        seqs = [data.sequences[i] for i in order]
        ids = pad_batch(seqs, SEQ)
        y = np.array([s.label for s in seqs])
        X = embed(ids, ref.params["embedding"])
        g = {k: np.zeros_like(v) for k, v in ref.params.items()}
        for t in range(K + 1):
            res = forward(ref, X, y, token_ids=ids if t == 0 else None, pad_mask=ids != PAD)
            grads = backward(ref, res.cache).params
            for k in g:
                g[k] = g[k] + grads[k] / (K + 1)
                ref.params[k] = ref.params[k] - lr * g[k]
            ref.params["embedding"][PAD] = 0.0
            ref.version += 1
        for k in ref.params:
            np.testing.assert_allclose(got.params[k], ref.params[k], rtol=0, atol=1e-12)

    def test_batch_loss_is_step_average(self):
        K = 3
        data = dataset(16)
        cfg = TrainConfig(seed=6, mode="rpn", rpn=RpnConfig(epsilon=0.3, steps=K), lr=0.0, epochs=1,
                          batch_size=16)
        res = run(cfg, data, dropout=0.0)
        m = model(1, 0.0)
        order = RngStream(6).derive("shuffle", 1).generator().permutation(len(data))
        seqs = [data.sequences[i] for i in order]
        ids = pad_batch(seqs, SEQ)
        y = np.array([s.label for s in seqs])
        X0 = embed(ids, m.params["embedding"])
        pad = (ids != PAD).astype(float)
        samples = [X0] + rpn_augment(X0, cfg.rpn, RngStream(6).derive("rpn", 1), order, pad)
        losses = [forward(m, X, y, pad_mask=pad).loss for X in samples]
        assert abs(res.metrics.batch_losses[0] - sum(losses) / (K + 1)) <= 1e-12

    def test_average_schedule_single_update(self, monkeypatch):
        calls = []
        real = train_mod.sgd_step
        monkeypatch.setattr(train_mod, "sgd_step", lambda *a, **k: (calls.append(1), real(*a, **k)))
        cfg = TrainConfig(seed=1, mode="rpn", rpn=RpnConfig(steps=3), update_schedule="average",
                          epochs=1, batch_size=16)
        run(cfg, dataset(48))
        assert len(calls) == 3
        calls.clear()
        run(TrainConfig(seed=1, mode="rpn", rpn=RpnConfig(steps=3), epochs=1, batch_size=16), dataset(48))
        assert len(calls) == 3 * 4

    def test_embedding_grad_flag_reaches_embedding(self):
        cfg = TrainConfig(seed=2, mode="rpn", rpn_embedding_grad=True, epochs=1, batch_size=16)
        a = run(cfg).model
        b = run(TrainConfig(seed=2, mode="rpn", epochs=1, batch_size=16)).model
        assert a.params["embedding"].tobytes() != b.params["embedding"].tobytes()


class TestFreeLbTraining:
    def capture(self, monkeypatch):
        seen, applied = [], []
        real_backward, real_sgd = train_mod.backward, train_mod.sgd_step

        def spy_backward(m, cache):
            grads = real_backward(m, cache)
            seen.append({k: v.copy() for k, v in grads.params.items()})
            return grads

        def spy_sgd(m, grads, lr, momentum=0.0):
            applied.append({k: v.copy() for k, v in grads.items()})
            return real_sgd(m, grads, lr, momentum)

        monkeypatch.setattr(train_mod, "backward", spy_backward)
        monkeypatch.setattr(train_mod, "sgd_step", spy_sgd)
        return seen, applied

    @pytest.mark.parametrize("mode, N", [("freelb", 0), ("freelb_rpn", 2)])
    def test_single_update_with_averaged_gradient(self, monkeypatch, mode, N):
        seen, applied = self.capture(monkeypatch)
        K = 3
        cfg = TrainConfig(seed=4, mode=mode, epochs=1, batch_size=48, rpn=RpnConfig(steps=N),
                          freelb=FreeLbConfig(ascent_steps=K, step_size=1e-3))
        run(cfg, dataset(48))
        assert len(applied) == 1 and len(seen) == (N + 1) * K
        for k in applied[0]:
            total = sum(g[k] for g in seen) / ((N + 1) * K)
            np.testing.assert_allclose(applied[0][k], total, rtol=1e-12, atol=1e-15)

    def test_combo_scale(self):
        assert combo_loss_scale(0, 3) == 1 / 3
        assert combo_loss_scale(3, 3) == 1 / 12

    def test_norm_bound_holds(self):
        norms = []
        cfg = TrainConfig(seed=0, mode="freelb", epochs=1, batch_size=16,
                          freelb=FreeLbConfig(norm_bound=1e-3, step_size=1.0, ascent_steps=3))
        train_mod.train_freelb(model(), dataset(), cfg, norm_log=norms)
        assert norms and max(norms) <= 1e-3 + 1e-12


class TestTokenAug:
    @pytest.mark.parametrize("mode", ["aeda", "eda_lite"])
    @pytest.mark.parametrize("k", [0, 1, 3])
    def test_size_and_label_law(self, mode, k):
        data = dataset(30)
        cfg = TrainConfig(seed=0, mode=mode, token_aug=TokenAugConfig(copies=k))
        big = expand_dataset(data, cfg, SEQ)
        assert len(big) == len(data) * (1 + k)
        before, after = Counter(data.labels().tolist()), Counter(big.labels().tolist())
        assert all(after[c] == before[c] * (1 + k) for c in before)
        assert big.sequences[:len(data)] == data.sequences

    def test_deterministic(self):
        cfg = TrainConfig(seed=9, mode="aeda", token_aug=TokenAugConfig(copies=2))
        assert expand_dataset(dataset(), cfg, SEQ).sequences == expand_dataset(dataset(), cfg, SEQ).sequences

    def test_wrong_mode(self):
        with pytest.raises(ConfigError):
            expand_dataset(dataset(), TrainConfig(seed=0), SEQ)


class TestEvaluate:
    def test_zero_head_balanced(self):
        data = dataset(40)
        counts = data.class_counts()
        assert counts[0] == counts[1]
        res = evaluate(model(zero_head=True), data)
        assert res.accuracy == 0.5
        assert abs(res.loss - math.log(2)) <= 1e-12

    def test_accuracy_recount(self):
        data = dataset(50)
        res = evaluate(model(3), data, batch_size=7)
        correct = 0
        for row, seq in zip(res.logits.tolist(), data.sequences):
            best = 0
            for c in range(1, len(row)):
                if row[c] > row[best]:
                    best = c
            correct += best == seq.label
        assert res.accuracy == correct / len(data)

    def test_deterministic_and_batch_independent(self):
        m, data = model(4), dataset(50)
        a, b = evaluate(m, data, batch_size=8), evaluate(m, data, batch_size=50)
        assert a.logits.tobytes() == evaluate(m, data, batch_size=8).logits.tobytes()
        assert a.accuracy == b.accuracy
        assert abs(a.loss - b.loss) <= 1e-12

    def test_empty(self):
        data = dataset(4)
        data.sequences = []
        with pytest.raises(ConfigError):
            evaluate(model(), data)


@pytest.mark.parametrize("mode", ["baseline", "rpn", "freelb", "freelb_rpn", "aeda", "eda_lite"])
def test_seed_determinism(mode):
    cfg = TrainConfig(seed=11, mode=mode, epochs=1, batch_size=16, wall_time=False)
    a, b = run(cfg), run(cfg)
    assert snapshot(a.model) == snapshot(b.model)
    assert a.metrics.records == b.metrics.records


def test_non_finite_abort_names_position():
    m = model()
    m.params["head.weight"][:] = np.nan
    with pytest.raises(NumericError, match=r"epoch 1 batch 0 step 0: .*head"):
        train(m, dataset(), TrainConfig(seed=0, epochs=1))


def test_metrics_validation_and_csv(tmp_path):
    log = MetricsLog()
    log.add(1, "train", 0.5, 0.75, 0.0)
    with pytest.raises(NumericError):
        log.add(1, "dev", 0.5, 1.5, 1.0)
    with pytest.raises(NumericError):
        log.add(2, "dev", 0.5, 0.5, -1.0)
    log.write_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == "epoch,split,loss,accuracy,wall_time_s\n1,train,0.5,0.75,0.000000\n"


def test_dev_metrics_recorded():
    res = train(model(), dataset(32), TrainConfig(seed=0, epochs=2, eval_every=1), dev=dataset(16, 7))
    assert [(r["epoch"], r["split"]) for r in res.metrics.records] == [
        (1, "train"), (1, "dev"), (2, "train"), (2, "dev")]
