import math

import numpy as np
import pytest

from btransformer import training
from btransformer.config import ModelConfig
from btransformer.data import build_dataset, collate, generate_synthetic
from btransformer.embeddings import Vocabulary
from btransformer.errors import ContractError, ShapeError, TrainingDivergedError
from btransformer.model import BTransformer
from btransformer.tensor import Tensor, backward, no_grad
from btransformer.training import (
    AdamWState,
    EarlyStopping,
    TrainingLog,
    EpochRecord,
    adamw_step,
    bce_loss,
    lr_at_step,
    train,
    warmup_steps,
)

from oracles import early_stop_epoch, hand_adamw, loop_bce


@pytest.fixture(scope="module")
def small_corpus():
    docs = generate_synthetic(12, 3, 4, seed=0)
    vocab = Vocabulary.build(d.text for d in docs)
    cfg = ModelConfig(d=16, num_heads=2, num_classes=4, max_epochs=3, batch_size=8, alpha0=1e-3,
                      patience=5, seed=0)
    return docs, vocab, cfg, build_dataset(docs, vocab, cfg)


class TestBCE:
    def test_perfect_prediction_near_zero(self):
        y = np.random.default_rng(0).integers(0, 2, size=(3, 37)).astype(float)
        assert bce_loss(Tensor(y), y).item() <= 1e-5

    def test_half_probabilities(self):
        for y in ([0, 0], [1, 0], [1, 1]):
            assert bce_loss(Tensor([[0.5, 0.5]]), [y]).item() == pytest.approx(2 * math.log(2), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_double_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(0.01, 0.99, size=(4, 5))
        y = rng.integers(0, 2, size=(4, 5)).astype(float)
        assert abs(bce_loss(Tensor(p), y).item() - loop_bce(p.tolist(), y.tolist())) <= 1e-12

    def test_normalised_by_samples_not_entries(self):
        p = np.full((2, 3), 0.5)
        assert bce_loss(Tensor(p), np.zeros((2, 3))).item() == pytest.approx(3 * math.log(2))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(Tensor(np.full((2, 3), 0.5)), np.zeros((3, 2)))

    def test_saturated_probabilities_are_finite(self):
        assert math.isfinite(bce_loss(Tensor([[0.0, 1.0]]), [[1.0, 0.0]]).item())


class TestSchedule:
    def test_points(self):
        assert lr_at_step(0, 2e-5, 100) == 0.0
        assert lr_at_step(50, 2e-5, 100) == pytest.approx(1e-5, rel=1e-15)
        assert lr_at_step(100, 2e-5, 100) == 2e-5
        assert lr_at_step(200, 2e-5, 100) == 2e-5

    def test_piecewise_linear_and_continuous(self):
        lrs = [lr_at_step(t, 1.0, 40) for t in range(0, 120)]
        np.testing.assert_allclose(np.diff(lrs[:41]), 1 / 40, atol=1e-15)
        assert all(v == 1.0 for v in lrs[40:])

    def test_linear_decay_variant(self):
        assert lr_at_step(10, 1.0, 10, "linear", 110) == 1.0
        assert lr_at_step(60, 1.0, 10, "linear", 110) == pytest.approx(0.5)
        assert lr_at_step(110, 1.0, 10, "linear", 110) == 0.0
        assert lr_at_step(5, 1.0, 10, "linear", 110) == 0.5

    def test_warmup_steps_uses_total_planned_steps(self):
        assert warmup_steps(0.1, 50, 7) == 35
        assert warmup_steps(0.1, 1, 3) == 1

    def test_invalid(self):
        with pytest.raises(ContractError):
            lr_at_step(-1, 1.0, 10)
        with pytest.raises(ContractError):
            lr_at_step(1, 1.0, 0)


class TestAdamW:
    def test_constant_gradient_moves_by_lr_sign(self):
        p = Tensor([0.0, 0.0], requires_grad=True)
        state = AdamWState(weight_decay=0.0)
        g = np.array([0.3, -2.0])
        for _ in range(2000):
            before = p.data.copy()
            p.grad = g.copy()
            adamw_step({"p": p}, state, lr=1e-3)
        np.testing.assert_allclose(p.data - before, -1e-3 * np.sign(g), rtol=1e-6)

    def test_zero_gradient_pure_decay(self):
        p = Tensor([2.0, -4.0], requires_grad=True)
        state = AdamWState(weight_decay=0.1)
        for _ in range(5):
            expected = p.data * (1 - 0.01 * 0.1)
            p.grad = np.zeros(2)
            adamw_step({"p": p}, state, lr=0.01)
            np.testing.assert_array_equal(p.data, expected)

    def test_matches_hand_stepped_recurrences(self):
        grads = [[0.5, -1.0], [0.1, 0.3], [-0.7, 0.0]]
        p = Tensor([1.0, -0.5], requires_grad=True)
        state = AdamWState(weight_decay=0.01)
        for g in grads:
            p.grad = np.array(g)
            adamw_step({"p": p}, state, lr=0.05)
        assert state.t == 3
        np.testing.assert_allclose(p.data, hand_adamw([1.0, -0.5], grads, 0.05, 0.01), rtol=0, atol=1e-15)

    def test_missing_gradient(self):
        with pytest.raises(ContractError, match="'w'"):
            adamw_step({"w": Tensor([1.0], requires_grad=True)}, AdamWState(), 0.1)


class TestEarlyStopping:
    def test_peak_then_flat(self):
        scores = [0.1, 0.2, 0.3, 0.4, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]
        stopper = EarlyStopping(3)
        stop = next(e for e, s in enumerate(scores, 1) if stopper.update(e, s))
        assert (stopper.best_epoch, stop) == (5, 8)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_scan(self, seed):
        rng = np.random.default_rng(seed)
        scores = np.round(rng.random(20), 1).tolist()
        patience = int(rng.integers(1, 5))
        stopper = EarlyStopping(patience)
        stop = next((e for e, s in enumerate(scores, 1) if stopper.update(e, s)), None)
        assert (stopper.best_epoch, stop) == early_stop_epoch(scores, patience)

    def test_through_train_loop(self, small_corpus, monkeypatch):
        docs, vocab, cfg, ds = small_corpus
        scores = iter([0.1, 0.2, 0.3, 0.4, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5])
        monkeypatch.setattr(training, "evaluate", lambda *a, **k: (1.0, next(scores), None))
        result = train(BTransformer.init(cfg, vocab), ds, ds, cfg.replace(patience=3, max_epochs=10))
        assert result.best_epoch == 5 and result.stopped_epoch == 8 and len(result.log) == 8

    def test_max_epochs_bound(self, small_corpus):
        docs, vocab, cfg, ds = small_corpus
        result = train(BTransformer.init(cfg, vocab), ds, ds, cfg.replace(max_epochs=1))
        assert len(result.log) == 1 and result.stopped_epoch == 1


class TestTrainLoop:
    def test_log_epochs_increase_from_one(self, small_corpus):
        docs, vocab, cfg, ds = small_corpus
        result = train(BTransformer.init(cfg, vocab), ds, ds, cfg)
        assert [r.epoch for r in result.log.records] == [1, 2, 3]
        assert result.steps == 3 * math.ceil(len(ds) / cfg.batch_size)

    def test_deterministic(self, small_corpus):
        docs, vocab, cfg, ds = small_corpus
        a = train(BTransformer.init(cfg, vocab), ds, ds, cfg).log.to_csv()
        b = train(BTransformer.init(cfg, vocab), ds, ds, cfg).log.to_csv()
        assert a == b

    def test_best_params_restored(self, small_corpus, monkeypatch):
        docs, vocab, cfg, ds = small_corpus
        scores = iter([0.9, 0.1, 0.1])
        snapshots = []
        real_update = EarlyStopping.update

        def spy(self, epoch, score):
            snapshots.append({k: p.data.copy() for k, p in model.parameters().items()})
            return real_update(self, epoch, score)

        monkeypatch.setattr(training, "evaluate", lambda *a, **k: (1.0, next(scores), None))
        monkeypatch.setattr(EarlyStopping, "update", spy)
        model = BTransformer.init(cfg, vocab)
        result = train(model, ds, ds, cfg)
        result.restore_best(model)
        assert result.best_epoch == 1
        for k, p in model.parameters().items():
            np.testing.assert_array_equal(p.data, snapshots[0][k])

    def test_divergence_reports_step(self, small_corpus):
        docs, vocab, cfg, ds = small_corpus
        model = BTransformer.init(cfg, vocab)
        model.head.b.data[:] = np.nan
        with pytest.raises(TrainingDivergedError) as info:
            train(model, ds, ds, cfg)
        assert info.value.step == 1

    def test_one_step_decreases_loss(self):
        docs = generate_synthetic(32, 2, 8, seed=3)
        vocab = Vocabulary.build(d.text for d in docs)
        cfg = ModelConfig(num_classes=8, dropout=0.0, weight_decay=0.0, seed=0)
        ds = build_dataset(docs, vocab, cfg)
        ids, mask, labels = collate(ds.samples)
        model = BTransformer.init(cfg, vocab)
        loss = bce_loss(model.forward(ids, mask), labels)
        backward(loss)
        adamw_step(model.trainable_parameters(), AdamWState(weight_decay=0.0), lr=1e-4)
        with no_grad():
            after = bce_loss(model.forward(ids, mask), labels).item()
        assert after < loss.item()

    def test_untouched_embedding_rows_stay_fixed(self):
        docs = generate_synthetic(6, 3, 4, seed=1)
        vocab = Vocabulary.build(d.text for d in docs)
        vocab.add("never_seen")
        cfg = ModelConfig(d=16, num_heads=2, num_classes=4, weight_decay=0.0, seed=0)
        ds = build_dataset(docs[:1], vocab, cfg)
        ids, mask, labels = collate(ds.samples)
        model = BTransformer.init(cfg, vocab)
        before = model.embeddings.table.data.copy()
        backward(bce_loss(model.forward(ids, mask, training=True, rng=np.random.default_rng(0)), labels))
        adamw_step(model.trainable_parameters(), AdamWState(weight_decay=0.0), lr=1e-2)
        changed = np.flatnonzero(np.any(model.embeddings.table.data != before, axis=1))
        assert set(changed) == set(np.unique(ids[mask]).tolist())

    def test_frozen_body_keeps_table(self, small_corpus):
        docs, vocab, cfg, ds = small_corpus
        model = BTransformer.init(cfg.replace(freeze_body=True), vocab)
        before = model.embeddings.table.data.copy()
        train(model, ds, ds, model.config.replace(max_epochs=1))
        np.testing.assert_array_equal(model.embeddings.table.data, before)


def test_training_log_csv():
    log = TrainingLog()
    log.append(EpochRecord(1, 0.5, 0.25, 0.0))
    log.append(EpochRecord(2, 0.125, 0.5, 1.0))
    assert log.to_csv() == "epoch,train_loss,val_loss,val_macro_f1\n1,0.5,0.25,0.0\n2,0.125,0.5,1.0\n"
    with pytest.raises(ContractError):
        log.append(EpochRecord(4, 0.1, 0.1, 0.1))
