import math

import numpy as np
import pytest

from dtkt import model as km
from dtkt import numkernel as nk
from dtkt.data import StudentSequence, SyntheticConfig, generate_synthetic, pack_sequences, split_dataset
from dtkt.model import ModelConfig
from dtkt.numkernel import Tape
from dtkt.training import (
    TrainConfig,
    TrainingDivergedError,
    loss_and_grads,
    step_weights,
    sweep,
    train,
    unroll_batch,
    unroll_sequence,
)

from conftest import (
    arrays64,
    central_difference,
    max_relative_error,
    random_sequences,
    ref_predict,
    ref_write,
)


def ref_sequence_loss(p, seq, alpha):
    """Straight-line per-sequence loss: mean over steps of CE + alpha * CPL."""
    nq = p["key_embed"].shape[0]
    mem = p["init_value_memory"]
    before = np.array([ref_predict(p, mem, j) for j in range(nq)])
    total = 0.0
    steps = len(seq) - 1
    for t in range(steps):
        q, r = seq.questions[t], seq.responses[t]
        mem = ref_write(p, mem, q, r, "add_erase")
        after = np.array([ref_predict(p, mem, j) for j in range(nq)])
        y = seq.responses[t + 1]
        pl = np.clip(after[seq.questions[t + 1]], 1e-7, 1 - 1e-7)
        ce = -(y * math.log(pl) + (1 - y) * math.log(1 - pl))
        drop = after < before
        cpl = float(np.sum((before - after)[drop] ** 2)) if r == 1 else 0.0
        total += ce + alpha * cpl
        before = after
    return total / steps


class TestUnroll:
    def test_minimal_sequence_has_one_term(self, tiny64):
        seq = StudentSequence((1, 3), (1, 0))
        res = unroll_sequence(tiny64, seq, 0.0)
        assert res.loss.item() == pytest.approx(ref_sequence_loss(arrays64(tiny64), seq, 0.0), rel=1e-12)
        np.testing.assert_array_equal(step_weights(pack_sequences([seq])), [[1.0]])

    @pytest.mark.parametrize("alpha", [0.0, 0.5])
    def test_three_steps_match_straight_line(self, tiny64, alpha):
        seq = StudentSequence((0, 2, 2, 4), (1, 1, 0, 1))
        res = unroll_sequence(tiny64, seq, alpha)
        assert res.loss.item() == pytest.approx(ref_sequence_loss(arrays64(tiny64), seq, alpha), rel=1e-12)

    def test_batch_is_mean_of_sequence_losses(self, tiny64):
        seqs = random_sequences(5, [2, 6, 4], seed=4)
        got = unroll_batch(tiny64, pack_sequences(seqs), 0.2).loss.item()
        p = arrays64(tiny64)
        assert got == pytest.approx(np.mean([ref_sequence_loss(p, s, 0.2) for s in seqs]), rel=1e-12)

    def test_label_path_equals_full_path_at_alpha_zero(self, tiny_params):
        batch = pack_sequences(random_sequences(5, [9, 3, 7, 12], seed=6))
        a = unroll_batch(tiny_params, batch, 0.0)
        b = unroll_batch(tiny_params, batch, 0.0, force_cpl_path=True)
        assert a.targets is None and b.targets is not None
        assert a.loss.item() == pytest.approx(b.loss.item(), rel=1e-6)

    def test_negative_alpha(self, tiny_params):
        with pytest.raises(ValueError):
            unroll_batch(tiny_params, pack_sequences(random_sequences(5, [3])), -1.0)


class TestGradients:
    def test_combined_loss_matches_finite_differences(self, tiny64):
        batch = pack_sequences(random_sequences(5, [6, 4], seed=11))
        cfg = TrainConfig(alpha=0.5)
        res, grads = loss_and_grads(tiny64, batch, cfg)
        assert res.cpl > 0
        frozen = res.targets
        numeric = central_difference(
            lambda: unroll_batch(tiny64, batch, cfg.alpha, frozen=frozen).loss.data, tiny64, eps=1e-6
        )
        assert max_relative_error(grads, numeric) < 1e-4

    def test_undetached_pseudo_label_matches_finite_differences(self, tiny64):
        # without detaching, the pseudo-label is a live function of the parameters; only the mask stays fixed
        batch = pack_sequences(random_sequences(5, [5], seed=12))
        cfg = TrainConfig(alpha=0.5, detach_pseudo_label=False)
        res, grads = loss_and_grads(tiny64, batch, cfg)
        masks = res.targets.masks

        def live():
            from dtkt.objective import ce_terms, cpl_terms

            w = km.concept_weights(tiny64)
            mem = km.initial_memory(tiny64, 1)
            prev = km.predict_all_batch(tiny64, mem, w)
            total = 0.0
            for t in range(4):
                mem = km.write_batch(tiny64, mem, w, batch.questions[:, t], batch.responses[:, t])
                p_all = km.predict_all_batch(tiny64, mem, w)
                ce = ce_terms(nk.pick(p_all, batch.questions[:, t + 1]), batch.responses[:, t + 1]).item()
                cpl, _ = cpl_terms(prev, p_all, batch.responses[:, t], mask=masks[t])
                total += ce + 0.5 * cpl.item()
                prev = p_all
            return total / 4

        assert live() == pytest.approx(res.loss.item(), rel=1e-12)
        numeric = central_difference(live, tiny64, eps=1e-6)
        assert max_relative_error(grads, numeric) < 1e-4


def _tiny_synthetic(students=50, seed=0):
    cfg = SyntheticConfig(num_questions=5, num_concepts=2, students=students, steps=20, increment=0.2, seed=seed)
    return generate_synthetic(cfg).dataset


class TestTrain:
    model = ModelConfig(5, 4, 8, 8, 8)

    def test_loss_decreases(self):
        tr, va, _ = split_dataset(_tiny_synthetic(), (0.6, 0.2, 0.2))
        res = train(tr, va, TrainConfig(epochs=10, batch_size=8, patience=10, model=self.model))
        assert res.report.epochs_run == 10
        assert res.report.train_loss[9] < res.report.train_loss[0]

    def test_deterministic(self, tmp_path):
        tr, va, _ = split_dataset(_tiny_synthetic(), (0.6, 0.2, 0.2))
        cfg = TrainConfig(alpha=0.01, epochs=3, batch_size=8, seed=7, model=self.model)
        a = train(tr, va, cfg, tmp_path / "a")
        b = train(tr, va, cfg, tmp_path / "b")
        assert a.report.train_loss == b.report.train_loss
        assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()
        assert (tmp_path / "a/train_report.json").read_bytes() == (tmp_path / "b/train_report.json").read_bytes()

    def test_alpha_zero_matches_cpl_path(self):
        tr, va, _ = split_dataset(_tiny_synthetic(), (0.6, 0.2, 0.2))
        cfg = TrainConfig(epochs=3, batch_size=8, model=self.model)
        a = train(tr, va, cfg)
        b = train(tr, va, cfg, force_cpl_path=True)
        np.testing.assert_allclose(a.report.train_loss, b.report.train_loss, rtol=1e-5)

    def test_early_stopping_keeps_best(self):
        tr, va, _ = split_dataset(_tiny_synthetic(), (0.6, 0.2, 0.2))
        res = train(tr, va, TrainConfig(epochs=40, batch_size=8, patience=1, lr=0.05, model=self.model))
        rep = res.report
        assert rep.epochs_run < 40
        assert rep.best_valid_auroc == max(rep.valid_auroc)
        assert rep.valid_auroc[rep.best_epoch - 1] == rep.best_valid_auroc

    def test_divergence_reported(self):
        tr, va, _ = split_dataset(_tiny_synthetic(), (0.6, 0.2, 0.2))
        with pytest.raises(TrainingDivergedError, match=r"epoch 1, batch [1-9]"):
            train(tr, va, TrainConfig(epochs=1, batch_size=8, lr=1e38, clip_norm=1e38, model=self.model))

    def test_model_size_must_match_data(self):
        tr, va, _ = split_dataset(_tiny_synthetic(), (0.6, 0.2, 0.2))
        with pytest.raises(ValueError):
            train(tr, va, TrainConfig(model=ModelConfig(6, 4, 8, 8, 8)))

    def test_sweep_layout(self, tmp_path):
        tr, va, _ = split_dataset(_tiny_synthetic(), (0.6, 0.2, 0.2))
        out = sweep([0.0, 0.001], tr, va, TrainConfig(epochs=1, model=self.model), tmp_path)
        assert set(out) == {0.0, 0.001}
        assert (tmp_path / "alpha_0/model.ckpt").is_file()
        assert (tmp_path / "alpha_0.001/model.ckpt").is_file()

    @pytest.mark.parametrize("kw", [{"alpha": -1}, {"epochs": 0}, {"lr": 0}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_no_tape_during_evaluation(tiny_params):
    from dtkt.training import evaluate_auroc

    ds = _tiny_synthetic(students=10)
    before = {k: t.data.copy() for k, t in tiny_params.params.items()}
    with Tape() as tape:
        evaluate_auroc(tiny_params, ds)
    assert len(tape) == 0
    assert all(np.array_equal(before[k], t.data) for k, t in tiny_params.params.items())
