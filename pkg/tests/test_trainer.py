"""
Tests for losses, optimizers, the training loop and experiment protocols.
"""
import math

import numpy as np
import pytest

from oscgnn.errors import ContractError, DegenerateVarianceError, MaskError
from oscgnn.graph import GraphBatch, make_graph_task, make_splits
from oscgnn.models import OscillatorGNN
from oscgnn.schemas import CouplingConfig, ExperimentConfig, ModelConfig, TrainConfig
from oscgnn.tensor import RealTensor, Tape, sum_all
from oscgnn.trainer import (
    SGD,
    Adam,
    build_model,
    compute_loss,
    compute_metric,
    depth_sweep,
    evaluate,
    gradient_check,
    robustness_sweep,
    run_experiment,
    t_score,
    train,
)

QUICK = dict(hidden_dim=4, layers=2, epochs=3, patience=None, attn_dim=2)


def tiny_model(family="slgnn", kind="gcn", in_dim=2, out_dim=2, seed=0, **overrides):
    settings = dict(family=family, coupling=CouplingConfig(kind=kind, heads=2, attn_dim=2), layers=2, hidden_dim=4)
    settings.update(overrides)
    cfg = ModelConfig(**settings)
    return OscillatorGNN(cfg, in_dim, out_dim, seed=seed)


class TestTScore:
    """One-tailed comparison of two result summaries."""

    def test_unit_spread(self):
        result = t_score(1.0, 1.0, 0.0, 1.0, 100)
        assert result.t_score == pytest.approx(7.0711, abs=1e-4)
        assert result.significant

    def test_accuracy_summaries(self):
        result = t_score(82.92, 1.39, 82.35, 1.61, 100)
        assert result.t_score == pytest.approx(2.68, abs=0.02)
        assert result.threshold == 1.66
        assert result.significant

    def test_equal_means(self):
        result = t_score(50.0, 2.0, 50.0, 3.0, 10)
        assert result.t_score == 0.0
        assert not result.significant

    def test_zero_variance(self):
        with pytest.raises(DegenerateVarianceError):
            t_score(1.0, 0.0, 0.0, 0.0, 10)

    def test_needs_two_samples(self):
        with pytest.raises(ContractError):
            t_score(1.0, 1.0, 0.0, 1.0, 1)


class TestLosses:
    """Loss and metric selection by task."""

    def test_uniform_logits_cross_entropy(self):
        loss = compute_loss(RealTensor(np.zeros((4, 3))), np.array([0, 1, 2, 1]), "node-class")
        assert loss.item() == pytest.approx(math.log(3))

    def test_masked_rows_only(self):
        outputs = RealTensor([[5.0, 0.0], [0.0, 5.0], [5.0, 0.0]])
        mask = np.array([True, True, False])
        assert compute_metric(outputs, np.array([0, 1, 1]), "node-class", mask) == 100.0

    def test_ties_go_to_lowest_class(self):
        assert compute_metric(RealTensor(np.zeros((2, 3))), np.array([0, 1]), "node-class") == 50.0

    def test_regression(self):
        outputs = RealTensor([[1.0], [3.0]])
        assert compute_loss(outputs, np.array([0.0, 1.0]), "graph-reg").item() == pytest.approx(2.5)
        assert compute_metric(outputs, np.array([0.0, 1.0]), "graph-reg") == pytest.approx(2.5)

    def test_empty_mask(self):
        with pytest.raises(MaskError):
            compute_loss(RealTensor(np.zeros((3, 2))), np.zeros(3, dtype=int), "node-class", np.zeros(3, dtype=bool))


class TestOptimizers:
    """Parameter updates."""

    def test_sgd_step(self):
        p = RealTensor([[1.0, 2.0]], requires_grad=True, name="p")
        with Tape() as tape:
            tape.backward(sum_all(p))
        SGD([p], lr=0.1).step()
        np.testing.assert_allclose(p.data, [[0.9, 1.9]])

    def test_adam_first_step_moves_by_lr(self):
        p = RealTensor([[1.0, -2.0]], requires_grad=True, name="p")
        with Tape() as tape:
            tape.backward(sum_all(p))
        Adam([p], lr=0.01).step()
        np.testing.assert_allclose(p.data, [[0.99, -2.01]], atol=1e-8)

    def test_adam_skips_missing_gradients(self):
        p = RealTensor([[1.0]], requires_grad=True, name="p")
        Adam([p], lr=0.01, weight_decay=0.5).step()
        assert p.data[0, 0] == 1.0

    def test_decoupled_weight_decay(self):
        p = RealTensor([[2.0]], requires_grad=True, name="p")
        p.grad = np.zeros((1, 1))
        Adam([p], lr=0.1, weight_decay=0.5).step()
        assert p.data[0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


class TestTraining:
    """The training loop on small problems."""

    def test_zero_learning_rate_changes_nothing(self, sbm_bundle, sbm_masks):
        model = tiny_model()
        before = model.state_dict()
        report = train(model, sbm_bundle, sbm_masks, TrainConfig(lr=0.0, weight_decay=0.0, epochs=3, patience=None))
        for name, values in model.state_dict().items():
            np.testing.assert_array_equal(values, before[name])
        losses = [record.train_loss for record in report.history]
        assert losses == [losses[0]] * 3

    def test_reruns_are_identical(self, sbm_bundle, sbm_masks):
        cfg = TrainConfig(lr=5e-3, epochs=4, patience=None, seed=3)
        a = train(tiny_model(dropout=0.2), sbm_bundle, sbm_masks, cfg)
        b = train(tiny_model(dropout=0.2), sbm_bundle, sbm_masks, cfg)
        assert a.reproducible_view() == b.reproducible_view()

    def test_best_state_is_restored(self, sbm_bundle, sbm_masks):
        model = tiny_model()
        report = train(model, sbm_bundle, sbm_masks, TrainConfig(lr=1e-2, epochs=8, patience=None))
        best = min(record.val_loss for record in report.history)
        assert report.val_loss == pytest.approx(best)
        assert report.history[report.best_epoch - 1].val_loss == pytest.approx(best)
        assert evaluate(model, sbm_bundle, sbm_masks.val)[0] == pytest.approx(best)

    @pytest.mark.parametrize("patience", [1, 3])
    def test_patience_stops_on_stalled_validation_loss(self, patience, sbm_bundle, sbm_masks):
        report = train(tiny_model(), sbm_bundle, sbm_masks, TrainConfig(lr=0.0, epochs=400, patience=patience))
        assert report.best_epoch == 1
        assert report.epochs_run == patience + 1
        assert len(report.history) == report.epochs_run

    def test_restored_state_has_lowest_validation_loss(self, sbm_bundle, sbm_masks):
        model = tiny_model()
        report = train(model, sbm_bundle, sbm_masks, TrainConfig(lr=0.1, epochs=60, patience=3))
        best = min(record.val_loss for record in report.history)
        assert report.history[report.best_epoch - 1].val_loss == best
        assert evaluate(model, sbm_bundle, sbm_masks.val)[0] == pytest.approx(best, rel=1e-12)

    def test_learns_the_block_model(self, sbm_bundle, sbm_masks):
        _, report = run_experiment(ExperimentConfig(family="slgnn", coupling="gcn", layers=4, dt=1.0, epochs=300, seed=0), sbm_bundle, sbm_masks)
        assert report.epochs_run <= 300
        assert report.test_metric >= 95.0

    def test_graph_classification(self, graph_class_bundle):
        masks = make_splits(graph_class_bundle, train_per_class=8, val_count=8, seed=0)
        report = train(tiny_model(), graph_class_bundle, masks, TrainConfig(epochs=2, patience=None, batch_size=4))
        assert report.task == "graph-class"
        assert 0.0 <= report.test_metric <= 100.0

    def test_graph_regression(self):
        bundle = make_graph_task(num_graphs=20, task="graph-reg", seed=2)
        masks = make_splits(bundle, 8, 4, seed=0)
        model = tiny_model("graphcon", out_dim=1)
        report = train(model, bundle, masks, TrainConfig(epochs=2, patience=None))
        assert report.test_metric >= 0.0

    def test_empty_validation_mask(self, sbm_bundle):
        model = tiny_model()
        with pytest.raises(MaskError):
            evaluate(model, sbm_bundle, np.zeros(100, dtype=bool))


class TestGradientCheck:
    """Tape gradients against central differences end to end."""

    @pytest.mark.parametrize("family", ["baseline", "graphcon", "kuramoto", "slgnn"])
    @pytest.mark.parametrize("kind", ["gcn", "gat", "tran"])
    def test_families_and_couplings(self, family, kind, random_graph12, rng):
        model = tiny_model(family, kind, in_dim=3, out_dim=3)
        batch = GraphBatch(random_graph12, RealTensor(rng.standard_normal((12, 3))))
        errors = gradient_check(model, batch, rng.integers(0, 3, size=12), "node-class")
        assert max(errors.values()) < 1e-4, errors

    def test_trainable_oscillator(self, random_graph12, rng):
        model = tiny_model(in_dim=3, out_dim=3, train_oscillator=True)
        batch = GraphBatch(random_graph12, RealTensor(rng.standard_normal((12, 3))))
        errors = gradient_check(model, batch, rng.integers(0, 3, size=12), "node-class")
        assert {"osc.alpha", "osc.beta", "osc.omega", "osc.gamma"} <= set(errors)
        assert max(errors.values()) < 1e-4, errors

    def test_model_settings_restored(self, random_graph12, rng):
        model = tiny_model(in_dim=3, out_dim=3)
        batch = GraphBatch(random_graph12, RealTensor(rng.standard_normal((12, 3))))
        gradient_check(model, batch, rng.integers(0, 3, size=12), "node-class")
        assert model.cfg.newton_tol == 1e-5
        assert all(p.grad is None or not p.grad.any() for p in model.parameters())


class TestProtocols:
    """Experiment drivers."""

    def test_build_model_sizes(self, sbm_bundle):
        model = build_model(ExperimentConfig(**QUICK), sbm_bundle)
        assert (model.in_dim, model.out_dim) == (2, 2)

    def test_run_experiment_digest(self, sbm_bundle, sbm_masks):
        _, report = run_experiment(ExperimentConfig(**QUICK), sbm_bundle, sbm_masks)
        assert len(report.config_digest) == 16

    def test_depth_sweep_rows(self, sbm_bundle, sbm_masks):
        rows = depth_sweep(ExperimentConfig(**QUICK), sbm_bundle, sbm_masks, [1, 3])
        assert [row.depth for row in rows] == [1, 3]

    def test_depth_sweep_needs_depths(self, sbm_bundle, sbm_masks):
        with pytest.raises(ContractError):
            depth_sweep(ExperimentConfig(**QUICK), sbm_bundle, sbm_masks, [])

    def test_deep_model_keeps_its_accuracy(self, sbm_bundle, sbm_masks):
        exp = ExperimentConfig(family="slgnn", coupling="gcn", dt=1.0, epochs=300, seed=0)
        shallow, deep = depth_sweep(exp, sbm_bundle, sbm_masks, [8, 32])
        assert (shallow.depth, deep.depth) == (8, 32)
        assert deep.test_metric >= shallow.test_metric - 5.0

    def test_deep_kuramoto_losses_stay_finite(self, sbm_bundle, sbm_masks):
        exp = ExperimentConfig(family="kuramoto", layers=64, hidden_dim=8, epochs=5, patience=None, seed=0)
        _, report = run_experiment(exp, sbm_bundle, sbm_masks)
        losses = [value for record in report.history for value in (record.train_loss, record.val_loss)]
        assert len(losses) == 10
        assert all(math.isfinite(value) for value in losses)

    def test_robustness_level_zero_repeats_clean_runs(self, sbm_bundle, sbm_masks):
        exp = ExperimentConfig(**QUICK)
        rows = robustness_sweep(exp, sbm_bundle, sbm_masks, [0, 10], trials=2, seed=5, jobs=1)
        assert [row.level for row in rows] == [0, 10]
        clean = [run_experiment(exp.model_copy(update={"seed": 5 + t}), sbm_bundle, sbm_masks)[1].test_metric for t in range(2)]
        assert rows[0].mean == pytest.approx(np.mean(clean))
        assert rows[0].p25 <= rows[0].mean <= rows[0].p75

    def test_robustness_needs_trials(self, sbm_bundle, sbm_masks):
        with pytest.raises(ContractError):
            robustness_sweep(ExperimentConfig(**QUICK), sbm_bundle, sbm_masks, [0], trials=0, seed=0)
