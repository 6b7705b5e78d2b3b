import numpy as np
import pytest

from dpflab import Batch, LayerSpec, init_model, make_mlp_specs
from dpflab.nets import backward, evaluate, finite_diff_grad, forward, predict_logits

from conftest import random_batch


def naive_loss(model, params, batch):
    """Straight-line reimplementation of the forward pass, no shared code paths."""
    total = 0.0
    for row, label in zip(batch.inputs, batch.labels):
        a = row.copy()
        for i, spec in enumerate(model.layers):
            w, b = model.layer_views(params, i)
            z = np.array([float(np.dot(w[j], a)) + b[j] for j in range(spec.out_dim)])
            a = np.array([max(v, 0.0) for v in z]) if spec.activation == "relu" else z
        m = max(a)
        total += float(np.log(sum(np.exp(v - m) for v in a))) + m - a[label]
    return total / batch.size


class TestInit:
    def test_same_seed_bit_identical(self):
        specs = make_mlp_specs([4, 8, 3])
        a = init_model(specs, seed=7)
        b = init_model(specs, seed=7)
        assert np.array_equal(a.params, b.params)

    def test_param_length_matches_layout(self):
        model = init_model([LayerSpec(2, 3), LayerSpec(3, 2)], seed=0)
        assert model.n_params == (6 + 3) + (6 + 2)

    def test_different_seeds_differ(self):
        specs = make_mlp_specs([4, 8, 3])
        a = init_model(specs, seed=1)
        b = init_model(specs, seed=2)
        assert np.any(a.params != b.params)

    def test_biases_zero_and_weights_bounded(self):
        model = init_model([LayerSpec(10, 20)], seed=3)
        w, b = model.layer_views(model.params, 0)
        bound = np.sqrt(6.0 / 30.0)
        assert np.all(b == 0.0)
        assert np.all(np.abs(w) <= bound)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="chain"):
            init_model([LayerSpec(2, 3), LayerSpec(4, 2)], seed=0)

    def test_flatten_views_round_trip(self):
        model = init_model(make_mlp_specs([3, 5, 2]), seed=0)
        rebuilt = np.empty_like(model.params)
        for i, spec in enumerate(model.layers):
            w, b = model.layer_views(model.params, i)
            rebuilt[model.weight_slice(i)] = w.ravel()
            rebuilt[model.bias_slice(i)] = b
        assert np.array_equal(rebuilt, model.params)


class TestForward:
    def test_zero_weights_two_classes_gives_log2(self):
        model = init_model(make_mlp_specs([3, 2]), seed=0)
        params = np.zeros(model.n_params)
        batch = Batch(np.random.default_rng(0).standard_normal((5, 3)), np.array([0, 1, 0, 1, 1]))
        loss, _ = forward(model, params, batch)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_zero_weights_ten_classes_gives_log10(self):
        model = init_model(make_mlp_specs([4, 10]), seed=0)
        params = np.zeros(model.n_params)
        batch = Batch(np.random.default_rng(1).standard_normal((7, 4)), np.arange(7) % 10)
        loss, _ = forward(model, params, batch)
        assert loss == pytest.approx(np.log(10.0), abs=1e-12)

    def test_matches_straight_line_reimplementation(self):
        rng = np.random.default_rng(42)
        model = init_model(make_mlp_specs([4, 6, 3]), seed=5)
        batch = random_batch(rng, 9, 4, 3)
        loss, _ = forward(model, model.params, batch)
        assert loss == pytest.approx(naive_loss(model, model.params, batch), abs=1e-12)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(3)
        model = init_model(make_mlp_specs([5, 8, 4]), seed=9)
        for _ in range(20):
            batch = random_batch(rng, 6, 5, 4)
            loss, _ = forward(model, model.params, batch)
            assert loss >= 0.0

    def test_length_mismatch_rejected(self):
        model = init_model(make_mlp_specs([3, 2]), seed=0)
        batch = Batch(np.zeros((1, 3)), np.array([0]))
        with pytest.raises(ValueError, match="length"):
            forward(model, np.zeros(model.n_params + 1), batch)


class TestBackward:
    def test_gradient_shape(self, small_model):
        rng = np.random.default_rng(0)
        batch = random_batch(rng, 8, 2, 2)
        loss, cache = forward(small_model, small_model.params, batch)
        grad = backward(small_model, small_model.params, batch, cache)
        assert grad.shape == small_model.params.shape

    def test_matches_finite_differences(self, small_model):
        rng = np.random.default_rng(1)
        batch = random_batch(rng, 8, 2, 2)
        _, cache = forward(small_model, small_model.params, batch)
        bp = backward(small_model, small_model.params, batch, cache)
        fd = finite_diff_grad(small_model, small_model.params, batch, h=1e-5)
        rel = np.abs(bp - fd) / (1.0 + np.abs(fd))
        assert rel.max() <= 1e-6

    def test_duplicated_rows_leave_mean_gradient_unchanged(self, small_model):
        rng = np.random.default_rng(2)
        batch = random_batch(rng, 4, 2, 2)
        doubled = Batch(np.vstack([batch.inputs, batch.inputs]), np.concatenate([batch.labels, batch.labels]))
        _, c1 = forward(small_model, small_model.params, batch)
        _, c2 = forward(small_model, small_model.params, doubled)
        g1 = backward(small_model, small_model.params, batch, c1)
        g2 = backward(small_model, small_model.params, doubled, c2)
        np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)

    def test_stale_cache_rejected(self, small_model):
        rng = np.random.default_rng(3)
        batch = random_batch(rng, 4, 2, 2)
        _, cache = forward(small_model, small_model.params, batch)
        other = small_model.params + 0.5
        with pytest.raises(ValueError, match="stale"):
            backward(small_model, other, batch, cache)

    def test_determinism(self, small_model):
        rng = np.random.default_rng(4)
        batch = random_batch(rng, 8, 2, 2)
        results = []
        for _ in range(2):
            loss, cache = forward(small_model, small_model.params, batch)
            grad = backward(small_model, small_model.params, batch, cache)
            results.append((loss, grad))
        assert results[0][0] == results[1][0]
        assert np.array_equal(results[0][1], results[1][1])


class TestFiniteDiff:
    def test_exact_for_linear_model(self):
        # identity activation, no hidden layer: loss is smooth in the single logit row
        model = init_model([LayerSpec(3, 2, activation="identity")], seed=0)
        rng = np.random.default_rng(5)
        batch = random_batch(rng, 6, 3, 2)
        _, cache = forward(model, model.params, batch)
        bp = backward(model, model.params, batch, cache)
        fd = finite_diff_grad(model, model.params, batch, h=1e-6)
        np.testing.assert_allclose(fd, bp, atol=1e-9)

    def test_error_shrinks_quadratically_in_h(self, small_model):
        rng = np.random.default_rng(6)
        batch = random_batch(rng, 8, 2, 2)
        _, cache = forward(small_model, small_model.params, batch)
        bp = backward(small_model, small_model.params, batch, cache)
        err = lambda h: np.abs(finite_diff_grad(small_model, small_model.params, batch, h) - bp).max()
        ratio = err(2e-3) / err(1e-3)
        assert 2.0 < ratio < 8.0

    def test_h_must_be_positive(self, small_model):
        batch = Batch(np.zeros((1, 2)), np.array([0]))
        with pytest.raises(ValueError):
            finite_diff_grad(small_model, small_model.params, batch, h=0.0)


class TestEvaluate:
    def test_constant_zero_model_on_balanced_pair_breaks_ties_low(self):
        model = init_model(make_mlp_specs([2, 2]), seed=0)
        params = np.zeros(model.n_params)
        inputs = np.random.default_rng(0).standard_normal((10, 2))
        labels = np.array([0, 1] * 5)
        _, acc = evaluate(model, params, inputs, labels)
        assert acc == 0.5  # argmax ties resolve to class 0; the set is balanced

    def test_accuracy_in_unit_interval(self, blobs):
        model = init_model(make_mlp_specs([20, 8, 4]), seed=0)
        _, acc = evaluate(model, model.params, blobs.test_inputs, blobs.test_labels)
        assert 0.0 <= acc <= 1.0

    def test_empty_dataset_rejected(self, small_model):
        with pytest.raises(ValueError, match="empty"):
            evaluate(small_model, small_model.params, np.zeros((0, 2)), np.zeros(0, dtype=int))

    def test_predict_logits_matches_forward_logits(self, small_model):
        rng = np.random.default_rng(8)
        batch = random_batch(rng, 5, 2, 2)
        _, cache = forward(small_model, small_model.params, batch)
        logits = predict_logits(small_model, small_model.params, batch.inputs)
        assert np.array_equal(logits, cache.logits)


class TestModelLayout:
    def test_prunable_flags_cover_hidden_weights_only(self):
        model = init_model(make_mlp_specs([3, 4, 2]), seed=0)
        flags = model.prunable
        assert flags[model.weight_slice(0)].all()
        assert not flags[model.bias_slice(0)].any()
        assert not flags[model.weight_slice(1)].any()  # final layer stays dense
        assert not flags[model.bias_slice(1)].any()

    def test_row_groups_are_contiguous_rows(self):
        model = init_model(make_mlp_specs([3, 4, 2]), seed=0)
        groups = model.weight_row_groups()
        assert len(groups) == 4
        for layer, row, sl in groups:
            assert layer == 0
            assert sl.stop - sl.start == 3

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            Batch(np.zeros((0, 3)), np.zeros(0, dtype=int))
        with pytest.raises(ValueError):
            Batch(np.zeros((2, 3)), np.array([0, -1]))
        with pytest.raises(ValueError):
            Batch(np.zeros(3), np.array([0]))
