import logging

import numpy as np
import pytest

from boostedattn import autodiff as ad
from boostedattn.attention import ParameterError, boosted_attention_forward
from boostedattn.retrieval import (ModelSpec, TrainRecipe, _map_np, bayes_accuracy, boosted_forward,
                                   deq_fixed_point, deq_loss_and_grads, generate_task, init_params,
                                   map_jacobian, nearest_pattern, one_step_map, retrieval_accuracy,
                                   rng_for, train_retrieval_model, unrolled_forward)


def binomial_sigma(p, n):
    return np.sqrt(p * (1 - p) / n)


def test_zero_noise_queries_equal_patterns():
    task = generate_task(8, 4, 0.0, seed=1)
    x, labels = task.sample(50, rng_for(0, 9))
    np.testing.assert_array_equal(x, task.patterns[labels])
    np.testing.assert_allclose(np.linalg.norm(task.patterns, axis=1), 1.0, atol=1e-15)


def test_tasks_are_deterministic_per_seed():
    a, b = generate_task(16, 4, 0.5, seed=3), generate_task(16, 4, 0.5, seed=3)
    np.testing.assert_array_equal(a.patterns, b.patterns)
    assert not np.array_equal(a.patterns, generate_task(16, 4, 0.5, seed=4).patterns)


def test_noise_has_requested_variance():
    task = generate_task(32, 8, 0.7, seed=0)
    x, labels = task.sample(20_000, rng_for(0, 5))
    sq = ((x - task.patterns[labels]) ** 2).sum(1)
    assert sq.mean() == pytest.approx(32 * 0.49, rel=0.01)
    counts = np.bincount(labels, minlength=8) / 20_000
    assert np.abs(counts - 1 / 8).max() < 4 * binomial_sigma(1 / 8, 20_000)


def test_invalid_task_sizes():
    with pytest.raises(ParameterError):
        generate_task(0, 4, 0.5)
    with pytest.raises(ParameterError):
        generate_task(8, 4, -0.1)


def test_identity_model_is_perfect_without_noise():
    task = generate_task(16, 4, 0.0, seed=2)
    assert retrieval_accuracy(lambda x: x, task, n_queries=2000) == 1.0


def test_zero_model_sits_at_chance():
    task = generate_task(16, 8, 0.5, seed=2)
    acc = retrieval_accuracy(lambda x: np.zeros_like(x), task, n_queries=20_000)
    assert abs(acc - 1 / 8) <= 3 * binomial_sigma(1 / 8, 20_000)


def test_nearest_pattern_breaks_ties_low():
    P = np.array([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_array_equal(nearest_pattern(np.array([[0.0, 1.0], [-0.9, 0.0]]), P), [0, 1])


def test_bayes_accuracy_limits_and_reference_cell():
    assert bayes_accuracy(16, 4, 0.05, n_queries=5000) == 1.0
    acc = bayes_accuracy(32, 8, 0.8, n_queries=50_000)
    assert acc == pytest.approx(0.453, abs=0.015)


def test_model_spec_parsing():
    assert ModelSpec.parse("one_step") == ModelSpec("one_step")
    assert ModelSpec.parse("boosted(3, scalar)") == ModelSpec("boosted", 3, "scalar")
    assert ModelSpec.parse("boosted(2,none,input)").kv_source == "input"
    assert ModelSpec.parse("boosted").rounds == 2
    assert ModelSpec.parse("boosted(4)").label == "boosted(M=4,mlp)"
    with pytest.raises(ParameterError):
        ModelSpec.parse("hopfield")
    with pytest.raises(ParameterError):
        ModelSpec("deq", rounds=2)


def test_recipe_validation():
    with pytest.raises(ParameterError):
        TrainRecipe(lr=0.0)
    with pytest.raises(ParameterError):
        TrainRecipe(batch_size=0)


@pytest.mark.parametrize("rounds,kv", [(1, "residual"), (3, "residual"), (3, "input")])
def test_memory_stream_forward_matches_masked_sequence_forward(rounds, kv):
    task = generate_task(8, 5, 0.5, seed=6)
    params = init_params(ModelSpec("boosted", rounds, "mlp", kv), 8, seed=7)
    queries, _ = task.sample(4, rng_for(0, 8))
    fast = boosted_forward(params, task.patterns, queries).data
    K = task.K
    allowed = np.zeros((K + 1, K + 1), dtype=bool)
    allowed[:, :K] = True
    for i, q in enumerate(queries):
        seq = np.vstack([task.patterns, q])
        out = boosted_attention_forward(seq, params, mask=allowed)[0].data
        np.testing.assert_allclose(fast[i], out[-1], rtol=0, atol=1e-12)


def test_one_step_is_boosted_with_one_round():
    task = generate_task(8, 4, 0.5, seed=0)
    p2 = init_params(ModelSpec("boosted", 2), 8, seed=1)
    p1 = init_params(ModelSpec("boosted", 1), 8, seed=1)
    p1 = p1.with_weights({k: p2.weights[k] for k in p1.weights})
    x, _ = task.sample(6, rng_for(0, 1))
    np.testing.assert_array_equal(one_step_map(p2, task.patterns, x).data,
                                  boosted_forward(p1, task.patterns, x).data)


def test_map_jacobian_matches_finite_differences():
    task = generate_task(6, 4, 0.5, seed=3)
    params = init_params(ModelSpec("deq"), 6, seed=4)
    w = params.arrays()
    xi = task.sample(3, rng_for(1, 1))[0]
    J = map_jacobian(params, task.patterns, xi)
    for b in range(3):
        fd = np.stack([ad.numerical_grad(lambda v, i=i: _map_np(w, task.patterns, v[None])[0][0, i], xi[b])
                       for i in range(6)])
        assert ad.relative_error(J[b], fd) <= 1e-7


def _contractive_params(d, seed):
    params = init_params(ModelSpec("deq"), d, seed)
    params.weights["wout"] = params.weights["wout"] * 0.5
    return params


def test_fixed_point_converges_and_is_fixed():
    task = generate_task(6, 4, 0.5, seed=5)
    params = _contractive_params(6, 6)
    x = task.sample(8, rng_for(2, 2))[0]
    xi, iters, ok = deq_fixed_point(params, task.patterns, x, tol=1e-12, max_iter=500)
    assert ok and iters < 500
    np.testing.assert_allclose(one_step_map(params, task.patterns, xi).data, xi, atol=1e-11)
    _, iters, ok = deq_fixed_point(params, task.patterns, x, tol=1e-30, max_iter=3)
    assert not ok and iters == 3


def test_deq_gradient_matches_backprop_through_converged_unroll():
    task = generate_task(6, 4, 0.5, seed=8)
    params = _contractive_params(6, 9)
    x, labels = task.sample(8, rng_for(3, 3))
    targets = task.patterns[labels]
    loss, grads, xi = deq_loss_and_grads(params, task.patterns, x, targets, tol=1e-10, max_iter=1000)
    steps = deq_fixed_point(params, task.patterns, x, tol=1e-10, max_iter=1000)[1] + 20
    tape = ad.Tape()
    bound = params.bind(tape)
    unrolled = ad.mse(unrolled_forward(bound, task.patterns, x, steps), targets)
    ref = tape.backward(unrolled).named()
    assert loss == pytest.approx(unrolled.item(), rel=1e-8)
    for k in ref:
        assert ad.relative_error(grads[k], ref[k]) <= 1e-3, k


def test_deq_singular_solve_falls_back_with_warning(monkeypatch, caplog):
    task = generate_task(6, 4, 0.5, seed=8)
    params = _contractive_params(6, 9)
    x, labels = task.sample(4, rng_for(3, 3))
    expected = deq_loss_and_grads(params, task.patterns, x, task.patterns[labels])[1]

    def broken(*args, **kwargs):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setattr(np.linalg, "solve", broken)
    with caplog.at_level(logging.WARNING, logger="boostedattn.retrieval"):
        _, grads, _ = deq_loss_and_grads(params, task.patterns, x, task.patterns[labels])
    assert "least squares" in caplog.text
    for k in expected:
        np.testing.assert_allclose(grads[k], expected[k], rtol=1e-8, atol=1e-12)


def test_training_reduces_loss_and_is_deterministic():
    task = generate_task(16, 4, 0.5, seed=0)
    recipe = TrainRecipe(epochs=30, batch_size=128, eval_queries=2000)
    m1, acc1 = train_retrieval_model("boosted(2)", task, recipe)
    m2, acc2 = train_retrieval_model("boosted(2)", task, recipe)
    assert np.mean(m1.losses[-5:]) < m1.losses[0]
    assert acc1 == acc2
    for k, v in m1.params.weights.items():
        np.testing.assert_array_equal(v, m2.params.weights[k])


@pytest.mark.parametrize("kind", ["unrolled", "deq"])
def test_iterated_models_train_and_evaluate(kind):
    task = generate_task(8, 4, 0.5, seed=1)
    recipe = TrainRecipe(epochs=3, batch_size=64, unroll_steps=5, eval_queries=500)
    model, acc = train_retrieval_model(kind, task, recipe)
    assert len(model.losses) == 3 and all(np.isfinite(model.losses))
    assert 0.0 <= acc <= 1.0
    assert model(task.patterns).shape == task.patterns.shape
