import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from boostedattn import autodiff as ad
from boostedattn.autodiff import DimensionError, Tape, TapeError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def grad_of(fn, x):
    tape = Tape()
    t = tape.watch(x)
    return tape.backward(fn(t))[t]


def test_matmul_identity_and_hand_case():
    B = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(ad.matmul(np.eye(3), B).data, B)
    out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    errs = ad.gradcheck(lambda a, b: ad.sum_(ad.matmul(a, b)),
                        {"a": rng.standard_normal((5, 7)), "b": rng.standard_normal((7, 3))})
    assert max(errs.values()) <= 1e-6


def test_stacked_matmul_matches_numpy_and_gradients():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
    np.testing.assert_allclose(ad.matmul(a, b).data, a @ b, rtol=0, atol=1e-13)
    w = rng.standard_normal((2, 3, 5))
    errs = ad.gradcheck(lambda a, b: ad.sum_(ad.mul(ad.matmul(a, b), w)), {"a": a, "b": b})
    assert max(errs.values()) <= 1e-8


def test_softmax_cases():
    np.testing.assert_allclose(ad.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(ad.softmax(np.array([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)), elements=finite), finite)
def test_softmax_is_stochastic_and_shift_invariant(x, c):
    p = ad.softmax(x, axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax(x + c, axis=-1).data, p, atol=1e-12)


def test_softmax_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(6)
    J = np.stack([grad_of(lambda t, i=i: ad.softmax(t)[i], x) for i in range(6)])
    Jn = np.stack([ad.numerical_grad(lambda v, i=i: ad._softmax(v, -1)[i], x) for i in range(6)])
    assert ad.relative_error(J, Jn) <= 1e-6


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(np.full((1, 5), 3.0), np.ones(5), np.zeros(5)).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 12)), elements=finite))
def test_layer_norm_normalizes_rows(u):
    rng = np.random.default_rng(0)
    u = u + 1e-3 * rng.standard_normal(u.shape)  # keep rows away from constant
    d = u.shape[-1]
    out = ad.layer_norm(u, np.ones(d), np.zeros(d), eps=0.0).data
    assert np.abs(out.mean(-1)).max() <= 1e-10
    np.testing.assert_allclose((out * out).sum(-1), d, atol=1e-8)


def test_layer_norm_rejects_scalar_rows():
    with pytest.raises(DimensionError):
        ad.layer_norm(np.zeros((3, 1)), np.ones(1), np.zeros(1))


def test_layer_norm_gradient():
    rng = np.random.default_rng(3)
    errs = ad.gradcheck(lambda u, g, b: ad.sum_(ad.mul(ad.layer_norm(u, g, b), np.arange(8.0))),
                        {"u": rng.standard_normal(8), "g": rng.uniform(0.5, 1.5, 8), "b": rng.standard_normal(8)})
    assert max(errs.values()) <= 1e-5


def test_backward_simple_roots():
    x = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(grad_of(ad.sum_, x), np.ones(3))
    np.testing.assert_allclose(grad_of(lambda t: ad.sum_(t * t) * 0.5, x), x)


def test_backward_is_single_use_and_needs_scalar():
    tape = Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(TapeError):
        tape.backward(x * 2.0)
    tape.backward(ad.sum_(x))
    with pytest.raises(TapeError):
        tape.backward(ad.sum_(x))


def test_unused_leaf_gets_zero_gradient_of_same_shape():
    tape = Tape()
    x, y = tape.watch(np.ones((2, 3))), tape.watch(np.ones(4))
    grads = tape.backward(ad.sum_(x))
    assert grads[y].shape == (4,)
    np.testing.assert_array_equal(grads[y], 0.0)


UNARY = {
    "exp": ad.exp,
    "log": lambda t: ad.log(t * t + 1.0),
    "sqrt": lambda t: ad.sqrt(t * t + 0.5),
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "gelu": ad.gelu,
    "relu": lambda t: ad.relu(t + 0.05),
    "power": lambda t: ad.power(t * t + 1.0, 1.5),
    "div": lambda t: ad.div(t, t * t + 2.0),
    "neg": ad.neg,
    "log_softmax": ad.log_softmax,
    "softmax": ad.softmax,
    "logsumexp": lambda t: ad.logsumexp(t, axis=-1, keepdims=True),
    "transpose": lambda t: ad.transpose(ad.reshape(t, (2, 3)), (1, 0)),
    "getitem": lambda t: t[1:4],
    "concat": lambda t: ad.concat([t, t * 2.0], axis=-1),
    "broadcast": lambda t: ad.broadcast_to(t, (2, 6)),
    "mean": lambda t: ad.mean(t, keepdims=True),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients_random_instances(name):
    fn = UNARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(20):
        x = rng.standard_normal(6)
        w = rng.standard_normal(np.shape(fn(ad.Tensor(x)).data))
        errs = ad.gradcheck(lambda x: ad.sum_(ad.mul(fn(x), w)), {"x": x})
        assert errs["x"] <= 1e-5, (name, errs)


def test_binary_primitives_with_broadcasting():
    rng = np.random.default_rng(4)
    for op in (ad.add, ad.sub, ad.mul):
        for _ in range(20):
            a, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
            errs = ad.gradcheck(lambda a, b: ad.sum_(ad.mul(op(a, b), np.arange(12.0).reshape(3, 4))),
                                {"a": a, "b": b})
            assert max(errs.values()) <= 1e-5


def test_take_rows_accumulates_repeated_ids():
    table = np.arange(12.0).reshape(4, 3)
    ids = np.array([[0, 2], [2, 2]])
    g = grad_of(lambda t: ad.sum_(ad.take_rows(t, ids)), table)
    np.testing.assert_array_equal(g[:, 0], [1.0, 0.0, 3.0, 0.0])


def test_losses_and_their_gradients():
    rng = np.random.default_rng(5)
    pred, target = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    assert ad.mse(pred, target).item() == pytest.approx(((pred - target) ** 2).sum(1).mean())
    assert ad.gradcheck(lambda p: ad.mse(p, target), {"p": pred})["p"] <= 1e-6
    logits, labels = rng.standard_normal((5, 7)), rng.integers(0, 7, 5)
    assert ad.gradcheck(lambda z: ad.cross_entropy(z, labels), {"z": logits})["z"] <= 1e-6
    assert ad.cross_entropy(np.zeros((3, 7)), np.array([0, 1, 2])).item() == pytest.approx(np.log(7))


def test_deep_chain_of_primitives():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((4, 4)) * 0.5

    def chain(x):
        h = x
        for i in range(60):
            op = i % 4
            if op == 0:
                h = ad.matmul(h, w)
            elif op == 1:
                h = ad.tanh(h)
            elif op == 2:
                h = h + 0.1 * ad.sigmoid(h)
            else:
                h = ad.layer_norm(h, np.ones(4), np.zeros(4))
        return ad.sum_(h * h)

    assert ad.gradcheck(chain, {"x": rng.standard_normal((2, 4))})["x"] <= 1e-5


def test_masked_fill_blocks_gradient():
    allowed = np.array([True, False, True])
    g = grad_of(lambda t: ad.sum_(ad.softmax(ad.masked_fill(t, allowed))), np.zeros(3))
    assert g[1] == 0.0


def test_dropout_is_identity_without_rng_and_unbiased_with_one():
    x = np.ones((200, 200))
    np.testing.assert_array_equal(ad.dropout(x, 0.1, None).data, x)
    out = ad.dropout(x, 0.1, np.random.default_rng(0)).data
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.9}


def test_adam_zero_gradient_leaves_parameters():
    p = {"w": np.array([1.0, -2.0])}
    out = ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState())
    np.testing.assert_array_equal(out["w"], p["w"])


def test_adam_first_step_moves_by_lr():
    out = ad.adam_step({"w": np.array(3.0)}, {"w": np.array(1.0)}, ad.AdamState(lr=0.1))
    assert out["w"] == pytest.approx(2.9, abs=1e-6)


# reference trajectory from torch.optim.Adam (float64) on the same problem
TORCH_ADAM_2000 = 0.8210693477611981
TORCH_ADAM_FIRST_BELOW_1E3 = 4421


def test_adam_quadratic_bowl_matches_reference_trajectory():
    state, p = ad.AdamState(lr=3e-3), {"t": np.array(5.0)}
    first = None
    for i in range(5000):
        p = ad.adam_step(p, {"t": p["t"].copy()}, state)
        if i + 1 == 2000:
            assert p["t"] == pytest.approx(TORCH_ADAM_2000, abs=1e-12)
        if first is None and abs(p["t"]) < 1e-3:
            first = i + 1
    assert first == TORCH_ADAM_FIRST_BELOW_1E3
    assert state.step == 5000


def test_adam_shape_mismatch_and_clipping():
    with pytest.raises(DimensionError):
        ad.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, ad.AdamState())
    clipped = ad.clip_by_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert ad.global_norm(clipped) == pytest.approx(1.0)


def test_decoupled_weight_decay_shrinks_parameters():
    out = ad.adam_step({"w": np.array(2.0)}, {"w": np.array(0.0)}, ad.AdamState(lr=0.1, weight_decay=0.5))
    assert out["w"] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
