"""nn-core: forward/backward, adapters, gates, flattening, gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flatshot.errors import (
    AdapterSpecError,
    GateStateError,
    NumericError,
    ShapeMismatchError,
)
from flatshot.model import (
    AdapterSpec,
    Batch,
    Model,
    attach_adapters,
    forward,
    forward_backward,
    gradient_check,
    init_model,
    param_count,
    param_vector,
    replace_head,
    set_gates,
    unflatten,
)


def make_batch(model, n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, model.layer_dims[0]))
    y = rng.integers(0, model.layer_dims[-1], size=n)
    return Batch(x, y)


def test_uniform_logits_give_log_c_loss():
    # zero weights and biases -> all logits equal -> softmax is uniform
    c = 4
    model = Model((3, c), (np.zeros((c, 3)),), (np.zeros(c),))
    batch = Batch(np.array([[1.0, -2.0, 0.5]]), np.array([2]))
    loss, grad, logits = forward_backward(model, batch)
    assert logits == pytest.approx(np.zeros((1, c)))
    assert loss == pytest.approx(np.log(c), abs=1e-12)
    # bias gradient is the uniform-softmax residual (1/C everywhere, -1 on the label)
    expected = np.full(c, 1.0 / c)
    expected[2] -= 1.0
    bias_grad = grad[c * 3 : c * 3 + c]
    np.testing.assert_allclose(bias_grad, expected, atol=1e-15)


def test_weight_decay_adds_exact_quadratic_term():
    model = init_model([3, 5, 2], "tanh", seed=4)
    batch = make_batch(model, 6, seed=1)
    loss0, _, _ = forward_backward(model, batch, 0.0)
    alpha = 0.37
    loss1, _, _ = forward_backward(model, batch, alpha)
    theta = param_vector(model)
    assert loss1 - loss0 == pytest.approx(0.5 * alpha * float(theta @ theta), rel=1e-12)


def test_gradient_matches_finite_differences_small_mlp():
    model = init_model([3, 4, 2], "tanh", seed=7)
    batch = make_batch(model, 5, seed=7)
    assert gradient_check(model, batch, 1e-5) < 1e-5


def test_gradient_check_linear_model():
    model = init_model([4, 3], "relu", seed=2)  # single layer: activation unused
    batch = make_batch(model, 8, seed=3)
    assert gradient_check(model, batch, 1e-5) < 1e-6


def test_gradient_check_single_sample_batch():
    model = init_model([2, 3, 2], "tanh", seed=5)
    batch = make_batch(model, 1, seed=5)
    assert gradient_check(model, batch, 1e-5) < 1e-6


def test_gradient_check_with_adapters_and_weight_decay():
    model = init_model([4, 6, 3], "tanh", seed=9)
    model = attach_adapters(model, AdapterSpec(kind="low_rank", rank=2), seed=1)
    model = set_gates(model, True)
    # give the factors non-trivial values so adapter gradients are exercised
    theta = param_vector(model)
    n_adapter = sum(a.param_count() for a in model.adapters if a is not None)
    rng = np.random.default_rng(11)
    theta[-n_adapter:] = rng.normal(scale=0.3, size=n_adapter)
    model = unflatten(model, theta)
    batch = make_batch(model, 6, seed=13)
    assert gradient_check(model, batch, 1e-5, weight_decay=0.01) < 1e-5


def test_shape_mismatch_and_numeric_errors():
    model = init_model([3, 2], seed=0)
    with pytest.raises(ShapeMismatchError):
        forward(model, np.zeros((2, 5)))
    bad = Model((3, 2), (np.full((2, 3), np.inf),), (np.zeros(2),))
    with pytest.raises(NumericError, match="layer 0"):
        forward(bad, np.ones((1, 3)))
    with pytest.raises(ShapeMismatchError):
        Batch(np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_attach_low_rank_parameter_count():
    model = init_model([4, 4, 4], seed=1)
    before = param_count(model)
    adapted = attach_adapters(model, AdapterSpec(kind="low_rank", rank=1))
    # each adapted 4x4 layer adds B [4x1] and A [1x4]
    assert param_count(adapted) == before + (4 + 4) * 2


def test_attach_rejects_full_rank():
    model = init_model([4, 4], seed=1)
    with pytest.raises(AdapterSpecError):
        attach_adapters(model, AdapterSpec(kind="low_rank", rank=4))


def test_attach_preserves_forward_exactly():
    model = init_model([5, 7, 3], seed=3)
    x = np.random.default_rng(0).normal(size=(9, 5))
    base_out = forward(model, x)
    adapted = attach_adapters(model, AdapterSpec(kind="low_rank", rank=2), seed=8)
    assert adapted.gates_on is False
    np.testing.assert_array_equal(forward(adapted, x), base_out)
    # zero-initialised B means the delta is zero even with gates on
    gated = set_gates(adapted, True)
    np.testing.assert_array_equal(forward(gated, x), base_out)


def test_gate_toggle_is_involution_and_changes_output():
    model = init_model([4, 6, 2], seed=6)
    model = attach_adapters(model, AdapterSpec(kind="full_residual"), seed=0)
    x = np.random.default_rng(1).normal(size=(5, 4))
    off_out = forward(model, x)
    # plant a non-zero residual delta
    theta = param_vector(model)
    theta[-model.adapters[0].delta.size :] = 0.5
    model = unflatten(model, theta)
    on = set_gates(model, True)
    off_again = set_gates(on, False)
    np.testing.assert_array_equal(forward(off_again, x), off_out)
    assert not np.allclose(forward(on, x), off_out)


def test_gates_off_adapter_gradient_exactly_zero():
    model = init_model([3, 5, 2], seed=2)
    model = attach_adapters(model, AdapterSpec(kind="low_rank", rank=1), seed=4)
    n_adapter = sum(a.param_count() for a in model.adapters if a is not None)
    theta = param_vector(model)
    theta[-n_adapter:] = np.random.default_rng(3).normal(size=n_adapter)
    model = unflatten(model, theta)
    batch = make_batch(model, 4, seed=2)
    _, grad, _ = forward_backward(model, batch, weight_decay=0.01)
    assert np.all(grad[-n_adapter:] == 0.0)


def test_set_gates_requires_adapters():
    model = init_model([3, 2], seed=0)
    with pytest.raises(GateStateError):
        set_gates(model, True)


def test_param_vector_length_formula():
    model = init_model([2, 3, 1], seed=0)
    assert param_count(model) == (2 * 3 + 3) + (3 * 1 + 1) == 13
    assert param_vector(model).size == 13


def test_flatten_unflatten_bit_identical():
    model = init_model([3, 4, 2], "tanh", seed=12)
    model = attach_adapters(model, AdapterSpec(kind="low_rank", rank=1), seed=12)
    vec = param_vector(model)
    again = param_vector(unflatten(model, vec))
    np.testing.assert_array_equal(vec, again)


def test_same_construction_flattens_identically():
    a = init_model([4, 5, 3], "relu", seed=42)
    b = init_model([4, 5, 3], "relu", seed=42)
    np.testing.assert_array_equal(param_vector(a), param_vector(b))


def test_unflatten_rejects_wrong_length():
    model = init_model([3, 2], seed=0)
    with pytest.raises(ShapeMismatchError):
        unflatten(model, np.zeros(param_count(model) + 1))


def test_replace_head_keeps_backbone():
    model = init_model([3, 6, 4], seed=5)
    swapped = replace_head(model, 7, seed=1)
    assert swapped.layer_dims == (3, 6, 7)
    np.testing.assert_array_equal(swapped.weights[0], model.weights[0])


@settings(max_examples=25, deadline=None)
@given(
    dims=st.lists(st.integers(2, 8), min_size=2, max_size=4),
    seed=st.integers(0, 10_000),
)
def test_property_flatten_round_trip(dims, seed):
    model = init_model(dims, "tanh", seed=seed)
    vec = param_vector(model)
    assert vec.size == param_count(model)
    np.testing.assert_array_equal(param_vector(unflatten(model, vec)), vec)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 3.0))
def test_property_gate_off_independence(seed, scale):
    # any adapter parameter values leave the gated-off forward untouched
    model = init_model([3, 4, 2], seed=seed)
    x = np.random.default_rng(seed).normal(size=(6, 3))
    base_out = forward(model, x)
    adapted = attach_adapters(model, AdapterSpec(kind="low_rank", rank=1), seed=seed)
    n_adapter = sum(a.param_count() for a in adapted.adapters if a is not None)
    theta = param_vector(adapted)
    rng = np.random.default_rng(seed + 1)
    theta[-n_adapter:] = rng.normal(scale=scale, size=n_adapter)
    adapted = unflatten(adapted, theta)
    np.testing.assert_array_equal(forward(adapted, x), base_out)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_gradient_fidelity_f64(seed):
    rng = np.random.default_rng(seed)
    dims = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(2, 4)))]
    model = init_model(dims, "tanh", seed=seed)
    batch = make_batch(model, int(rng.integers(1, 17)), seed=seed)
    assert gradient_check(model, batch, 1e-5) < 1e-6
