import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastweights.checks import capacity_witness, orthonormal_keys, sum_rule_retrieval_errors
from fastweights.memory import (
    FastWeightState,
    UpdateRuleConfig,
    attention_readout,
    delta_readout,
    delta_rule_step,
    delta_rule_step_write_remove,
    linearized_attention_oracle,
    retrieve,
    softmax_attention_oracle,
    sum_update_step,
)


def identity(x):
    return np.asarray(x)


def test_sum_update_single_write():
    s = sum_update_step(FastWeightState.empty(2, 3), np.eye(3)[0], [4.0, 5.0])
    np.testing.assert_array_equal(s.W[:, 0], [4.0, 5.0])
    np.testing.assert_array_equal(s.W[:, 1:], 0.0)
    np.testing.assert_array_equal(s.z, np.eye(3)[0])
    assert s.step_index == 1


def test_sum_update_zero_value():
    s0 = sum_update_step(FastWeightState.empty(2, 3), [0.2, 0.3, 0.5], [1.0, 1.0])
    s1 = sum_update_step(s0, [1.0, 0.0, 2.0], [0.0, 0.0])
    np.testing.assert_array_equal(s1.W, s0.W)
    assert np.all(s1.z >= s0.z) and np.any(s1.z > s0.z)


def test_sum_update_orthonormal_readout_exact():
    K = orthonormal_keys(4, 2, seed=3)
    V = np.array([[1.0, -2.0], [0.5, 3.0]])
    s = FastWeightState.empty(2, 4)
    for j in range(2):
        s = sum_update_step(s, K[:, j], V[:, j])
    for j in range(2):
        np.testing.assert_allclose(retrieve(s, K[:, j]), V[:, j], atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        sum_update_step(FastWeightState.empty(2, 3), np.ones(4), np.ones(2))
    with pytest.raises(ValueError):
        delta_rule_step(FastWeightState.empty(2, 3), np.ones(3), np.ones(3), 0.5)


def test_attention_readout_examples():
    k, v = np.array([0.2, 0.7, 0.1]), np.array([3.0, -1.0])
    s = sum_update_step(FastWeightState.empty(2, 3), k, v)
    np.testing.assert_allclose(attention_readout(s, k), v, rtol=1e-5)
    s = sum_update_step(s, k, np.array([1.0, 5.0]))
    np.testing.assert_allclose(attention_readout(s, k), [2.0, 2.0], rtol=1e-5)
    np.testing.assert_array_equal(attention_readout(FastWeightState.empty(2, 3), k), [0.0, 0.0])


def test_attention_readout_scale_invariance():
    k, v = np.array([0.3, 0.1, 0.6]), np.array([1.0, 2.0])
    s = sum_update_step(FastWeightState.empty(2, 3), k, v)
    scaled = FastWeightState(s.W * 7.5, s.z * 7.5, s.step_index)
    a, b = attention_readout(s, k), attention_readout(scaled, k)
    assert a.argmax() == b.argmax()
    np.testing.assert_allclose(a, b, rtol=1e-5)


def test_delta_beta_zero_leaves_memory():
    s = sum_update_step(FastWeightState.empty(2, 3), [0.1, 0.5, 0.4], [1.0, 2.0])
    out = delta_rule_step(s, [0.3, 0.3, 0.4], [9.0, 9.0], beta=0.0)
    np.testing.assert_array_equal(out.W, s.W)


def test_delta_one_hot_beta_one_replaces_column():
    s = sum_update_step(FastWeightState.empty(2, 3), np.eye(3)[1], [1.0, 2.0])
    s = sum_update_step(s, np.eye(3)[2], [4.0, 4.0])
    out = delta_rule_step(s, np.eye(3)[1], np.array([-3.0, 7.0]), beta=1.0)
    np.testing.assert_array_equal(out.W[:, 1], [-3.0, 7.0])
    np.testing.assert_array_equal(out.W[:, 2], s.W[:, 2])
    np.testing.assert_array_equal(delta_readout(out, np.eye(3)[1]), [-3.0, 7.0])


def test_delta_rejects_out_of_range_beta():
    s = FastWeightState.empty(1, 2)
    for beta in (-0.1, 1.5):
        with pytest.raises(ValueError):
            delta_rule_step(s, [1.0, 0.0], [1.0], beta)


def test_delta_readout_examples():
    assert np.all(delta_readout(FastWeightState.empty(2, 3), np.ones(3)) == 0)
    s = delta_rule_step(FastWeightState.empty(2, 3), np.eye(3)[0], [2.0, 3.0], beta=1.0)
    np.testing.assert_array_equal(delta_readout(s, np.eye(3)[0]), [2.0, 3.0])
    s = delta_rule_step(s, np.eye(3)[0], [5.0, -1.0], beta=1.0)
    np.testing.assert_array_equal(delta_readout(s, np.eye(3)[0]), [5.0, -1.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=30))
def test_delta_overwrite_returns_last_value(writes):
    eye = np.eye(5)
    s = FastWeightState.empty(5, 5)
    last = {}
    for key, val in writes:
        s = delta_rule_step(s, eye[key], eye[val], beta=1.0)
        last[key] = val
    for key, val in last.items():
        np.testing.assert_array_equal(delta_readout(s, eye[key]), eye[val])


@pytest.mark.parametrize("normalization", ["none", "sum", "attention"])
def test_write_remove_form_matches_compact(normalization):
    rng = np.random.default_rng(5)
    for _ in range(200):
        d_v, d = rng.integers(1, 6, size=2)
        s = FastWeightState(rng.standard_normal((d_v, d)), rng.uniform(0.1, 2.0, d), 3)
        k, v, beta = rng.uniform(0, 1, d), rng.standard_normal(d_v), rng.uniform()
        a = delta_rule_step(s, k, v, beta, normalization)
        b = delta_rule_step_write_remove(s, k, v, beta, normalization)
        assert np.abs(a.W - b.W).max() <= 1e-12


def test_update_rule_config_validation():
    UpdateRuleConfig("delta", "sum")
    with pytest.raises(ValueError):
        UpdateRuleConfig("hebb", "sum")
    with pytest.raises(ValueError):
        UpdateRuleConfig("sum", "layer")


def test_softmax_oracle_examples():
    np.testing.assert_allclose(softmax_attention_oracle([[1.0]], [[4.0], [2.0]], [3.0]), [4.0, 2.0])
    K = np.array([[1.0, 1.0]])
    np.testing.assert_allclose(softmax_attention_oracle(K, [[2.0, 4.0]], [0.5]), [3.0])
    # logits 0, ln 2, ln 3 -> weights 1/6, 2/6, 3/6
    K = np.array([[0.0, np.log(2.0), np.log(3.0)]])
    out = softmax_attention_oracle(K, [[6.0, 0.0, 12.0]], [1.0])
    np.testing.assert_allclose(out, [1.0 + 6.0], rtol=1e-12)
    with pytest.raises(ValueError):
        softmax_attention_oracle(np.zeros((2, 0)), np.zeros((1, 0)), np.zeros(2))


def test_linearized_oracle_examples():
    k = np.array([[0.4], [0.9]])
    np.testing.assert_allclose(linearized_attention_oracle(k, [[5.0]], k[:, 0], identity), [5.0], rtol=1e-5)
    rng = np.random.default_rng(0)
    K, V, q = rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(3)
    np.testing.assert_allclose(
        linearized_attention_oracle(K, V, q, identity, normalize=False), V @ (K.T @ q), rtol=1e-14
    )


@pytest.mark.parametrize("d_dot", [2, 5, 16])
def test_capacity_exact_up_to_d_dot(d_dot):
    for S in range(1, d_dot + 1):
        K = orthonormal_keys(d_dot, S, seed=S)
        V = np.random.default_rng(S).standard_normal((3, S))
        assert sum_rule_retrieval_errors(K, V).max() <= 1e-8


@pytest.mark.parametrize("d_dot", [2, 5, 16])
def test_capacity_witness_over_limit(d_dot):
    K, V = capacity_witness(d_dot, seed=1)
    errors = sum_rule_retrieval_errors(K, V)
    oracle = np.stack([linearized_attention_oracle(K, V, K[:, j], identity, normalize=False)
                       for j in range(d_dot + 1)], axis=1)
    np.testing.assert_allclose(errors, np.abs(oracle - V).max(axis=0), atol=1e-12)
    assert errors.max() >= 0.1
