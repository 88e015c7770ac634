import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastweights.checks import gradcheck_cell
from fastweights.features import make_feature_map
from fastweights.kernels import BACKENDS, get_backend
from fastweights.layer import (
    backward_sequence,
    fast_weight,
    forward_sequence,
    live_matrix_bound,
    segment_length,
)
from fastweights.memory import (
    FastWeightState,
    attention_readout,
    delta_readout,
    delta_rule_step,
    linearized_attention_oracle,
    sum_update_step,
)
from fastweights.tensor import Tape, Tensor, backward, tsum

COMBOS = [(r, n, f) for r in ("sum", "delta") for n in ("attention", "sum", "none") for f in (False, True)]


def _inputs(rng, B=2, L=7, D=5, E=3, Q=None, dtype=np.float64):
    phik = rng.uniform(0.0, 1.0, (B, L, D)).astype(dtype)
    v = rng.standard_normal((B, L, E)).astype(dtype)
    phiq = rng.uniform(0.0, 1.0, (B, Q or L, D)).astype(dtype)
    beta = rng.uniform(0.0, 1.0, (B, L)).astype(dtype)
    return phik, v, phiq, beta


def test_segment_length_and_bound():
    assert [segment_length(L) for L in (1, 2, 4, 5, 9, 10, 256, 257)] == [1, 2, 2, 3, 3, 4, 16, 17]
    assert live_matrix_bound(256) == 36


def test_backend_registry():
    assert "python" in BACKENDS
    assert get_backend("python").BACKEND == "python"
    with pytest.raises(ValueError):
        get_backend("fortran")


def test_backend_env_override(monkeypatch):
    monkeypatch.setenv("FASTWEIGHTS_BACKEND", "python")
    assert get_backend().BACKEND == "python"


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernel not built")
@pytest.mark.parametrize("rule,norm,final", COMBOS)
def test_backends_agree(rule, norm, final):
    rng = np.random.default_rng(3)
    phik, v, phiq, beta = _inputs(rng, L=11, Q=4 if final else None)
    gy = rng.standard_normal((2, phiq.shape[1], 3))
    out = {}
    for name in ("python", "cython"):
        y, rec = forward_sequence(phik, v, phiq, beta, rule=rule, normalization=norm, final=final, backend=name)
        out[name] = (y, backward_sequence(rec, gy))
    np.testing.assert_allclose(out["python"][0], out["cython"][0], rtol=1e-12, atol=1e-12)
    for key in ("phik", "v", "beta", "phiq"):
        np.testing.assert_allclose(out["python"][1][key], out["cython"][1][key], rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_single_step_matches_reference(backend):
    k, v, q = np.array([0.2, 0.5, 0.3]), np.array([1.0, -2.0]), np.array([0.6, 0.1, 0.3])
    y, _ = forward_sequence(k[None], v[None], q[None], rule="sum", normalization="attention", backend=backend)
    s = sum_update_step(FastWeightState.empty(2, 3), k, v)
    np.testing.assert_allclose(y[0], attention_readout(s, q), rtol=1e-14)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
@pytest.mark.parametrize("norm", ["attention", "sum", "none"])
def test_delta_sequence_matches_per_step_reference(backend, norm):
    rng = np.random.default_rng(8)
    phik, v, phiq, beta = _inputs(rng, B=1, L=9)
    phik, v, phiq, beta = phik[0], v[0], phiq[0], beta[0]
    y, _ = forward_sequence(phik, v, phiq, beta, rule="delta", normalization=norm, backend=backend)
    s = FastWeightState.empty(3, 5)
    for i in range(9):
        s = delta_rule_step(s, phik[i], v[i], float(beta[i]), norm)
        np.testing.assert_allclose(y[i], delta_readout(s, phiq[i], norm), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_sum_rule_attention_matches_quadratic_oracle_L32(backend):
    rng = np.random.default_rng(12)
    fm = make_feature_map("dpfp", 6, nu=2)
    K, V, Q = rng.standard_normal((6, 32)), rng.standard_normal((4, 32)), rng.standard_normal((6, 32))
    y, _ = forward_sequence(fm(K.T).data, V.T, fm(Q.T).data, normalization="attention", backend=backend)
    for i in range(32):
        ref = linearized_attention_oracle(K[:, : i + 1], V[:, : i + 1], Q[:, i], fm)
        np.testing.assert_allclose(y[i], ref, atol=1e-10)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
@pytest.mark.parametrize("norm", ["attention", "sum", "none"])
def test_delta_all_beta_zero_outputs_zero(backend, norm):
    rng = np.random.default_rng(1)
    phik, v, phiq, beta = _inputs(rng)
    y, _ = forward_sequence(phik, v, phiq, np.zeros_like(beta), rule="delta", normalization=norm, backend=backend)
    assert np.all(y == 0.0)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_gradient_wrt_unwritten_value_is_zero(backend):
    rng = np.random.default_rng(2)
    phik, v, phiq, beta = _inputs(rng)
    beta[:, 4] = 0.0
    _, rec = forward_sequence(phik, v, phiq, beta, rule="delta", normalization="sum", backend=backend)
    grads = backward_sequence(rec, rng.standard_normal((2, 7, 3)))
    assert np.all(grads["v"][:, 4] == 0.0)
    assert np.any(grads["v"][:, 3] != 0.0)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
@pytest.mark.parametrize("rule", ["sum", "delta"])
@pytest.mark.parametrize("final", [False, True])
def test_live_matrices_within_bound_L256(backend, rule, final):
    rng = np.random.default_rng(0)
    phik, v, phiq, beta = _inputs(rng, B=2, L=256, D=6, E=4, Q=3 if final else None)
    _, rec = forward_sequence(phik, v, phiq, beta, rule=rule, normalization="attention", final=final, backend=backend)
    backward_sequence(rec, np.ones((2, phiq.shape[1], 4)))
    assert rec.forward_peak <= 36
    assert rec.backward_peak <= 36


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 80), st.sampled_from(sorted(BACKENDS)), st.booleans())
def test_live_matrices_within_bound_any_length(L, backend, final):
    rng = np.random.default_rng(L)
    phik, v, phiq, beta = _inputs(rng, B=1, L=L, D=3, E=2, Q=2 if final else None)
    _, rec = forward_sequence(phik, v, phiq, beta, rule="delta", normalization="attention", final=final, backend=backend)
    backward_sequence(rec, np.ones((1, phiq.shape[1], 2)))
    bound = live_matrix_bound(L)
    assert rec.forward_peak <= bound and rec.backward_peak <= bound


def test_record_keeps_no_per_step_matrices():
    rng = np.random.default_rng(0)
    phik, v, phiq, beta = _inputs(rng, B=1, L=100)
    _, rec = forward_sequence(phik, v, phiq, beta, rule="delta", normalization="sum")
    n_ckpt = len(rec.checkpoints)
    assert n_ckpt == segment_length(100) == 10


def test_batched_equals_unbatched():
    rng = np.random.default_rng(5)
    phik, v, phiq, beta = _inputs(rng, B=3)
    y, _ = forward_sequence(phik, v, phiq, beta, rule="delta", normalization="attention")
    for b in range(3):
        yb, _ = forward_sequence(phik[b], v[b], phiq[b], beta[b], rule="delta", normalization="attention")
        np.testing.assert_array_equal(y[b], yb)


def test_forward_validation():
    rng = np.random.default_rng(0)
    phik, v, phiq, beta = _inputs(rng)
    with pytest.raises(ValueError):
        forward_sequence(phik, v, phiq, rule="delta")
    with pytest.raises(ValueError):
        forward_sequence(phik, v, phiq, beta * 2.0 + 0.5, rule="delta")
    with pytest.raises(ValueError):
        forward_sequence(phik, v[:, :3], phiq)
    with pytest.raises(ValueError):
        forward_sequence(phik, v, phiq[:, :3])
    with pytest.raises(ValueError):
        forward_sequence(phik, v, phiq, rule="hebb")
    bad = phik.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        forward_sequence(bad, v, phiq)


def test_backward_validation():
    rng = np.random.default_rng(0)
    phik, v, phiq, beta = _inputs(rng)
    _, rec = forward_sequence(phik, v, phiq, beta, rule="delta", normalization="sum")
    with pytest.raises(ValueError):
        backward_sequence(rec, np.ones((2, 6, 3)))
    backward_sequence(rec, np.ones((2, 7, 3)))
    with pytest.raises(RuntimeError):
        backward_sequence(rec, np.ones((2, 7, 3)))


def test_float32_runs_close_to_float64():
    rng = np.random.default_rng(6)
    phik, v, phiq, beta = _inputs(rng, L=20)
    y64, _ = forward_sequence(phik, v, phiq, beta, rule="delta", normalization="attention")
    y32, _ = forward_sequence(*(a.astype(np.float32) for a in (phik, v, phiq, beta)), rule="delta",
                              normalization="attention")
    assert y32.dtype == np.float32
    np.testing.assert_allclose(y32, y64, atol=1e-4)


def test_fast_weight_tensor_op_records_only_when_needed():
    rng = np.random.default_rng(0)
    phik, v, phiq, beta = _inputs(rng, B=1, L=4)
    y = fast_weight(phik, v, phiq, beta, rule="delta", normalization="sum")
    assert y.is_leaf
    pk = Tensor(phik, requires_grad=True)
    with Tape() as tape:
        loss = tsum(fast_weight(pk, v, phiq, beta, rule="delta", normalization="sum"))
    backward(tape, loss)
    assert pk.grad.shape == phik.shape


@pytest.mark.parametrize("rule", ["sum", "delta"])
@pytest.mark.parametrize("phi", ["elu1", "dpfp"])
@pytest.mark.parametrize("norm", ["attention", "none"])
@pytest.mark.parametrize("seed", [1, 2])
def test_layer_gradients_extra_seeds(rule, phi, norm, seed):
    assert gradcheck_cell(rule, phi, norm, seed=seed).passed
