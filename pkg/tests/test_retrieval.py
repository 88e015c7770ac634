import numpy as np
import pytest

from fastweights.retrieval import (
    EpisodeBatch,
    RetrievalTaskConfig,
    all_queries,
    batch_loss,
    build_model,
    evaluate,
    gen_setting1,
    gen_setting2,
    latest_binding,
    model_forward,
    retrieval_loss,
    sample_batch,
)
from fastweights.rng import Rng
from fastweights.tensor import Tape, backward
from fastweights.train import TrainConfig, train_until


def engineered_model(S, setting, rule="delta"):
    """Keys and queries are the one-hot key symbol and beta saturates at 1: a perfect lookup table."""
    task = RetrievalTaskConfig(S, setting, d_emb=S, d_key=S)
    model = build_model(task, kind="fast", phi="identity", rule=rule, normalization="none", rng=Rng(0))
    p = model.params
    p["embedding"].data[...] = np.eye(S)
    p["W_K"].data[...] = np.hstack([np.eye(S), np.zeros((S, S))])
    p["W_Q"].data[...] = np.eye(S)
    if rule == "delta":
        p["W_beta"].data[...] = np.hstack([np.full((1, S), 40.0), np.zeros((1, S))])
    return task, model


def test_task_config():
    assert RetrievalTaskConfig(20, 2).L == 40
    assert RetrievalTaskConfig(7, 1).L == 7
    with pytest.raises(ValueError):
        RetrievalTaskConfig(0)
    with pytest.raises(ValueError):
        RetrievalTaskConfig(3, setting=3)


def test_setting1_examples():
    ep = gen_setting1(1, np.random.default_rng(0))
    assert ep.keys.tolist() == [[0]] and ep.values.tolist() == [[0]]
    assert ep.queries.tolist() == [[0]] and ep.targets.tolist() == [[0]]
    for seed in range(20):
        ep = gen_setting1(3, np.random.default_rng(seed))
        assert sorted(ep.keys[0]) == [0, 1, 2] and sorted(ep.values[0]) == [0, 1, 2]
        j = int(np.flatnonzero(ep.keys[0] == ep.queries[0, 0])[0])
        assert ep.targets[0, 0] == ep.values[0, j]
    assert gen_setting1(600, np.random.default_rng(0)).keys.shape == (1, 600)


def test_setting2_recency_rule():
    keys = np.array([4, 1, 4, 2])
    values = np.array([3, 0, 7, 1])
    assert latest_binding(keys, values, 4) == 7
    with pytest.raises(KeyError):
        latest_binding(keys, values, 9)


def test_setting2_targets_match_brute_force_scan():
    rng = np.random.default_rng(1)
    for _ in range(200):
        ep = gen_setting2(6, rng)
        assert ep.keys.shape == (1, 12)
        q = ep.queries[0, 0]
        assert q in ep.keys[0]
        last = None
        for k, v in zip(ep.keys[0], ep.values[0]):
            if k == q:
                last = v
        assert ep.targets[0, 0] == last


def test_setting2_frequencies_uniform():
    S, draws = 5, 10_000
    rng = np.random.default_rng(2)
    counts = np.zeros(S)
    for _ in range(draws // (2 * S)):
        ep = gen_setting2(S, rng)
        counts += np.bincount(ep.keys[0], minlength=S)
    expected = counts.sum() / S
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 18.47  # df=4, p=0.001


def test_sample_batch_shapes_and_determinism():
    task = RetrievalTaskConfig(5, 2)
    a = sample_batch(task, Rng(3).stream("x"), 8)
    b = sample_batch(task, Rng(3).stream("x"), 8)
    assert a.keys.shape == (8, 10) and a.queries.shape == (8, 1)
    np.testing.assert_array_equal(a.keys, b.keys)
    np.testing.assert_array_equal(a.targets, b.targets)


def test_eval_batch_size_s100():
    task = RetrievalTaskConfig(100, 1)
    from fastweights.retrieval import N_EVAL_SEQUENCES, generate

    total = 0
    for j in range(N_EVAL_SEQUENCES):
        ep = generate(task, Rng(0).stream("eval", j))
        total += len(all_queries(ep.keys[0], ep.values[0])[0])
    assert total == 2000


def test_retrieval_loss_examples():
    e1 = np.array([1.0, 0.0])
    assert retrieval_loss(e1, e1).item() == 0.0
    assert retrieval_loss(np.zeros(2), e1).item() == 0.5
    assert retrieval_loss(np.array([0.5, 0.5]), e1).item() == 0.25
    with pytest.raises(ValueError):
        retrieval_loss(np.zeros(3), e1)


def test_loss_nonnegative_zero_iff_equal():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.standard_normal(4), rng.standard_normal(4)
        assert retrieval_loss(a, b).item() > 0
        assert retrieval_loss(a, a).item() == 0


@pytest.mark.parametrize("setting", [1, 2])
def test_engineered_delta_model_is_exact(setting):
    task, model = engineered_model(6, setting)
    batch = sample_batch(task, np.random.default_rng(4), 16)
    v_hat = model_forward(model, batch).data
    np.testing.assert_array_equal(v_hat, np.eye(6)[batch.targets])
    loss, acc = evaluate(model, task, Rng(1))
    assert loss == 0.0 and acc == 1.0


def test_constant_zero_model_loss_half():
    task = RetrievalTaskConfig(4, 1, d_emb=4, d_key=4)
    model = build_model(task, kind="fast", phi="identity", rule="sum", normalization="none", rng=Rng(0))
    model.params["W_Q"].data[...] = 0.0
    loss, _ = evaluate(model, task, Rng(0))
    assert loss == 0.5


@pytest.mark.parametrize("kind,phi,rule,norm", [
    ("fast", "dpfp", "sum", "none"), ("fast", "favor", "sum", "attention"),
    ("fast", "elu1", "delta", "sum"), ("softmax", "identity", "sum", "none"),
])
def test_untrained_models_are_finite(kind, phi, rule, norm):
    task = RetrievalTaskConfig(7, 2)
    model = build_model(task, kind=kind, phi=phi, m=8, rule=rule, normalization=norm, rng=Rng(2))
    batch = sample_batch(task, np.random.default_rng(0), 4)
    with Tape() as tape:
        loss = batch_loss(model, batch)
    backward(tape, loss)
    assert np.isfinite(loss.item())
    for p in model.params.values():
        assert p.grad is not None and np.all(np.isfinite(p.grad))


def test_sum_rule_two_keys_learns():
    task = RetrievalTaskConfig(2, 1)
    model = build_model(task, phi="identity", rule="sum", normalization="none", rng=Rng(0))
    rec = train_until(model, task, TrainConfig(max_steps=2000), Rng(0))
    assert rec.converged
    ep = EpisodeBatch(np.array([[1, 0]]), np.array([[0, 1]]), np.array([[1, 0]]), np.array([[0, 1]]))
    v_hat = model_forward(model, ep).data[0]
    np.testing.assert_allclose(v_hat, np.eye(2)[[0, 1]], atol=0.1)


def test_evaluation_deterministic():
    task = RetrievalTaskConfig(5, 2)
    model = build_model(task, phi="dpfp", rule="delta", normalization="sum", rng=Rng(1))
    assert evaluate(model, task, Rng(9)) == evaluate(model, task, Rng(9))


def test_initialisation_convention():
    task = RetrievalTaskConfig(50, 1, d_emb=32, d_key=16)
    model = build_model(task, rule="delta", normalization="sum", rng=Rng(0))
    assert np.all(model.params["W_beta"].data == 0.0)
    std = model.params["W_K"].data.std()
    assert abs(std - 1 / np.sqrt(32 + 50)) < 0.02
