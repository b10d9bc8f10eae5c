import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import max_relative_error, numerical_grad
from rwce.model import (
    MLP, SGD, IntegrityError, NumericalError, ShapeError, checkpoint_dict, load_checkpoint,
    save_checkpoint, softmax, weighted_ce_gradient,
)


def _zero_model(K=4, d=3):
    m = MLP([d, 5, K])
    for p in m.params():
        p[...] = 0.0
    return m


def test_zero_weights_give_uniform_output():
    probs = _zero_model().predict_proba(np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(probs, [[0.25, 0.25, 0.25, 0.25]])


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax(np.array([math.log(2.0), 0.0])), [2 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_random_forward_is_on_the_simplex(rng):
    for _ in range(1000):
        m = MLP([5, 7, 3], temperature=rng.uniform(0.5, 2.5), seed=int(rng.integers(1 << 30)))
        p = m.predict_proba(rng.normal(size=5) * 3)
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p >= 0)


def test_input_shape_error():
    with pytest.raises(ShapeError):
        MLP([4, 3]).predict_proba(np.zeros(5))


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        MLP([2, 2], temperature=0.0)


def test_init_range_is_glorot_uniform():
    m = MLP([30, 20, 10], seed=1)
    a = math.sqrt(6 / 50)
    assert np.abs(m.weights[0]).max() <= a
    assert np.abs(m.weights[0]).max() > 0.9 * a
    assert not np.any(m.biases[0])


def _batch(rng, n=6, d=5, K=3):
    return rng.normal(size=(n, d)), rng.integers(K, size=n)


def test_zero_weights_give_zero_gradient(rng):
    m = MLP([5, 4, 3], seed=0)
    X, y = _batch(rng)
    _, grads = weighted_ce_gradient(m, X, y, np.zeros(len(y)))
    assert all(not np.any(g) for g in grads)


def test_unit_weights_give_mean_ce_gradient(rng):
    m = MLP([5, 4, 3], temperature=1.3, seed=0)
    X, y = _batch(rng)
    val, grads = weighted_ce_gradient(m, X, y, np.ones(len(y)))
    logp = np.log(m.predict_proba(X))
    assert val == pytest.approx(-np.mean(logp[np.arange(len(y)), y]), rel=1e-12)

    flat = m.flat_params()

    def mean_ce(theta):
        m.set_flat_params(theta)
        p = m.predict_proba(X)
        return -np.mean(np.log(p[np.arange(len(y)), y]))

    num = numerical_grad(mean_ce, flat)
    m.set_flat_params(flat)
    assert max_relative_error(np.concatenate([g.ravel() for g in grads]), num) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_weighted_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = MLP([5, 6, 3], temperature=rng.uniform(1, 2.5), seed=seed)
    X, y = _batch(rng)
    w = rng.uniform(0, 3, size=len(y))
    _, grads = weighted_ce_gradient(m, X, y, w)
    flat = m.flat_params()

    def objective(theta):
        m.set_flat_params(theta)
        p = m.predict_proba(X)
        return np.mean(w * -np.log(p[np.arange(len(y)), y]))

    num = numerical_grad(objective, flat, h=1e-5)
    assert max_relative_error(np.concatenate([g.ravel() for g in grads]), num) < 1e-4


def test_weight_length_mismatch(rng):
    X, y = _batch(rng)
    with pytest.raises(ShapeError):
        weighted_ce_gradient(MLP([5, 3]), X, y, np.ones(2))


def test_non_finite_loss_reports_index():
    m = MLP([2, 2])
    X = np.array([[0.0, 0.0], [np.nan, 1.0]])
    with pytest.raises(NumericalError) as info:
        weighted_ce_gradient(m, X, np.array([0, 1]), np.ones(2))
    assert info.value.index == 1


def test_vanilla_sgd_step():
    p = [np.array([1.0, 2.0])]
    g = [np.array([0.5, -1.0])]
    SGD(lr=0.1, momentum=0.0).step(p, g, epoch=0)
    np.testing.assert_allclose(p[0], [0.95, 2.1], rtol=0, atol=1e-15)


def test_step_schedule_two_milestones():
    # lr 0.04, milestones 25 and 40, gamma 0.1
    opt = SGD(lr=0.04, milestones=[25, 40], gamma=0.1)
    assert opt.lr_at(0) == pytest.approx(0.04)
    assert opt.lr_at(25) == pytest.approx(0.004)
    assert opt.lr_at(45) == pytest.approx(0.0004)


def test_momentum_velocity_converges_to_geometric_limit():
    opt = SGD(lr=1e-12, momentum=0.9)
    p = [np.zeros(3)]
    g = [np.array([1.0, -2.0, 0.5])]
    for _ in range(400):
        opt.step(p, g, 0)
    np.testing.assert_allclose(opt.velocity[0], 10 * g[0], rtol=1e-9)


def test_weight_decay_shrinks_norm_monotonically():
    opt = SGD(lr=0.1, momentum=0.0, weight_decay=0.05)
    p = [np.array([3.0, -4.0])]
    norms = []
    for _ in range(20):
        opt.step(p, [np.zeros(2)], 0)
        norms.append(np.linalg.norm(p[0]))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        SGD(lr=0.1).step([np.zeros(2)], [np.zeros(3)], 0)


def test_identical_seeds_are_bit_identical(rng):
    X, y = _batch(rng, n=20)
    flats = []
    for _ in range(2):
        m = MLP([5, 8, 3], seed=7)
        opt = SGD(lr=0.05, momentum=0.9, weight_decay=1e-3)
        for _ in range(30):
            _, g = weighted_ce_gradient(m, X, y, np.ones(len(y)))
            opt.step(m.params(), g, 0)
        flats.append(m.flat_params())
    assert flats[0].tobytes() == flats[1].tobytes()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = MLP([4, 9, 3], temperature=1.7, seed=5)
    opt = SGD(lr=0.1)
    opt.step(m.params(), [np.ones_like(p) for p in m.params()], 0)
    path = tmp_path / "ck.json"
    save_checkpoint(path, m, opt, epoch=3)
    opt2 = SGD(lr=0.1)
    loaded, epoch = load_checkpoint(path, opt2)
    assert epoch == 3
    assert loaded.flat_params().tobytes() == m.flat_params().tobytes()
    assert loaded.temperature == m.temperature
    for a, b in zip(opt.velocity, opt2.velocity):
        assert a.tobytes() == b.tobytes()
    path2 = tmp_path / "ck2.json"
    save_checkpoint(path2, loaded, opt2, epoch=3)
    assert path.read_bytes() == path2.read_bytes()


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "ck.json"
    doc = checkpoint_dict(MLP([2, 2]))
    doc["payload"]["temperature"] = (2.0).hex()
    path.write_text(json.dumps(doc))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)
    path.write_text("{not json")
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12), st.floats(0.2, 5.0))
def test_softmax_normalization_property(logits, temperature):
    p = softmax(np.asarray(logits) / temperature)
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all(p >= 0)
