import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offbrl.approximator import (DropoutMask, FeedforwardQ, TabularQ, TargetCopy, backward, clip_and_step,
                                 clip_gradient, forward, load_checkpoint, mc_lower_bound, polyak_update,
                                 save_checkpoint, smooth_l1)
from offbrl.core import TrainingError, UsageError


def test_create_shapes_and_init_range():
    net = FeedforwardQ.create([5, 8, 3], seed=0)
    assert (net.input_dim, net.action_count) == (5, 3)
    assert net.parameter_count == 5 * 8 + 8 + 8 * 3 + 3
    w1 = net.params[:40]
    assert np.abs(w1).max() <= 1 / np.sqrt(5)


def test_forward_rejects_wrong_width():
    net = FeedforwardQ.create([4, 3], seed=0)
    with pytest.raises(UsageError):
        forward(net, np.zeros(5))


def test_dropout_mask_is_inverted_and_deterministic():
    net = FeedforwardQ.create([4, 16, 2], dropout_rate=0.25, seed=0)
    m1 = DropoutMask.sample(net, 7, batch=1000)
    m2 = DropoutMask.sample(net, 7, batch=1000)
    np.testing.assert_array_equal(m1.values, m2.values)
    assert set(np.unique(m1.values)) <= {0.0, 1 / 0.75}
    assert abs(m1.values.mean() - 1.0) < 0.02


def test_backward_single_action_gradient():
    net = FeedforwardQ.create([3, 5, 2], activation="tanh", seed=1)
    x = np.array([0.3, -0.2, 0.9])
    g = backward(net, x, None, 1, 1.0)
    eps = 1e-6
    j = 4
    p = net.params.copy()
    p[j] += eps
    up = forward(net.with_params(p), x)[1]
    p[j] -= 2 * eps
    down = forward(net.with_params(p), x)[1]
    assert g[j] == pytest.approx((up - down) / (2 * eps), rel=1e-6)
    with pytest.raises(UsageError):
        backward(net, x, None, 2, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.1, 3))
def test_smooth_l1_matches_definition(p, t, delta):
    loss, grad = smooth_l1(p, t, delta)
    d = p - t
    if abs(d) <= delta:
        assert loss == pytest.approx(0.5 * d * d / delta)
        assert grad == pytest.approx(d / delta)
    else:
        assert loss == pytest.approx(abs(d) - 0.5 * delta)
        assert grad == np.sign(d)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(0.01, 5))
def test_global_clip_bounds_norm_and_keeps_direction(g, c):
    g = np.array(g)
    out = clip_gradient(g, c)
    assert np.linalg.norm(out) <= c * (1 + 1e-12)
    if np.linalg.norm(g) <= c:
        np.testing.assert_array_equal(out, g)
    elif np.linalg.norm(g) > 0:
        np.testing.assert_allclose(out / np.linalg.norm(out), g / np.linalg.norm(g), atol=1e-12)


def test_clip_elementwise_and_non_finite():
    np.testing.assert_array_equal(clip_gradient([3.0, -0.5, -4.0], 1.0, "elementwise"), [1.0, -0.5, -1.0])
    with pytest.raises(TrainingError):
        clip_gradient([1.0, np.nan])


def test_sgd_step_and_polyak():
    net = FeedforwardQ.create([2, 2], seed=0)
    g = np.ones(net.parameter_count) * 10
    new = clip_and_step(net, g, learning_rate=0.1, clip_norm=1.0)
    assert np.linalg.norm(new.params - net.params) == pytest.approx(0.1)
    tgt = TargetCopy.of(net, 0.25)
    t2 = polyak_update(tgt, new.params)
    np.testing.assert_allclose(t2.params, 0.75 * net.params + 0.25 * new.params)
    np.testing.assert_array_equal(polyak_update(tgt, new.params, 1.0).params, new.params)
    with pytest.raises(UsageError):
        polyak_update(tgt, new.params, 1.5)


def test_mc_lower_bound_deterministic_without_dropout():
    net = FeedforwardQ.create([3, 6, 4], dropout_rate=0.0, seed=3)
    x = np.array([1.0, -1.0, 0.5])
    np.testing.assert_array_equal(mc_lower_bound(net, x, 5, np.random.default_rng(0)), forward(net, x))
    with pytest.raises(UsageError):
        mc_lower_bound(net, x, 0)


def test_mc_lower_bound_is_pessimistic():
    net = FeedforwardQ.create([3, 32, 4], dropout_rate=0.5, seed=3)
    x = np.array([1.0, -1.0, 0.5])
    lbs = np.array([mc_lower_bound(net, x, 5, np.random.default_rng(i)) for i in range(200)])
    assert (lbs.mean(axis=0) < forward(net, x)).all()


def test_tabular_q_gradient_accumulates():
    q = TabularQ.zeros(3, 2)
    g = q.grad(np.array([0, 0, 2]), np.array([1, 1, 0]), np.array([0.5, 0.25, -1.0]))
    np.testing.assert_array_equal(g.reshape(3, 2), [[0, 0.75], [0, 0], [-1.0, 0]])


@pytest.mark.parametrize("make", [lambda: FeedforwardQ.create([4, 7, 3], dropout_rate=0.2, seed=9),
                                  lambda: TabularQ(np.arange(6.0).reshape(3, 2) / 7)])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, make):
    net = make()
    save_checkpoint(net, tmp_path / "q.json", variant="kl_psi")
    back = load_checkpoint(tmp_path / "q.json")
    np.testing.assert_array_equal(back.params, net.params)
    assert back.same_shape(net)


def test_checkpoint_rejects_other_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "something"}')
    with pytest.raises(UsageError):
        load_checkpoint(p)
