import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momaql import nn
from momaql.errors import DimensionError, DomainError
from momaql.policy import (ActionSpaceSpec, PolicyNet, denoise, ema_update, jump, prior_noise,
                           sample_action, sample_action_backward, sample_action_traced,
                           time_features)
from momaql.schedule import NoiseSchedule

FM = NoiseSchedule("fm")
VP = NoiseSchedule("vp")
SPACE = ActionSpaceSpec(-np.ones(2), np.ones(2))


def _net(seed=0, hidden=8, layers=2, scale=0.4):
    net = PolicyNet(3, 2, hidden, layers, rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    for k in net.params:
        net.params[k] = net.params[k] + scale * rng.normal(size=net.params[k].shape)
    return net


def test_time_features():
    f = time_features([0.0, 0.5], 4)
    assert f.shape == (2, 4)
    np.testing.assert_allclose(f[0], [0, 0, 1, 1], atol=1e-15)
    np.testing.assert_allclose(f[1], [np.sin(np.pi / 2), np.sin(np.pi / np.sqrt(2)),
                                      np.cos(np.pi / 2), np.cos(np.pi / np.sqrt(2))], atol=1e-15)


def test_action_space_validation():
    with pytest.raises(DimensionError):
        ActionSpaceSpec([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(DimensionError):
        ActionSpaceSpec([0.0], [1.0, 2.0])
    with pytest.raises(DomainError):
        ActionSpaceSpec([0.0], [1.0], sigma_d=0.0)
    np.testing.assert_array_equal(SPACE.clip([[2.0, -3.0]]), [[1.0, -1.0]])


def test_zero_last_layer_samples_origin():
    # a zero output layer predicts x_hat = 0 and the last jump lands on alpha_0 * 0
    net = PolicyNet(3, 2, 8, 2, rng=np.random.default_rng(0))
    for n in (1, 2, 5):
        a = sample_action(net, np.ones((4, 3)), n, SPACE, FM, np.random.default_rng(1))
        np.testing.assert_array_equal(a, np.zeros((4, 2)))


def test_jump_at_equal_times_is_identity():
    net = _net()
    x_t = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_allclose(jump(net, np.zeros((5, 3)), x_t, 0.4, 0.4, VP), x_t, atol=1e-15)


def test_one_step_sampler_is_denoiser_at_unit_time():
    net = _net(1)
    state = np.random.default_rng(2).normal(size=(6, 3))
    noise = np.random.default_rng(3).normal(0, 0.5, size=(6, 2))
    big = ActionSpaceSpec(-1e9 * np.ones(2), 1e9 * np.ones(2))
    a = sample_action(net, state, 1, big, FM, noise=noise)
    np.testing.assert_allclose(a, denoise(net, state, noise, 0.0, 1.0), atol=1e-15)


def test_two_step_sampler_matches_manual_jumps():
    net = _net(2)
    state = np.random.default_rng(4).normal(size=(3, 3))
    noise = np.random.default_rng(5).normal(0, 0.5, size=(3, 2))
    big = ActionSpaceSpec(-1e9 * np.ones(2), 1e9 * np.ones(2))
    mid = jump(net, state, noise, 0.5, 1.0, VP)
    want = jump(net, state, mid, 0.0, 0.5, VP)
    np.testing.assert_allclose(sample_action(net, state, 2, big, VP, noise=noise), want, atol=1e-14)


def test_single_state_and_bounds():
    net = _net(3, scale=3.0)
    a = sample_action(net, np.zeros(3), 2, SPACE, FM, np.random.default_rng(0))
    assert a.shape == (2,)
    many = sample_action(net, np.zeros((200, 3)), 2, SPACE, FM, np.random.default_rng(0))
    assert np.all((many >= -1) & (many <= 1))


def test_dimension_errors():
    net = _net()
    with pytest.raises(DimensionError):
        sample_action(net, np.zeros((2, 4)), 2, SPACE, FM, np.random.default_rng(0))
    with pytest.raises(DomainError):
        denoise(net, np.zeros(3), np.zeros(2), 0.6, 0.5)


def test_sampling_is_deterministic_given_seed():
    net = _net(4)
    a = sample_action(net, np.ones((8, 3)), 3, SPACE, FM, np.random.default_rng(9))
    b = sample_action(net, np.ones((8, 3)), 3, SPACE, FM, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("n_steps", [1, 2, 3])
@pytest.mark.parametrize("kind", ["fm", "vp"])
def test_sampler_backward_matches_fd(n_steps, kind):
    sched = NoiseSchedule(kind)
    net = _net(5, hidden=6)
    space = ActionSpaceSpec(-0.4 * np.ones(2), 0.4 * np.ones(2))
    rng = np.random.default_rng(6)
    state = rng.normal(size=(7, 3))
    noise = prior_noise(space, rng, 7)
    c = rng.normal(size=(7, 2))

    def loss():
        return float(np.sum(c * sample_action(net, state, n_steps, space, sched, noise=noise)))

    _, trace = sample_action_traced(net, state, noise, n_steps, space, sched)
    grads = sample_action_backward(trace, c)
    h = 1e-6
    for k in net.params:
        p = net.params[k]
        for idx in list(np.ndindex(p.shape))[:12]:
            old = p[idx]
            p[idx] = old + h
            lp = loss()
            p[idx] = old - h
            lm = loss()
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grads[k][idx]) <= 1e-5 * max(1.0, abs(fd))


def test_clip_mask_and_straight_through():
    net = _net(7, scale=2.0)
    space = ActionSpaceSpec(-0.05 * np.ones(2), 0.05 * np.ones(2))
    state = np.random.default_rng(8).normal(size=(16, 3))
    noise = np.random.default_rng(9).normal(0, 0.5, size=(16, 2))
    a, trace = sample_action_traced(net, state, noise, 2, space, FM)
    outside = (trace.raw <= space.low) | (trace.raw >= space.high)
    assert outside.all()  # every coordinate is clipped here
    g = sample_action_backward(trace, np.ones_like(a))
    assert all(np.all(v == 0) for v in g.values())
    _, trace = sample_action_traced(net, state, noise, 2, space, FM)
    g = sample_action_backward(trace, np.ones_like(a), straight_through=True)
    assert any(np.any(v != 0) for v in g.values())


def test_ema_update():
    online = nn.ParamStore({"w": np.array([1.0, 2.0])})
    tgt = nn.ParamStore({"w": np.array([3.0, 4.0])})
    ema_update(tgt, online, 0.75)
    np.testing.assert_allclose(tgt["w"], [2.5, 3.5], rtol=1e-15)
    ema_update(tgt, online, 1.0)
    np.testing.assert_array_equal(tgt["w"], [2.5, 3.5])
    ema_update(tgt, online, 0.0)
    np.testing.assert_array_equal(tgt["w"], [1.0, 2.0])
    with pytest.raises(DomainError):
        ema_update(tgt, online, 1.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_ema_stays_between(alpha, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 5))
    tgt = nn.ParamStore({"w": a.copy()})
    ema_update(tgt, nn.ParamStore({"w": b}), alpha)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(tgt["w"] >= lo - 1e-12) and np.all(tgt["w"] <= hi + 1e-12)
