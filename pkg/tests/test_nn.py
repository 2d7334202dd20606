import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lamasafe.nn import (
    AdamState,
    Mlp,
    PolicyHead,
    adam_step,
    clip_by_global_norm,
    finite_difference_check,
    gradcheck_suite,
    sample_and_logprob,
)


def straight_line_forward(net, x):
    """Independent re-evaluation with explicit loops over units."""
    h = [float(v) for v in x]
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        out = []
        for i in range(w.shape[0]):
            z = float(b[i])
            for j in range(w.shape[1]):
                z += float(w[i, j]) * h[j]
            out.append(z if k == last or net.activation == "identity" else math.tanh(z))
        h = out
    return np.array(h)


def test_zero_net_gives_zero_output():
    net = Mlp([3, 4, 2])
    for p in net.params:
        p[...] = 0.0
    assert np.array_equal(net(np.ones(3)), np.zeros(2))


def test_identity_linear_layer():
    net = Mlp([3, 3])
    net.weights[0][...] = np.eye(3)
    x = np.array([0.5, -2.0, 3.0])
    assert np.array_equal(net(x), x)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2**31), st.lists(st.integers(1, 7), min_size=2, max_size=4))
def test_forward_matches_straight_line(seed, sizes):
    rng = np.random.default_rng(seed)
    net = Mlp(sizes, rng)
    for b in net.biases:
        b[:] = rng.standard_normal(b.shape)
    x = rng.standard_normal(sizes[0])
    assert np.allclose(net(x), straight_line_forward(net, x), atol=1e-12, rtol=0)


def test_forward_shape_errors():
    net = Mlp([3, 2])
    with pytest.raises(ValueError):
        net(np.ones(4))
    with pytest.raises(ValueError):
        Mlp([3])
    with pytest.raises(ValueError):
        Mlp([3, 2], activation="relu")


def test_batched_forward_equals_rowwise():
    rng = np.random.default_rng(1)
    net = Mlp([4, 6, 3], rng)
    x = rng.standard_normal((5, 4))
    assert np.allclose(net(x), np.stack([net(r) for r in x]), atol=1e-15)


def test_default_hidden_sizes_and_out_gain():
    head = PolicyHead.build("categorical", 10, 5, rng=np.random.default_rng(0))
    assert head.net.sizes == [10, 64, 64, 5]
    assert np.abs(head.net.weights[-1]).max() < 0.02


def test_gradcheck_suite_hundred_nets():
    errors = gradcheck_suite(100, seed=3)
    assert len(errors) == 100 and max(errors) < 1e-4


def test_finite_difference_check_detects_wrong_gradient(monkeypatch):
    net = Mlp([3, 4, 2], np.random.default_rng(0))
    original = Mlp.backward

    def broken(self, tape, g):
        grads, gi = original(self, tape, g)
        grads[0] = grads[0] * 1.01
        return grads, gi

    monkeypatch.setattr(Mlp, "backward", broken)
    assert finite_difference_check(net, np.ones((2, 3))) > 1e-4


def test_zero_and_scaled_output_gradient():
    rng = np.random.default_rng(2)
    net = Mlp([3, 5, 2], rng)
    x = rng.standard_normal((4, 3))
    _, tape = net.forward(x)
    zero, gin = net.backward(tape, np.zeros((4, 2)))
    assert all(not g.any() for g in zero) and not gin.any()
    g = rng.standard_normal((4, 2))
    one, _ = net.backward(tape, g)
    two, _ = net.backward(tape, 2 * g)
    assert all(np.allclose(b, 2 * a, atol=1e-14) for a, b in zip(one, two))


def test_stale_tape_rejected():
    net = Mlp([2, 2])
    _, tape = net.forward(np.ones(2))
    net.touch()
    with pytest.raises(RuntimeError):
        net.backward(tape, np.ones(2))


def test_mlp_round_trip():
    net = Mlp([3, 4, 2], np.random.default_rng(5))
    back = Mlp.from_dict(net.to_dict())
    x = np.arange(3.0)
    assert np.array_equal(back(x), net(x))


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    state = AdamState.like(p, 0.1)
    adam_step(p, [np.zeros(2)], state)
    assert np.array_equal(p[0], [1.0, -2.0]) and state.step == 1


@given(st.floats(1e-3, 1e3), st.floats(1e-5, 1e-2))
def test_adam_first_step_is_lr(g, lr):
    p = [np.zeros(3)]
    adam_step(p, [np.full(3, g)], AdamState.like(p, lr))
    assert np.allclose(p[0], -lr, rtol=1e-4)


def test_adam_deterministic_and_matches_closed_form():
    rng = np.random.default_rng(0)
    grads = [rng.standard_normal(4) for _ in range(5)]

    def run():
        p = [np.ones(4)]
        s = AdamState.like(p, 3e-4)
        for g in grads:
            adam_step(p, [g], s)
        return p[0]

    a = run()
    assert np.array_equal(a, run())
    m = v = np.zeros(4)
    p = np.ones(4)
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 3e-4 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(a, p, atol=1e-15)


def test_adam_errors():
    p = [np.zeros(2)]
    with pytest.raises(FloatingPointError):
        adam_step(p, [np.array([np.inf, 0.0])], AdamState.like(p, 0.1))
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], AdamState.like(p, 0.1))


def test_adam_state_round_trip():
    p = [np.ones((2, 2))]
    s = AdamState.like(p, 0.01)
    adam_step(p, [np.ones((2, 2))], s)
    back = AdamState.from_dict(s.to_dict(), p)
    assert back.step == 1 and np.array_equal(back.m[0], s.m[0]) and np.array_equal(back.v[0], s.v[0])


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    clipped = clip_by_global_norm(g, 1.0)
    assert np.allclose([c[0] for c in clipped], [0.6, 0.8])
    assert clip_by_global_norm(g, 10.0)[0] is g[0]


def test_uniform_categorical_logprob():
    head = PolicyHead.build("categorical", 3, 5, rng=np.random.default_rng(0))
    for p in head.params:
        p[...] = 0.0
    _, _, logp, ent = sample_and_logprob(head, np.ones(3), np.random.default_rng(0))
    assert logp == pytest.approx(math.log(1 / 5)) and ent == pytest.approx(math.log(5))


def test_categorical_sampling_frequencies():
    head = PolicyHead.build("categorical", 2, 5, rng=np.random.default_rng(0))
    head.net.biases[-1][:] = [0.5, -1.0, 2.0, 0.0, 1.0]
    feats = np.zeros((1_000_000, 2))
    acts, _, logp, ent = head.sample_and_logprob(feats, np.random.default_rng(1))
    logits = head.net(np.zeros(2))
    probs = np.exp(logits) / np.exp(logits).sum()
    freq = np.bincount(acts, minlength=5) / len(acts)
    assert 0.5 * np.abs(freq - probs).sum() < 0.01
    assert np.allclose(np.exp(logp[:100]), probs[acts[:100]], atol=1e-9)
    assert (ent >= 0).all()


def test_gaussian_small_sigma_and_density():
    head = PolicyHead.build("gaussian", 4, 2, rng=np.random.default_rng(0), action_bound=0.1)
    x = np.random.default_rng(1).standard_normal(4)
    mean = head.net(x)
    head.log_std[:] = math.log(1e-6)
    env, raw, _, _ = head.sample_and_logprob(x, np.random.default_rng(2))
    assert np.allclose(raw, mean, atol=1e-4)
    head.log_std[:] = math.log(0.5)
    env, raw, logp, ent = head.sample_and_logprob(x, np.random.default_rng(3))
    sigma = 0.5
    direct = np.prod(np.exp(-((raw - mean) ** 2) / (2 * sigma**2)) / (sigma * math.sqrt(2 * math.pi)))
    assert math.exp(logp) == pytest.approx(direct, rel=1e-9, abs=1e-9)
    assert np.all(np.abs(env) <= 0.1) and ent == pytest.approx(2 * (0.5 + 0.5 * math.log(2 * math.pi) + math.log(0.5)))


@pytest.mark.parametrize("kind", ["categorical", "gaussian"])
def test_head_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    head = PolicyHead.build(kind, 3, 4 if kind == "categorical" else 2, hidden=(5,), rng=rng)
    for p in head.params:
        p[...] = rng.normal(0.0, 0.7, size=p.shape)
    x = rng.standard_normal((6, 3))
    _, raw, _, _ = head.sample_and_logprob(x, rng)
    dlogp, dent = rng.standard_normal(6), rng.standard_normal(6)

    def objective():
        logp, ent, _ = head.evaluate(x, raw)
        return float((dlogp * logp + dent * ent).sum())

    _, _, cache = head.evaluate(x, raw)
    grads = head.backward(cache, raw, dlogp, dent)
    h = 1e-6
    for p, g in zip(head.params, grads):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = objective()
            p[idx] = orig - h
            down = objective()
            p[idx] = orig
            num = (up - down) / (2 * h)
            assert abs(num - g[idx]) <= 1e-5 * max(1.0, abs(num))


def test_head_mode_and_round_trip():
    head = PolicyHead.build("gaussian", 3, 2, rng=np.random.default_rng(0), action_bound=0.1)
    back = PolicyHead.from_dict(head.to_dict())
    x = np.ones(3)
    assert np.array_equal(back.mode(x), head.mode(x))
    with pytest.raises(ValueError):
        PolicyHead.build("beta", 3, 2)
