import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, conv2d_loops, cross_entropy_rows, rel_err
from seabench import attack
from seabench.attack import AttackConfig, AttackState, run_attack
from seabench.errors import ConfigError, ContractError
from seabench.selection import SelectionConfig


def fused_objective(models, x, y, mode, targeted=False):
    """Fused objective from plain forward passes only."""
    logits = [m.logits(x) for m in models]
    if mode == "logit":
        val = cross_entropy_rows(sum(logits) / len(logits), y).mean()
    else:
        val = np.mean([cross_entropy_rows(l, y).mean() for l in logits])
    return -val if targeted else val


# -- fusion -------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["logit", "loss"])
@pytest.mark.parametrize("targeted", [False, True])
def test_fused_gradient_matches_finite_differences(tiny_models, tiny_batch, mode, targeted):
    x, y = tiny_batch[0][:2], tiny_batch[1][:2]
    models = tiny_models[:3]
    loss, grad = attack.fuse(models, x, y, mode, targeted)
    assert loss == pytest.approx(fused_objective(models, x, y, mode, targeted), rel=1e-12)
    fd = central_diff(lambda z: fused_objective(models, z, y, mode, targeted), x)
    assert rel_err(grad, fd) < 1e-6


def test_single_model_fusion_modes_agree(tiny_models, tiny_batch):
    x, y = tiny_batch
    a = attack.fuse(tiny_models[:1], x, y, "logit")
    b = attack.fuse(tiny_models[:1], x, y, "loss-avg")
    assert a[0] == pytest.approx(b[0], rel=1e-14)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-13, atol=1e-18)


def test_identical_copies_match_one_model(tiny_models, tiny_batch):
    x, y = tiny_batch
    one = attack.fuse(tiny_models[:1], x, y)[1]
    three = attack.fuse(tiny_models[:1] * 3, x, y)[1]
    np.testing.assert_allclose(three, one, rtol=1e-12, atol=1e-18)


def test_targeted_negates_objective(tiny_models, tiny_batch):
    x, y = tiny_batch
    a = attack.fuse(tiny_models[:2], x, y, targeted=False)
    b = attack.fuse(tiny_models[:2], x, y, targeted=True)
    assert a[0] == -b[0]
    np.testing.assert_array_equal(a[1], -b[1])


def test_target_labels_rule():
    assert attack.target_labels(np.array([0, 3, 7]), 8).tolist() == [1, 4, 0]


def test_per_model_gradients(tiny_models, tiny_batch):
    x, y = tiny_batch
    _, _, own = attack.fuse(tiny_models[:2], x, y, per_model=True)
    for model, g in zip(tiny_models[:2], own):
        np.testing.assert_allclose(g, attack.fuse([model], x, y)[1], rtol=1e-12, atol=1e-18)


def test_fuse_counts_and_rejects_empty(tiny_models, tiny_batch):
    counters = attack.Counters()
    attack.fuse(tiny_models[:2], *tiny_batch, counters=counters)
    assert counters.total_forward() == counters.total_backward() == 2
    with pytest.raises(ContractError):
        attack.fuse([], *tiny_batch)


# -- MI / NI update ------------------------------------------------------------


def _state(x):
    x = np.asarray(x, dtype=np.float64).reshape(1, 1, 1, -1)
    return AttackState(x, x.copy(), np.zeros_like(x))


def test_momentum_update_example():
    state = _state([0.5, 0.5])
    attack.step_MI(state, np.array([3.0, -1.0]).reshape(1, 1, 1, 2), mu=1.0, alpha=0.1, epsilon=0.3)
    np.testing.assert_allclose(state.g.ravel(), [0.75, -0.25], rtol=1e-15)
    np.testing.assert_allclose(state.x_adv.ravel(), [0.6, 0.4], rtol=1e-15)


def test_projection_and_clamp_examples():
    x = np.array([0.5]).reshape(1, 1, 1, 1)
    assert attack.project(np.full_like(x, 0.9), x, 0.3).item() == pytest.approx(0.8)
    x = np.array([0.9]).reshape(1, 1, 1, 1)
    assert attack.project(np.full_like(x, 1.2), x, 0.5).item() == 1.0


def test_zero_gradient_keeps_decayed_momentum():
    state = _state([0.2, 0.2])
    state.g = np.array([0.5, -0.5]).reshape(state.x.shape)
    attack.step_MI(state, np.zeros_like(state.x), mu=0.5, alpha=0.01, epsilon=0.1)
    np.testing.assert_array_equal(state.g.ravel(), [0.25, -0.25])


def test_l1_normalise_is_per_sample():
    g = np.array([[1.0, -3.0], [0.0, 0.0], [2.0, 2.0]]).reshape(3, 1, 1, 2)
    out = attack.l1_normalise(g).reshape(3, 2)
    np.testing.assert_allclose(out, [[0.25, -0.75], [0.0, 0.0], [0.5, 0.5]])


def _one(strategy, s, m, seed=0):
    return SelectionConfig(strategy, s, m, seed=seed)


def test_ni_with_zero_momentum_equals_mi(tiny_models, tiny_batch):
    x, y = tiny_batch
    sel = _one("identical", 5, 3)
    a = run_attack(tiny_models, x, y, AttackConfig(baseline="MI", mu=0.0), sel).adv
    b = run_attack(tiny_models, x, y, AttackConfig(baseline="NI", mu=0.0), sel).adv
    assert a.tobytes() == b.tobytes()


def test_ni_first_step_equals_mi(tiny_models, tiny_batch):
    x, y = tiny_batch
    sel = _one("identical", 5, 3)
    a = run_attack(tiny_models, x, y, AttackConfig(baseline="MI", iterations=1), sel).adv
    b = run_attack(tiny_models, x, y, AttackConfig(baseline="NI", iterations=1), sel).adv
    assert a.tobytes() == b.tobytes()


def test_ni_lookahead_can_leave_ball(tiny_models, tiny_batch):
    x, y = tiny_batch
    cfg = AttackConfig(baseline="NI", epsilon=8 / 255, iterations=10, alpha=4 / 255)
    res = run_attack(tiny_models, x, y, cfg, _one("identical", 5, 2))
    assert max(res.trace.lookahead_linf) > cfg.epsilon
    assert max(res.trace.linf) <= cfg.epsilon + 1e-12


def test_step_ni_uses_lookahead(tiny_models, tiny_batch):
    x, y = tiny_batch
    state = AttackState(x, x.copy(), np.ones_like(x) * 1e-3)
    expected_point = x + 0.01 * 1.0 * state.g
    grad = attack.fuse(tiny_models[:2], expected_point, y)[1]
    g_expected = state.g + attack.l1_normalise(grad)
    attack.step_NI(state, tiny_models[:2], y, 1.0, 0.01, 0.1)
    np.testing.assert_array_equal(state.g, g_expected)


# -- DI ---------------------------------------------------------------------------


def _nearest(img, oh, ow):
    ih, iw = img.shape
    return img[np.ix_((np.arange(oh) * ih) // oh, (np.arange(ow) * iw) // ow)]


def di_reference(img, params):
    """Resize, pad onto the enlarged canvas, resize back, with explicit image ops."""
    h, w = img.shape
    rh, rw, top, left = params
    canvas = np.zeros((math.ceil(1.15 * h), math.ceil(1.15 * w)))
    canvas[top : top + rh, left : left + rw] = _nearest(img, rh, rw)
    return _nearest(canvas, h, w)


@pytest.mark.parametrize("size", [8, 16, 20])
def test_di_matches_image_ops(size):
    rng = np.random.default_rng(size)
    img = rng.random((size, size))
    draw_rng = np.random.default_rng(0)
    for _ in range(30):
        params = attack.di_params((size, size), 1.0, draw_rng)
        rh, rw, top, left = params
        canvas = math.ceil(1.15 * size)
        assert size <= rh <= canvas and size <= rw <= canvas
        assert 0 <= top <= canvas - rh and 0 <= left <= canvas - rw
        mat = attack.di_gather((size, size), params)
        out = attack.apply_gather(img[None, None], mat)[0, 0]
        np.testing.assert_array_equal(out, di_reference(img, params))


def test_di_identity_and_determinism():
    x = np.random.default_rng(0).random((3, 2, 16, 16))
    assert attack.transform_DI(x, 0.0, np.random.default_rng(1)) is x
    a = attack.transform_DI(x, 1.0, np.random.default_rng(5))
    b = attack.transform_DI(x, 1.0, np.random.default_rng(5))
    assert a.shape == x.shape and a.tobytes() == b.tobytes()
    with pytest.raises(ConfigError):
        attack.transform_DI(x, 1.5, np.random.default_rng(0))


def test_di_probability_is_respected():
    rng = np.random.default_rng(0)
    hits = sum(attack.di_params((16, 16), 0.5, rng) is not None for _ in range(4000))
    assert abs(hits / 4000 - 0.5) < 0.03


def test_di_backward_is_adjoint():
    rng = np.random.default_rng(2)
    mat = attack.di_matrix((1, 1, 12, 12), 1.0, rng)
    x = rng.normal(size=(2, 3, 12, 12))
    g = rng.normal(size=(2, 3, 12, 12))
    lhs = np.sum(attack.apply_gather(x, mat) * g)
    rhs = np.sum(x * attack.gather_backward(g, mat))
    assert lhs == pytest.approx(rhs, rel=1e-12)


# -- TI ---------------------------------------------------------------------------


def test_triangle_kernel_normalised_and_symmetric():
    k = attack.triangle_kernel(7)
    assert k.shape == (7, 7)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(k, k.T)
    np.testing.assert_array_equal(k, k[::-1, ::-1])
    assert k.argmax() == 24
    with pytest.raises(ConfigError):
        attack.triangle_kernel(4)


def test_ti_kernel_one_is_identity():
    g = np.random.default_rng(0).normal(size=(2, 1, 8, 8))
    np.testing.assert_array_equal(attack.smooth_TI(g, 1), g)


def test_ti_preserves_constant_interior():
    g = np.full((1, 1, 16, 16), 2.5)
    out = attack.smooth_TI(g, 7)
    np.testing.assert_allclose(out[0, 0, 3:-3, 3:-3], 2.5, rtol=1e-14)
    assert out[0, 0, 0, 0] < 2.5


def test_ti_matches_loop_convolution():
    rng = np.random.default_rng(4)
    g = rng.normal(size=(2, 3, 10, 10))
    out = attack.smooth_TI(g, 5)
    kern = attack.triangle_kernel(5)
    for n in range(2):
        for c in range(3):
            ref = conv2d_loops(g[n : n + 1, c : c + 1], kern[None, None], 2)
            np.testing.assert_allclose(out[n, c], ref[0, 0], rtol=1e-12, atol=1e-14)


def test_ti_spike_spreads_as_kernel():
    g = np.zeros((1, 1, 11, 11))
    g[0, 0, 5, 5] = 1.0
    np.testing.assert_allclose(attack.smooth_TI(g, 7)[0, 0, 2:9, 2:9], attack.triangle_kernel(7), atol=1e-16)


def test_ti_kernel_larger_than_input():
    with pytest.raises(ConfigError):
        attack.smooth_TI(np.zeros((1, 1, 5, 5)), 7)


# -- SI ---------------------------------------------------------------------------


def test_si_single_copy_is_plain(tiny_models, tiny_batch):
    x, y = tiny_batch
    np.testing.assert_array_equal(attack.grads_SI(tiny_models[:2], x, y, 1), attack.fuse(tiny_models[:2], x, y)[1])


def test_si_matches_finite_differences(tiny_models, tiny_batch):
    x, y = tiny_batch[0][:1], tiny_batch[1][:1]
    models = tiny_models[:2]

    def objective(z):
        return np.mean([fused_objective(models, z * 0.5**i, y, "logit") for i in range(3)])

    assert rel_err(attack.grads_SI(models, x, y, 3), central_diff(objective, x)) < 1e-6


def test_si_counts_copies(tiny_models, tiny_batch):
    counters = attack.Counters()
    attack.grads_SI(tiny_models[:2], *tiny_batch, 4, counters=counters)
    assert counters.total_forward() == counters.total_backward() == 8


# -- configuration -----------------------------------------------------------------


def test_config_defaults():
    cfg = AttackConfig()
    assert cfg.step == pytest.approx(16 / 255 / 10)
    assert (cfg.di_prob, cfg.ti_kernel, cfg.si_copies) == (None, None, None)
    cfg = AttackConfig(baseline="DI-TI-SI")
    assert (cfg.di_prob, cfg.ti_kernel, cfg.si_copies) == (0.5, 7, 5)
    assert cfg.copies == 5


@pytest.mark.parametrize("kwargs", [
    dict(epsilon=0.0),
    dict(epsilon=1.5),
    dict(iterations=0),
    dict(alpha=-1.0),
    dict(mu=-0.1),
    dict(fusion="max"),
    dict(baseline="XI"),
    dict(baseline="MI", ti_kernel=7),
    dict(baseline="TI", ti_kernel=6),
    dict(baseline="DI", di_prob=1.2),
    dict(baseline="SI", si_copies=0),
])
def test_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        AttackConfig(**kwargs)


def test_selection_size_must_match_pool(tiny_models, tiny_batch):
    with pytest.raises(ContractError):
        run_attack(tiny_models[:3], *tiny_batch, AttackConfig(), _one("identical", 5, 2))


# -- full loop ---------------------------------------------------------------------


def test_tiny_epsilon_stays_close(tiny_models, tiny_batch):
    x, y = tiny_batch
    res = run_attack(tiny_models, x, y, AttackConfig(epsilon=1e-6, iterations=3), _one("sea", 5, 2))
    assert np.abs(res.adv - x).max() <= 1e-6 + 1e-12


def test_single_iteration_is_one_signed_step(tiny_models, tiny_batch):
    x, y = tiny_batch
    cfg = AttackConfig(iterations=1)
    res = run_attack(tiny_models, x, y, cfg, _one("identical", 5, 3))
    grad = attack.fuse(tiny_models[:3], x, y)[1]
    np.testing.assert_array_equal(res.adv, np.clip(x + cfg.epsilon * np.sign(grad), 0, 1))


def test_none_baseline_is_plain_sign_step(tiny_models, tiny_batch):
    x, y = tiny_batch
    cfg = AttackConfig(baseline="none", iterations=2, alpha=0.01)
    res = run_attack(tiny_models, x, y, cfg, _one("identical", 5, 1))
    step1 = attack.project(x + 0.01 * np.sign(attack.fuse(tiny_models[:1], x, y)[1]), x, cfg.epsilon)
    step2 = attack.project(step1 + 0.01 * np.sign(attack.fuse(tiny_models[:1], step1, y)[1]), x, cfg.epsilon)
    np.testing.assert_array_equal(res.adv, step2)


@pytest.mark.parametrize("baseline", ["MI", "NI", "DI", "TI", "SI", "DI-TI"])
def test_attack_is_deterministic(tiny_models, tiny_batch, baseline):
    x, y = tiny_batch
    cfg = AttackConfig(baseline=baseline, iterations=3, transform_seed=9)
    sel = _one("sea", 5, 2, seed=4)
    a = run_attack(tiny_models, x, y, cfg, sel)
    b = run_attack(tiny_models, x, y, cfg, sel)
    assert a.adv.tobytes() == b.adv.tobytes()
    assert a.trace.selections == b.trace.selections


@pytest.mark.parametrize("baseline", ["MI", "NI", "DI", "TI", "SI"])
def test_counters_and_parity(tiny_models, tiny_batch, baseline):
    x, y = tiny_batch
    cfg = AttackConfig(baseline=baseline, iterations=4)
    ens = run_attack(tiny_models, x, y, cfg, _one("identical", 5, 2)).trace
    sea = run_attack(tiny_models, x, y, cfg, _one("sea", 5, 2, seed=1)).trace
    expected = 2 * 4 * cfg.copies
    assert ens.total_forward == sea.total_forward == expected
    assert ens.total_backward == sea.total_backward == expected
    assert ens.forward_per_iteration == sea.forward_per_iteration == [2 * cfg.copies] * 4
    assert ens.n_distinct == 2 and sea.n_distinct == 5


def test_sea_full_pool_equals_ens(tiny_models, tiny_batch):
    x, y = tiny_batch
    for baseline in ["MI", "DI-TI"]:
        cfg = AttackConfig(baseline=baseline, iterations=4, transform_seed=3)
        a = run_attack(tiny_models, x, y, cfg, _one("identical", 5, 5)).adv
        b = run_attack(tiny_models, x, y, cfg, _one("sea", 5, 5, seed=7)).adv
        assert a.tobytes() == b.tobytes()


def test_recorded_gradients_shape(tiny_models, tiny_batch):
    x, y = tiny_batch
    cfg = AttackConfig(iterations=3, record_gradients=True)
    tr = run_attack(tiny_models, x, y, cfg, _one("sea", 5, 2)).trace
    assert len(tr.gradients) == 3
    assert tr.gradients[0].shape == (2,) + x.shape


def test_targeted_attack_moves_towards_target(tiny_models, tiny_batch):
    x, y = tiny_batch
    target = attack.target_labels(y, 4)
    cfg = AttackConfig(targeted=True, epsilon=0.3, iterations=10)
    adv = run_attack(tiny_models, x, target, cfg, _one("identical", 5, 1)).adv
    model = tiny_models[0]
    assert np.mean(model.predict(adv) == target) > np.mean(model.predict(x) == target)


@settings(max_examples=25, deadline=None)
@given(
    baseline=st.sampled_from(["none", "MI", "NI", "DI", "TI", "SI", "DI-TI", "NI-DI-TI"]),
    strategy=st.sampled_from(["identical", "random-with-replacement", "random-without-replacement"]),
    m=st.integers(1, 5),
    eps=st.floats(1e-4, 0.5),
    T=st.integers(1, 4),
    seed=st.integers(0, 2**16),
)
def test_constraints_hold_every_iteration(tiny_models, tiny_batch, baseline, strategy, m, eps, T, seed):
    x, y = tiny_batch
    cfg = AttackConfig(baseline=baseline, epsilon=eps, iterations=T, transform_seed=seed,
                       si_copies=2 if "SI" in baseline else None, ti_kernel=3 if "TI" in baseline else None)
    res = run_attack(tiny_models, x, y, cfg, _one(strategy, 5, m, seed), check=False)
    assert all(d <= eps + 1e-12 for d in res.trace.linf)
    assert all(lo >= 0.0 and hi <= 1.0 for lo, hi in res.trace.box)
    assert len(res.trace.selections) == T
