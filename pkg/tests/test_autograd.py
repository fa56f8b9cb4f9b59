import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splat2d import _backend
from splat2d.autograd import (
    OptimState,
    backward,
    fit_field,
    loss_l1,
    loss_l1_grad,
    read_trace_csv,
    step,
    write_trace_csv,
)
from splat2d.errors import InvalidParameterError, NumericalError, ShapeError
from splat2d.experiments import bundled, synthesize_lr
from splat2d.gauss import GaussianField, field_from_grid
from splat2d.imageio import load_image
from splat2d.render import RenderConfig, rasterize

from helpers import fd_check, random_field

PARAMS = GaussianField.PARAM_NAMES


def linear_loss(field, cfg, upstream, support="dense"):
    return float(np.sum(rasterize(field, cfg, support) * upstream))


def fd_all_params(field, cfg, upstream, support="dense", **kw):
    """Worst FD violation over every raw parameter of ``field`` for a linear loss."""
    grads = backward(field, cfg, upstream, support).as_dict()
    worst = 0.0
    for name in PARAMS:
        def f(x, name=name):
            return linear_loss(field.with_params(**{name: x}), cfg, upstream, support)
        worst = max(worst, fd_check(f, getattr(field, name), grads[name], **kw))
    return worst


# ------------------------------------------------------------------- loss_l1


def test_loss_l1_trivial():
    a = np.ones((2, 3, 3))
    assert loss_l1(a, a) == 0.0
    assert loss_l1(a, a + 0.25) == pytest.approx(0.25, rel=1e-15)
    with pytest.raises(ShapeError):
        loss_l1(a, np.ones((2, 3, 4)))


def test_loss_l1_golden():
    a = np.array([[[0.1, 0.5, 0.9], [0.3, 0.2, 0.8], [0.7, 0.4, 0.6]],
                  [[0.05, 0.95, 0.15], [0.85, 0.25, 0.75], [0.35, 0.65, 0.45]]])
    b = np.array([[[0.2, 0.4, 0.1], [0.3, 0.9, 0.5], [0.6, 0.0, 1.0]],
                  [[0.5, 0.5, 0.5], [0.1, 0.2, 0.3], [0.4, 0.6, 0.8]]])
    # hand sum of |a - b| is 5.85 over 18 entries
    assert loss_l1(a, b) == pytest.approx(0.325, rel=1e-14)
    g = loss_l1_grad(a, b)
    assert g[0, 1, 0] == 0.0  # zero residual gives a zero subgradient
    assert g[0, 0, 0] == pytest.approx(-1 / 18) and g[0, 0, 1] == pytest.approx(1 / 18)


# ------------------------------------------------------------------ backward


def test_zero_upstream_gives_zero_gradients(rng):
    field = random_field(rng, 4)
    cfg = RenderConfig(8, 8)
    grads = backward(field, cfg, np.zeros((2, 8, 8)))
    for g in grads.as_dict().values():
        assert np.all(g == 0.0)


def test_centered_gaussian_has_zero_mean_gradient():
    # one Gaussian at the centre of a pixel, symmetric upstream: dL/dmu = 0 by symmetry
    field = GaussianField([[0.5, 0.5]], [0.3], [0.3], [0.0], [0.0], [[1.0]], unit=(0.2, 0.2))
    cfg = RenderConfig(9, 9, normalization="unnormalized")
    g = backward(field, cfg, np.ones((1, 9, 9)), "dense")
    np.testing.assert_allclose(g.mu, 0.0, atol=1e-12)
    assert g.v[0, 0] > 0 and g.xi_raw[0] > 0


@pytest.mark.parametrize("norm", ["paper-literal", "standard", "unnormalized"])
def test_gradients_match_finite_differences(rng, norm):
    field = random_field(rng, 5, k=2, scale_range=(-2.0, 1.0))
    cfg = RenderConfig(8, 8, normalization=norm)
    upstream = rng.standard_normal((2, 8, 8))
    assert fd_all_params(field, cfg, upstream) <= 1.0


def test_l1_gradient_matches_finite_differences(rng):
    # target offset >= 0.1 from the render keeps every residual away from the kink
    field = random_field(rng, 5, k=1, scale_range=(-2.0, 1.0))
    cfg = RenderConfig(8, 8, normalization="unnormalized")
    base = rasterize(field, cfg, "dense")
    target = base + np.where(rng.random(base.shape) < 0.5, -1, 1) * rng.uniform(0.1, 0.3, base.shape)
    grads = backward(field, cfg, loss_l1_grad(base, target), "dense").as_dict()
    for name in PARAMS:
        def f(x, name=name):
            return loss_l1(rasterize(field.with_params(**{name: x}), cfg, "dense"), target)
        assert fd_check(f, getattr(field, name), grads[name], h=1e-6) <= 1.0, name


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["paper-literal", "standard", "unnormalized"]))
def test_gradients_property(seed, norm):
    rng = np.random.default_rng(seed)
    field = random_field(rng, 2, k=1, scale_range=(-2.0, 1.0))
    cfg = RenderConfig(5, 6, normalization=norm)
    assert fd_all_params(field, cfg, rng.standard_normal((1, 6, 5))) <= 1.0


def test_clamp_masks_gradient():
    field = field_from_grid(np.array([[[2.0, 0.5], [0.5, -1.0]]]))
    plain = RenderConfig(2, 2, normalization="unnormalized")
    clamped = RenderConfig(2, 2, normalization="unnormalized", clamp_output=True)
    raw = rasterize(field, plain, "dense")
    mask = (raw >= 0) & (raw <= 1)
    assert not mask.all() and mask.any()
    up = np.ones((1, 2, 2))
    g_clamped = backward(field, clamped, up, "dense")
    g_masked = backward(field, plain, up * mask, "dense")
    for a, b in zip(g_clamped.as_dict().values(), g_masked.as_dict().values()):
        np.testing.assert_array_equal(a, b)


def test_translation_equivariance(rng):
    field = random_field(rng, 4, margin=0.3)
    up = rng.standard_normal((2, 8, 8))
    off = np.array([0.125, -0.25])
    cfg = RenderConfig(8, 8, support_radius_sigmas=50)
    moved_cfg = RenderConfig(8, 8, support_radius_sigmas=50, canvas=(off[0], off[1], 1 + off[0], 1 + off[1]))
    a = backward(field, cfg, up).as_dict()
    b = backward(field.translated(off), moved_cfg, up).as_dict()
    for name in PARAMS:
        np.testing.assert_allclose(b[name], a[name], rtol=1e-10, atol=1e-12)


def test_tiled_with_wide_support_equals_dense(rng):
    field = random_field(rng, 6)
    up = rng.standard_normal((2, 12, 10))
    cfg = RenderConfig(10, 12, support_radius_sigmas=50)
    a = backward(field, cfg, up, "dense").as_dict()
    b = backward(field, cfg, up, "tiled").as_dict()
    for name in PARAMS:
        np.testing.assert_allclose(b[name], a[name], rtol=1e-12, atol=1e-14)


def test_gradients_are_thread_and_backend_invariant(rng):
    field = random_field(rng, 40)
    up = rng.standard_normal((2, 24, 24))
    results = []
    for name in _backend.available():
        with _backend.use_backend(name):
            for threads in (1, 4):
                results.append(backward(field, RenderConfig(24, 24, threads=threads), up).as_dict())
    for r in results[1:]:
        for name in PARAMS:
            np.testing.assert_allclose(r[name], results[0][name], rtol=1e-12, atol=1e-13)
    # same backend, different thread counts: bitwise identical
    for name in PARAMS:
        np.testing.assert_array_equal(results[1][name], results[0][name])


def test_backward_shape_error(rng):
    with pytest.raises(ShapeError):
        backward(random_field(rng, 2), RenderConfig(4, 4), np.zeros((2, 4, 5)))


# ---------------------------------------------------------------------- step


def test_step_zero_gradient_and_frozen():
    params = {"a": np.array([1.0, -2.0]), "b": np.array([3.0])}
    new, state = step(params, {"a": np.zeros(2)}, OptimState(lr=0.1))
    np.testing.assert_array_equal(new["a"], params["a"])
    assert new["b"] is params["b"] and state.step == 1


def test_step_first_update_is_lr_times_sign():
    params = {"a": np.array([0.0, 0.0, 0.0])}
    new, _ = step(params, {"a": np.array([3.0, -1e-3, 50.0])}, OptimState(lr=0.01))
    np.testing.assert_allclose(new["a"], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_step_golden_three_updates():
    # independent scalar Adam on f(x) = (x - 3)^2, x0 = 0, lr = 0.1
    expected = [0.09999999983333344, 0.19989729258521116, 0.2996184765492529]
    params, state = {"x": np.array([0.0])}, OptimState(lr=0.1)
    for want in expected:
        params, state = step(params, {"x": 2 * (params["x"] - 3)}, state)
        assert params["x"][0] == pytest.approx(want, rel=1e-14)


def test_step_lr_scale():
    params = {"a": np.zeros(1), "b": np.zeros(1)}
    new, _ = step(params, {"a": np.ones(1), "b": np.ones(1)}, OptimState(lr=0.01), lr_scale={"b": 10.0})
    assert new["b"][0] == pytest.approx(10 * new["a"][0], rel=1e-12)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_step_rejects_non_finite_gradient(bad):
    with pytest.raises(NumericalError):
        step({"a": np.zeros(2)}, {"a": np.array([0.0, bad])}, OptimState())


@pytest.mark.parametrize("lr", [0.0, -1.0, math.nan, math.inf])
def test_step_rejects_bad_rate(lr):
    with pytest.raises(InvalidParameterError):
        step({"a": np.zeros(1)}, {"a": np.ones(1)}, OptimState(lr=lr))


def test_step_overflow_is_numerical_error():
    with pytest.raises(NumericalError):
        step({"a": np.array([1e308])}, {"a": np.array([-1.0])}, OptimState(lr=1e308))


def test_step_shape_error():
    with pytest.raises(ShapeError):
        step({"a": np.zeros(2)}, {"a": np.zeros(3)}, OptimState())


def test_halving_schedule():
    s = OptimState(lr=0.8, halve_every=10)
    rates = []
    for t in (0, 9, 10, 25, 30):
        s.step = t
        rates.append(s.current_lr())
    assert rates == [0.8, 0.8, 0.4, 0.2, 0.1]
    assert OptimState(lr=0.3).current_lr() == 0.3


# ----------------------------------------------------------------- fit_field


@pytest.fixture(scope="module")
def camera16():
    return synthesize_lr(load_image(bundled("camera.pgm")).data, 2)


def test_fit_perfect_init_has_zero_loss():
    init = field_from_grid(np.random.default_rng(0).random((1, 6, 6)))
    cfg = RenderConfig(6, 6, normalization="unnormalized")
    target = rasterize(init, cfg)
    _, trace = fit_field(target, init, cfg, 1, 1e-3)
    assert trace[0].loss == 0.0 and trace[1].loss == 0.0


def test_fit_regression_16x16(camera16):
    assert camera16.shape == (1, 16, 16)
    init = field_from_grid(np.full((1, 16, 16), 0.5))
    fitted, trace = fit_field(camera16, init, RenderConfig(16, 16, normalization="unnormalized"), 500, 1e-2)
    assert len(trace) == 501 and [r.step for r in trace] == list(range(501))
    assert trace[-1].loss < 0.1 * trace[0].loss
    assert trace[-1].loss == pytest.approx(loss_l1(rasterize(fitted, RenderConfig(16, 16, normalization="unnormalized")), camera16))


def test_fit_descent_is_smoothly_monotone(camera16):
    init = field_from_grid(np.full((1, 16, 16), 0.5))
    _, trace = fit_field(camera16, init, RenderConfig(16, 16, normalization="unnormalized"), 500, 3e-3, halve_every=100)
    loss = np.array([r.loss for r in trace])
    smooth = np.convolve(loss, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth) <= 0)


def test_fit_freeze_keeps_groups_fixed(rng):
    init = random_field(rng, 9, k=1)
    target = rng.random((1, 6, 6))
    frozen = ("mu", "sigma_x_raw", "rho_raw")
    fitted, _ = fit_field(target, init, RenderConfig(6, 6), 5, 1e-2, freeze=frozen)
    for name in PARAMS:
        same = np.array_equal(getattr(fitted, name), getattr(init, name))
        assert same == (name in frozen), name


def test_fit_validation(rng):
    init = random_field(rng, 2, k=1)
    with pytest.raises(InvalidParameterError):
        fit_field(np.zeros((1, 4, 4)), init, RenderConfig(4, 4), 0, 1e-3)
    with pytest.raises(InvalidParameterError):
        fit_field(np.zeros((1, 4, 4)), init, RenderConfig(4, 4), 3, 1e-3, freeze=("colour",))


def test_fit_callback_and_trace_csv(tmp_path, rng):
    init = random_field(rng, 4, k=1)
    seen = []
    _, trace = fit_field(rng.random((4, 4)), init, RenderConfig(4, 4), 3, 1e-2, callback=lambda i, f, l: seen.append((i, l)))
    assert seen == [(r.step, r.loss) for r in trace]
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    assert path.read_text().splitlines()[0] == "step,loss,psnr"
    assert read_trace_csv(path) == trace
