import math

import numpy as np
import pytest

from dtcm.errors import DomainError, ModelError
from dtcm.grid import GridFn
from dtcm.models import builtin
from dtcm.oracle import EXACT_MODELS, ExactKernel, PeriodicCN, cn_solve, exact_kernel, propagate_gaussian


def gaussian_grid(lo, hi, count, mean=0.2, var=0.3):
    g = GridFn.uniform([lo], [hi], [count])
    x = g.axes()[0]
    return g.with_values(np.exp(-0.5 * (x - mean) ** 2 / var) / math.sqrt(2 * math.pi * var))


def test_heat_kernel_on_diagonal():
    assert exact_kernel("const", None, 0.0, 1.0, 0.4, 0.4) == pytest.approx((4 * math.pi) ** -0.5)


def test_drift_is_a_shift():
    v = exact_kernel("drift", {"b": 1}, 0.0, 0.04, 0.0, 0.04)
    assert v == pytest.approx(1.4104739589, abs=1e-9)


def test_kernel_guards():
    with pytest.raises(DomainError, match="t must exceed t0"):
        exact_kernel("ou", None, 0.3, 0.3, 0.0, 0.0)
    with pytest.raises(ModelError):
        exact_kernel("sin_diffusion", None, 0.0, 1.0, 0.0, 0.0)
    with pytest.raises(ModelError):
        ExactKernel(builtin("sin_diffusion"))


def test_kernel_mass_and_growth():
    """Integrates to exp(c tau) in y: 1 without potential, exp(-r tau) for the log-price model."""
    y = np.linspace(-15, 15, 6001)
    w = np.full(y.shape, y[1] - y[0])
    for mid in EXACT_MODELS:
        K = ExactKernel(builtin(mid))
        mass = np.sum(w * K(0.1, 0.6, 0.3, y))
        assert mass == pytest.approx(K.growth(0.1, 0.6), rel=1e-10)


def _residual(K, t0, t, x, y, ht=1e-4):
    """Fourth-order central differences of ``d_t G - L_x G`` at the target time ``t``."""
    model = K.model
    hx = 0.05 * math.sqrt(2 * K.lambda_max(t, [x]) * (t - t0))
    G = lambda tt, xx: K(t0, tt, xx, y)  # noqa: E731
    dt = (-G(t + 2 * ht, x) + 8 * G(t + ht, x) - 8 * G(t - ht, x) + G(t - 2 * ht, x)) / (12 * ht)
    f = [G(t, x + k * hx) for k in (-2, -1, 0, 1, 2)]
    dx = (f[0] - 8 * f[1] + 8 * f[3] - f[4]) / (12 * hx)
    dxx = (-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * hx**2)
    a, b, c = (model.value(k, t, x) for k in ("a", "b", "c"))
    return dt, dt - (a * dxx + b * dx + c * f[2])


@pytest.mark.parametrize("mid", EXACT_MODELS)
def test_kernels_solve_the_equation(mid):
    K = ExactKernel(builtin(mid))
    rng = np.random.default_rng(5)
    for _ in range(20):
        t0 = float(rng.uniform(0, 0.3))
        tau = float(rng.uniform(0.05, 0.5))
        x = float(rng.uniform(-1, 1))
        y = x + float(rng.uniform(-0.7, 0.7)) * math.sqrt(tau)
        dt, res = _residual(K, t0, t0 + tau, x, y)
        assert abs(res) < 1e-4 * abs(dt), (t0, tau, x, y)


@pytest.mark.parametrize("mid", ["const", "drift", "ou", "time_ramp"])
def test_gaussian_propagation_matches_quadrature(mid):
    model = builtin(mid)
    K = ExactKernel(model)
    y = np.linspace(-12, 12, 4801)
    w = np.full(y.shape, y[1] - y[0])
    u0 = np.exp(-0.5 * (y - 0.2) ** 2 / 0.3) / math.sqrt(2 * math.pi * 0.3)
    for x in (-0.5, 0.0, 0.9):
        quad = np.sum(w * K(0.1, 0.5, x, y) * u0)
        assert propagate_gaussian(model, 1.0, [0.2], 0.3, 0.1, 0.5, x) == pytest.approx(quad, abs=1e-12)


@pytest.mark.parametrize("mid", ["const", "drift", "ou"])
def test_crank_nicolson_agrees_with_closed_form(mid):
    model = builtin(mid)
    u0 = gaussian_grid(-10, 10, 641)
    out = cn_solve(model, u0, 0.0, 1.0, 320)
    ref = propagate_gaussian(model, 1.0, [0.2], 0.3, 0.0, 1.0, out.points())
    win = out.window(3)
    assert np.max(np.abs(out.values - ref)[win]) < 2e-4


def test_crank_nicolson_second_order():
    model = builtin("ou", {"kappa": 0.7})
    errs = []
    for k in range(3):
        u0 = gaussian_grid(-10, 10, 160 * 2**k + 1)
        out = cn_solve(model, u0, 0.0, 1.0, 40 * 2**k)
        ref = propagate_gaussian(model, 1.0, [0.2], 0.3, 0.0, 1.0, out.points())
        errs.append(np.max(np.abs(out.values - ref)[out.window(3)]))
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    assert all(3.6 < r < 4.4 for r in ratios), ratios


def test_crank_nicolson_time_dependent_coefficients():
    model = builtin("time_ramp")
    u0 = gaussian_grid(-10, 10, 641)
    out = cn_solve(model, u0, 0.0, 1.0, 320)
    ref = propagate_gaussian(model, 1.0, [0.2], 0.3, 0.0, 1.0, out.points())
    assert np.max(np.abs(out.values - ref)[out.window(3)]) < 2e-4


def test_crank_nicolson_guards():
    u0 = gaussian_grid(-1, 1, 11)
    with pytest.raises(ValueError):
        cn_solve(builtin("const"), u0, 0.0, 1.0, 0)
    with pytest.raises(DomainError):
        cn_solve(builtin("const"), u0, 0.0, 0.0, 4)
    with pytest.raises(ModelError):
        cn_solve(builtin("const", {"N": 2}), u0, 0.0, 1.0, 4)


def test_periodic_crank_nicolson_damps_modes():
    x = np.arange(128) * (2 * math.pi / 128)
    prop = PeriodicCN(builtin("const"), x, 1e-3)
    out = prop.run(np.sin(3 * x), 200)
    h = x[1]
    symbol = -4 * math.sin(3 * h / 2) ** 2 / h**2
    growth = ((1 + 0.5e-3 * symbol) / (1 - 0.5e-3 * symbol)) ** 200
    np.testing.assert_allclose(out, growth * np.sin(3 * x), atol=1e-12)
    assert growth == pytest.approx(math.exp(-9 * 0.2), rel=5e-3)
