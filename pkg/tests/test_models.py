import json

import numpy as np
import pytest

from dtcm.errors import EllipticityError, ModelError, NumericalError
from dtcm.models import (
    BUILTIN_DEFAULTS,
    builtin,
    central_stencil,
    coefficient_keys,
    fd_adapter,
    from_spec,
    parse_key,
    underlying_functions,
)


def test_constant_model_derivatives():
    m = builtin("const")
    assert m.deriv("a", 0, (0,), 0.0, 0.3) == 1.0
    for k, beta in [(0, (1,)), (1, (0,)), (0, (2,)), (1, (1,))]:
        assert m.deriv("a", k, beta, 0.0, 0.3) == 0.0


def test_ou_drift_slope():
    assert builtin("ou", {"D": 1, "kappa": 1}).deriv("b", 0, (1,), 0.2, 0.7) == -1.0


def test_sin_diffusion_derivatives():
    m = builtin("sin_diffusion", {"eps": 0.3, "omega": 1})
    assert m.deriv("a", 0, (2,), 0.0, 0.0) == pytest.approx(0.0, abs=1e-15)
    assert m.deriv("a", 0, (1,), 0.0, 0.0) == pytest.approx(0.3)


def test_sin_diffusion_rejects_degenerate_amplitude():
    with pytest.raises(ModelError):
        builtin("sin_diffusion", {"eps": 1.0})


def test_deriv_is_vectorised():
    m = builtin("sin_diffusion")
    x = np.linspace(0, 1, 7)
    np.testing.assert_allclose(m.deriv("a", 0, (0,), 0.0, x), 1 + 0.3 * np.sin(x))


def test_unknown_builtin_and_parameter():
    with pytest.raises(ModelError):
        builtin("heston")
    with pytest.raises(ModelError):
        builtin("ou", {"sigma": 1})


@pytest.mark.parametrize("text,N,key", [("a", 1, ("a", 0, 0)), ("b", 1, ("b", 0)), ("c", 2, ("c",)),
                                        ("a21", 2, ("a", 0, 1)), ("b2", 2, ("b", 1))])
def test_parse_key(text, N, key):
    assert parse_key(text, N) == key


def test_parse_key_range():
    with pytest.raises(ModelError):
        parse_key("b3", 2)


def test_builtins_are_symmetric():
    for mid in BUILTIN_DEFAULTS:
        m = builtin(mid)
        x = np.random.default_rng(1).uniform(-2, 2, (5, m.N))
        A = m.diffusion_matrix(0.3, x)
        np.testing.assert_array_equal(A, np.swapaxes(A, -1, -2))


@pytest.mark.parametrize("mid", sorted(BUILTIN_DEFAULTS))
def test_builtins_respect_ellipticity(mid):
    m = builtin(mid)
    assert m.check_ellipticity(samples=2000, seed=3) >= m.gamma


@pytest.mark.parametrize("mid", sorted(BUILTIN_DEFAULTS))
def test_derivatives_agree_with_differences(mid):
    m = builtin(mid)
    fd = fd_adapter(underlying_functions(m), N=m.N, h=1e-3)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-2, 2, (6, m.N))
    ts = rng.uniform(0.1, 0.9, 6)
    betas = [b for b in np.ndindex(*([4] * m.N)) if sum(b) <= 3]
    for key in coefficient_keys(m.N):
        for k in (0, 1):
            for beta in betas:
                if 2 * k + sum(beta) > 3:
                    continue
                for t, x in zip(ts, pts):
                    exact = m.deriv(key, k, beta, t, x)
                    approx = fd.deriv(key, k, beta, t, x)
                    assert approx == pytest.approx(exact, abs=1e-6), (key, k, beta)


# --------------------------------------------------------------------------- JSON documents


def test_spec_second_derivative():
    m = from_spec('{"N":1,"a":[["1 + 0.5*x^2"]],"b":["0"],"c":"0"}')
    assert m.deriv("a", 0, (2,), 0.0, 0.4) == pytest.approx(1.0)


def test_spec_matches_drift_builtin():
    doc = {"N": 1, "a": [["1"]], "b": ["1"], "c": "0"}
    m, ref = from_spec(doc), builtin("drift")
    for key in coefficient_keys(1):
        for k, beta in [(0, (0,)), (0, (1,)), (1, (0,)), (0, (2,))]:
            assert m.deriv(key, k, beta, 0.5, 0.2) == ref.deriv(key, k, beta, 0.5, 0.2)


def test_spec_builtin_reference():
    m = from_spec({"builtin": "ou", "params": {"kappa": 2}})
    assert m.deriv("b", 0, (1,), 0.0, 0.0) == -2.0


def test_spec_time_ramp():
    m = from_spec({"N": 1, "a": [["1 + t"]], "b": ["0"], "c": "0"})
    assert m.time_dependent
    assert m.deriv("a", 1, (0,), 0.3, 0.0) == pytest.approx(1.0)


def test_spec_rejects_asymmetric_matrix():
    with pytest.raises(ModelError):
        from_spec({"N": 2, "a": [["1", "x1"], ["0", "1"]], "b": ["0", "0"], "c": "0"})


def test_spec_rejects_degenerate_diffusion():
    with pytest.raises(EllipticityError):
        from_spec({"N": 1, "a": [["x"]], "b": ["0"], "c": "0", "box": {"x": [[-1, 1]]}})


def test_spec_checks_declared_gamma():
    with pytest.raises(EllipticityError):
        from_spec({"N": 1, "a": [["1 + 0.5*sin(x)"]], "gamma": 0.9})
    assert from_spec({"N": 1, "a": [["1 + 0.5*sin(x)"]], "gamma": 0.4}).gamma == 0.4


@pytest.mark.parametrize("bad", ["not json", "[1, 2]", json.dumps({"a": [["1"]]}),
                                 json.dumps({"N": 1, "a": [["__import__('os')"]]})])
def test_spec_rejects_malformed_documents(bad):
    with pytest.raises(ModelError):
        from_spec(bad)


# --------------------------------------------------------------------------- finite-difference adapter


def test_stencil_weights_sum_to_zero():
    for order in range(1, 5):
        assert sum(w for _, w in central_stencil(order)) == 0


def test_fd_constant():
    m = fd_adapter(lambda t, x: np.ones_like(x[..., 0]), h=1e-4)
    for k, beta in [(0, (1,)), (1, (0,)), (0, (2,)), (0, (3,))]:
        assert abs(m.deriv("a", k, beta, 0.2, 0.5)) < 1e-8


def test_fd_sine_slope():
    m = fd_adapter(lambda t, x: 2 + np.sin(x[..., 0]), h=1e-4)
    assert m.deriv("a", 0, (1,), 0.0, 0.0) == pytest.approx(1.0, abs=1e-8)


def test_fd_cubic_third_derivative():
    m = fd_adapter(lambda t, x: 1 + x[..., 0] ** 3, h=1e-2)
    assert m.deriv("a", 0, (3,), 0.0, 1.0) == pytest.approx(6.0, abs=1e-3)


def test_fd_non_finite_values():
    m = fd_adapter(lambda t, x: np.where(x[..., 0] > 0, np.inf, 1.0), h=1e-3)
    with pytest.raises(NumericalError):
        m.deriv("a", 0, (1,), 0.0, 0.0)


def test_fd_requires_diagonal():
    with pytest.raises(ModelError):
        fd_adapter({"b1": lambda t, x: 0 * x[..., 0]}, N=1)
