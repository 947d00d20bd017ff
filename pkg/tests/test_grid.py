import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtcm.errors import DomainError, NumericalError
from dtcm.grid import GridFn, parse_grid


def test_parse_single_axis():
    assert parse_grid("-2:2:5") == ([-2.0], [2.0], [5])


def test_parse_two_axes_and_single_point():
    assert parse_grid("0:1:3, 0.5:0.5:1") == ([0.0, 0.5], [1.0, 0.5], [3, 1])


@pytest.mark.parametrize("bad", ["0:1", "1:0:5", "0:1:0", "0:1:1", "a:b:c"])
def test_parse_rejects(bad):
    with pytest.raises(ValueError):
        parse_grid(bad)


def test_uniform_geometry():
    g = GridFn.uniform([-1.0, 0.0], [1.0, 2.0], [5, 3])
    assert g.h == (0.5, 1.0)
    assert g.shape == (5, 3)
    assert g.upper == (1.0, 2.0)
    pts = g.points()
    assert pts.shape == (15, 2)
    np.testing.assert_array_equal(pts[:4], [[-1, 0], [-1, 1], [-1, 2], [-0.5, 0]])


def test_window_mask():
    g = GridFn.uniform([0.0], [4.0], [9])
    np.testing.assert_array_equal(g.axes()[0][g.window(1.0)], [1.0, 1.5, 2.0, 2.5, 3.0])
    assert not g.window(2.5).any()


def test_trapezoid_weights_integrate_a_plane():
    g = GridFn.from_function(lambda x: 1 + x[:, 0] + 2 * x[:, 1], [0.0, 0.0], [1.0, 2.0], [7, 5])
    assert np.sum(g.trapezoid_weights() * g.values) == pytest.approx(2 + 1 + 4)


def test_values_are_read_only():
    g = GridFn.uniform([0.0], [1.0], [3])
    with pytest.raises(ValueError):
        g.values[0] = 1.0


def test_construction_guards():
    with pytest.raises(NumericalError):
        GridFn.uniform([0.0], [1.0], [2], [0.0, np.nan])
    with pytest.raises(ValueError):
        GridFn((0.0,), (0.0,), np.zeros(3))
    with pytest.raises(ValueError):
        GridFn((0.0, 0.0), (1.0, 1.0), np.zeros(3))
    with pytest.raises(DomainError):
        GridFn((0.0,), (1.0,), np.zeros(0))


def test_csv_layout():
    g = GridFn.uniform([0.0], [1.0], [2], [0.1, 1 / 3])
    assert g.to_csv() == "x1,value\r\n0,0.10000000000000001\r\n1,0.33333333333333331\r\n"


def test_csv_file_round_trip(tmp_path):
    g = GridFn.from_function(lambda x: np.sin(x[:, 0]) * x[:, 1], [-1.0, 0.0], [1.0, 1.0], [5, 4])
    path = tmp_path / "u.csv"
    g.to_csv(path)
    back = GridFn.from_csv(path)
    np.testing.assert_array_equal(back.values, g.values)
    assert back.origin == g.origin
    np.testing.assert_allclose(back.h, g.h, rtol=1e-15)


def test_csv_accepts_shuffled_rows():
    text = "x1,value\n2,4\n0,0\n1,1\n"
    np.testing.assert_array_equal(GridFn.from_csv(io.StringIO(text)).values, [0, 1, 4])


@pytest.mark.parametrize("text", ["x1,u\n0,1\n", "x1,x2,value\n0,0,1\n0,1,1\n1,0,1\n", "x1,value\n0,1\n1,1\n3,1\n"])
def test_csv_rejects(text):
    with pytest.raises(ValueError):
        GridFn.from_csv(text)


@given(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=2),
    st.lists(st.integers(1, 6), min_size=2, max_size=2),
    st.integers(0, 2**32 - 1),
)
def test_csv_round_trip_is_exact(lo, counts, seed):
    counts = counts[: len(lo)]
    hi = [a + 0.25 * (n - 1) for a, n in zip(lo, counts)]
    vals = np.random.default_rng(seed).normal(size=counts) * 1e3
    g = GridFn.uniform(lo, hi, counts, vals)
    back = GridFn.from_csv(g.to_csv())
    np.testing.assert_array_equal(back.values, g.values)
