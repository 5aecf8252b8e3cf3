import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from markhaz.data import RawSubject, build_analytical_dataset
from markhaz.kernels import Kernel, effective_event_count, kernel_eval, parse_kernel, scaled_kernel
from markhaz.simulate import SimConfig, generate_dataset

finite = st.floats(min_value=-5, max_value=5, allow_nan=False)


def test_epanechnikov_values():
    assert kernel_eval(Kernel.EPANECHNIKOV, 0.0) == 0.75
    assert kernel_eval(Kernel.EPANECHNIKOV, 1.0) == 0.0
    assert kernel_eval(Kernel.EPANECHNIKOV, 0.5) == pytest.approx(0.5625, abs=1e-15)


def test_scaled_kernel_values():
    assert scaled_kernel("epanechnikov", 0.1, 0.55, 0.5) == pytest.approx(5.625, rel=1e-12)
    assert scaled_kernel("epanechnikov", 0.1, 0.7, 0.5) == 0.0
    assert scaled_kernel("allmass", 0.01, 0.9, 0.1) == 1.0


@pytest.mark.parametrize("kind", [Kernel.EPANECHNIKOV, Kernel.UNIFORM])
def test_normalization(kind):
    val, _ = integrate.quad(lambda x: kernel_eval(kind, x), -1, 1, epsabs=1e-14)
    assert abs(val - 1.0) < 1e-10


@given(finite)
def test_symmetry(x):
    for k in Kernel:
        assert kernel_eval(k, x) == kernel_eval(k, -x)


@given(finite, st.floats(min_value=1e-3, max_value=1.0), finite)
def test_support_and_nonnegativity(u, h, v):
    for k in (Kernel.EPANECHNIKOV, Kernel.UNIFORM):
        val = scaled_kernel(k, h, u, v)
        assert val >= 0.0
        if abs(u - v) >= h:
            assert val == 0.0
    assert scaled_kernel(Kernel.ALL_MASS, h, u, v) == 1.0


def test_parse_kernel_aliases():
    assert parse_kernel("uniform_window") is Kernel.UNIFORM
    assert parse_kernel("all_mass") is Kernel.ALL_MASS
    with pytest.raises(ValueError):
        parse_kernel("gaussian")


def test_bad_bandwidth():
    with pytest.raises(ValueError):
        scaled_kernel("epanechnikov", 0.0, 0.5, 0.5)


def _dataset(marks):
    subs = [RawSubject(str(i), [1.0], [1], [m], (0.0,)) for i, m in enumerate(marks)]
    return build_analytical_dataset(subs)


def test_effective_count_trivial_cases():
    ds = _dataset([0.4] * 7)
    assert effective_event_count(ds, 0.4, 1e-6) == 7
    ds = _dataset([0.0, 0.3, 1.0])
    assert effective_event_count(ds, 0.2, 1.5) == 3


def test_effective_count_brute_force_uniform_marks():
    # Near-uniform marks: the lin2 parameters.
    subs, _, _ = generate_dataset(SimConfig(n=1000, beta2=-1.5, seed=2))
    ds = build_analytical_dataset(subs)
    brute = sum(1 for s in subs for st_, m in zip(s.statuses, s.marks) if st_ == 1 and abs(m - 0.5) < 0.1)
    got = effective_event_count(ds, 0.5, 0.1)
    assert got == brute
    assert 0.12 < got / ds.n_events < 0.28
