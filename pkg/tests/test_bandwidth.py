import logging

import numpy as np
import pytest

from markhaz.bandwidth import (
    BandwidthReport,
    CandidateGrid,
    _complete,
    evaluate_candidates,
    parse_grid,
    select_per_mark,
    select_uniform,
    slope_fit,
    split_variance,
)
from markhaz.data import RawSubject, build_analytical_dataset
from markhaz.errors import BandwidthError
from markhaz.estimator import fit_at_mark
from markhaz.kernels import effective_event_count
from markhaz.simulate import SimConfig, generate_dataset


def synthetic_report(hs, marks, beta, vhat):
    hs = np.asarray(hs, float)
    beta = np.asarray(beta, float)
    return BandwidthReport(
        hs=hs, marks=np.asarray(marks, float), beta_h=beta, v_hat=np.asarray(vhat, float),
        usable=np.isfinite(beta[..., 0]),
    )


@pytest.fixture(scope="module")
def lin1_ds():
    return build_analytical_dataset(generate_dataset(SimConfig(n=600, seed=17))[0])


def test_parse_grid():
    g = parse_grid("0.05:0.80:0.01")
    assert g.size == 76 and g[0] == 0.05 and g[-1] == 0.8
    np.testing.assert_array_equal(parse_grid("0.1,0.2"), [0.1, 0.2])
    with pytest.raises(ValueError):
        parse_grid("0.1:0.2")


def test_default_grid():
    g = CandidateGrid()
    assert len(g.hs) == 76 and g.hs[0] == 0.05 and g.hs[-1] == 0.8
    with pytest.raises(ValueError):
        CandidateGrid(hs=(0.2, 0.1))
    with pytest.raises(ValueError):
        CandidateGrid(hs=())


def test_split_variance_formula():
    assert split_variance([0.3], [0.3]) == 0.0
    assert split_variance([0.5], [0.3]) == pytest.approx(0.01, abs=1e-15)


def test_slope_fit_exact():
    hs = np.array([0.1, 0.2, 0.3, 0.4])
    flat = synthetic_report(hs, [0.5], np.full((1, 4, 1), 0.7), np.zeros((1, 4)))
    assert slope_fit(flat, 0.5)[0] == pytest.approx(0.0, abs=1e-15)
    quad = synthetic_report(hs, [0.5], (0.2 + 1.7 * hs**2)[None, :, None], np.zeros((1, 4)))
    assert abs(slope_fit(quad, 0.5)[0] - 1.7) < 1e-12
    one = synthetic_report(hs, [0.5], np.array([[[0.1], [np.nan], [np.nan], [np.nan]]]), np.zeros((1, 4)))
    with pytest.raises(BandwidthError):
        slope_fit(one, 0.5)


def test_mse_plug_in_and_smallest_h():
    hs = np.array([0.1, 0.2, 0.3])
    rep = synthetic_report(hs, [0.5], (0.0 + hs**2)[None, :, None], np.full((1, 3), 0.0004))
    _complete(rep)
    assert rep.mse[0, 0] == pytest.approx(5e-4, rel=1e-12)
    assert rep.chosen_h == 0.1
    np.testing.assert_allclose(rep.mse, rep.c_hat[:, :1] ** 2 * hs**4 + rep.v_hat, rtol=0, atol=0)


def test_ties_go_to_smallest_h():
    hs = np.array([0.1, 0.2, 0.3])
    rep = synthetic_report(hs, [0.5], np.full((1, 3, 1), 0.1), np.array([[0.2, 0.1, 0.1]]))
    assert _complete(rep).chosen_h == 0.2


def test_unusable_mark_is_ignored():
    hs = np.array([0.1, 0.2, 0.3])
    beta = np.full((2, 3, 1), 0.1)
    beta[1] = np.nan
    vh = np.array([[0.3, 0.1, 0.2], [np.nan] * 3])
    a = _complete(synthetic_report(hs, [0.5, 0.9], beta, vh)).chosen_h
    vh[1] = [0.0, 5.0, 9.0]  # entries of an unusable mark
    b = _complete(synthetic_report(hs, [0.5, 0.9], beta, vh)).chosen_h
    assert a == b == 0.2


def test_no_usable_pairs():
    rep = synthetic_report([0.1, 0.2], [0.5], np.full((1, 2, 1), np.nan), np.full((1, 2), np.nan))
    with pytest.raises(BandwidthError):
        _complete(rep)


def test_singleton_grid(lin1_ds):
    rep = select_uniform(lin1_ds, CandidateGrid(hs=(0.2,), marks=(0.3, 0.5)))
    assert rep.chosen_h == 0.2


def test_select_uniform_report(lin1_ds):
    grid = CandidateGrid(hs=tuple(np.round(np.arange(0.05, 0.41, 0.05), 3)), marks=(0.1, 0.3, 0.5, 0.7), split_seed=3)
    rep = select_uniform(lin1_ds, grid)
    assert rep.chosen_h in rep.hs
    assert rep.imse[rep.hs == rep.chosen_h][0] == np.nanmin(rep.imse)
    assert np.all(rep.v_hat[rep.usable] >= 0)
    ok = rep.usable
    it = np.broadcast_to(rep.hs, ok.shape)
    lhs = rep.mse[ok]
    rhs = (np.sum(rep.c_hat**2, axis=1)[:, None] * rep.hs**4 + rep.v_hat)[ok]
    np.testing.assert_array_equal(lhs, rhs)
    # v = 0.1 only admits h <= 0.1 under the interior guard.
    assert not rep.usable[0, it[0] > 0.1 + 1e-12].any()
    again = select_uniform(lin1_ds, grid)
    assert again.to_dict() == rep.to_dict()


def test_full_data_estimates_match_direct_fits(lin1_ds):
    grid = CandidateGrid(hs=(0.2, 0.3), marks=(0.5,))
    rep = evaluate_candidates(lin1_ds, grid)
    for b, h in enumerate(grid.hs):
        np.testing.assert_array_equal(rep.beta_h[0, b], fit_at_mark(lin1_ds, 0.5, h).beta_hat)


def test_half_sample_variance_shrinks_with_h():
    small, large = [], []
    for seed in range(8):
        ds = build_analytical_dataset(generate_dataset(SimConfig(n=600, seed=100 + seed, tau_c=4.4))[0])
        rep = evaluate_candidates(ds, CandidateGrid(hs=(0.08, 0.4), marks=(0.5,), split_seed=seed))
        small.append(rep.v_hat[0, 0])
        large.append(rep.v_hat[0, 1])
    assert np.mean(large) < np.mean(small)


def test_slope_sign_linear_setting():
    # beta'(v) > 0 and the mark density increases at v = 0.5, so the
    # O(h^2) bias, and hence the fitted slope, is positive on average.
    hs = np.round(np.arange(0.05, 0.46, 0.05), 3)
    slopes = []
    for seed in range(12):
        ds = build_analytical_dataset(generate_dataset(SimConfig(n=4000, seed=seed, tau_c=4.4))[0])
        b = [fit_at_mark(ds, 0.5, h).beta_hat[0] for h in hs]
        slopes.append(np.polyfit(hs**2, b, 1)[0])
    assert np.mean(slopes) > 0


def _point_mass(k, v):
    return build_analytical_dataset([RawSubject(str(i), [1.0 + i], [1], [v], (float(i % 2),)) for i in range(k)])


def test_per_mark_trivial():
    ds = _point_mass(10, 0.4)
    assert select_per_mark(ds, 0.4, [0.05, 0.1, 0.2], 10) == 0.05


def test_per_mark_saturation_warns(caplog):
    ds = _point_mass(10, 0.4)
    with caplog.at_level(logging.WARNING, logger="markhaz.bandwidth"):
        assert select_per_mark(ds, 0.4, [0.05, 0.1, 0.2], 11) == 0.2
    assert "target 11" in caplog.text
    assert select_per_mark(ds, 0.4, [0.05, 0.1, 0.2], 11, max_h=0.1) == 0.1
    with pytest.raises(BandwidthError):
        select_per_mark(ds, 0.4, [0.05, 0.1], 5, max_h=0.01)


def test_per_mark_follows_count_profile(lin1_ds):
    hs = parse_grid("0.05:0.80:0.01")
    chosen = [select_per_mark(lin1_ds, v, hs, 300) for v in (0.3, 0.5, 0.7)]
    for v, h in zip((0.3, 0.5, 0.7), chosen):
        assert effective_event_count(lin1_ds, v, h) >= 300
        smaller = hs[hs < h - 1e-12]
        if smaller.size:
            assert effective_event_count(lin1_ds, v, smaller[-1]) < 300
    # Marks pile up near 1 in this setting, so windows narrow as v grows.
    assert chosen[0] > chosen[1] > chosen[2]
