import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import Polynomial
from scipy.integrate import quad

from patchdyn.errors import SimulationAbort
from patchdyn.grid import MacroState, build_geometry
from patchdyn.lifting import (BatchLifter, _solve, agents_from_bins, fine_bin_averages, largest_remainder,
                              lift_interior, lift_left_boundary, lift_right_boundary, lift_state, lift_unit)

G = build_geometry(41, 0.1, 10, 10)


def poly_average(poly, lo, hi):
    P = poly.integ()
    return (P(hi) - P(lo)) / (hi - lo)


def quad_average(f, lo, hi):
    return quad(f, lo, hi, epsabs=1e-15, epsrel=1e-14)[0] / (hi - lo)


def interior_averages(f, geom, i, avg=quad_average):
    tl, tr = geom.tooth_bounds
    gl, gr = geom.gap_bounds
    return avg(f, gl[i - 1], gr[i - 1]), avg(f, tl[i], tr[i]), avg(f, gl[i], gr[i])


def test_constant_reproduced():
    rec = lift_interior(0.7, 0.7, 0.7, G)
    assert rec.a0 == pytest.approx(0.7, abs=1e-12)
    assert abs(rec.a1) < 1e-10 and abs(rec.a2) < 1e-8


def test_linear_reproduced():
    i = 20
    c = G.tooth_centers[i]
    left, mid, right = interior_averages(lambda x: x - c, G, i)
    rec = lift_interior(left, mid, right, G, index=i)
    assert rec.a0 == pytest.approx(0.0, abs=1e-12)
    assert rec.a1 == pytest.approx(1.0, abs=1e-12)
    assert rec.a2 == pytest.approx(0.0, abs=1e-9)


def test_quadratic_reproduced_from_quadrature():
    i = 20
    c = G.tooth_centers[i]
    rec = lift_interior(*interior_averages(lambda x: (x - c) ** 2, G, i), G, index=i)
    assert rec.a2 == pytest.approx(2.0, abs=1e-9)
    assert rec.a1 == pytest.approx(0.0, abs=1e-12)
    assert rec.a0 == pytest.approx(0.0, abs=1e-12)


def test_boundary_examples():
    rec = lift_left_boundary(0.0, 0.0, G)
    assert rec.coefficients.tolist() == [0.0, 0.0, 0.0]
    # linear profile vanishing at x = -1
    f = lambda x: 3.0 * (x + 1.0)
    tl, tr = G.tooth_bounds
    gl, gr = G.gap_bounds
    rec = lift_left_boundary(quad_average(f, tl[0], tr[0]), quad_average(f, gl[0], gr[0]), G)
    xs = np.linspace(-1, tr[0] + G.n_b * G.h_fine, 7)
    np.testing.assert_allclose(rec(xs), f(xs), atol=1e-10)
    # quadratic vanishing at -1
    q = lambda x: (x + 1.0) * (2.0 - x)
    rec = lift_left_boundary(quad_average(q, tl[0], tr[0]), quad_average(q, gl[0], gr[0]), G)
    np.testing.assert_allclose(rec(xs), q(xs), atol=1e-10)
    assert rec(-1.0) == pytest.approx(0.0, abs=1e-12)
    # mirror image on the right
    rec = lift_right_boundary(quad_average(lambda x: q(-x), tl[-1], tr[-1]),
                              quad_average(lambda x: q(-x), gl[-1], gr[-1]), G)
    np.testing.assert_allclose(rec(-xs), q(xs), atol=1e-10)


def test_lift_interior_rejects_boundary_index():
    with pytest.raises(ValueError):
        lift_interior(1, 1, 1, G, index=0)


def test_singular_system_aborts():
    rows = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    with pytest.raises(SimulationAbort, match="singular"):
        _solve(rows, [1.0, 1.0, 1.0], 1.0)


def test_fine_bin_examples():
    rec = lift_interior(0.4, 0.4, 0.4, G, index=7)
    np.testing.assert_allclose(fine_bin_averages(rec, G), 0.4, atol=1e-12)
    i = 20
    c = G.tooth_centers[i]
    rec = lift_interior(*interior_averages(lambda x: x - c, G, i), G, index=i)
    bins = fine_bin_averages(rec, G)
    np.testing.assert_allclose(bins, -bins[::-1], atol=1e-12)
    assert abs(bins.sum()) < 1e-12
    # closed form for x^2 (a2 = 2): average over [xl, xr] is (xr^3 - xl^3) / (3h)
    rec = lift_interior(*interior_averages(lambda x: (x - c) ** 2, G, i), G, index=i)
    e = G.unit_bin_edges(i) - c
    k = 3
    closed = (e[k + 1] ** 3 - e[k] ** 3) / (3 * G.h_fine)
    assert fine_bin_averages(rec, G)[k] == pytest.approx(closed, rel=1e-9, abs=1e-14)


def test_fine_bins_carry_tooth_mass():
    rec = lift_unit(G, 12, 0.3, 0.9, 0.5)
    bins = fine_bin_averages(rec, G)
    tooth = bins[G.n_b:G.n_b + G.n_t]
    assert tooth.sum() * G.h_fine == pytest.approx(0.9 * G.tooth_width, rel=1e-12)


def test_restriction_of_lifting_returns_inputs():
    rng = np.random.default_rng(5)
    state = MacroState(rng.uniform(0, 2, G.n_teeth), rng.uniform(0, 2, G.n_gaps))
    recs = lift_state(state, G)
    tl, tr = G.tooth_bounds
    gl, gr = G.gap_bounds
    for i, rec in enumerate(recs):
        assert rec.average(tl[i], tr[i]) == pytest.approx(state.teeth[i], abs=1e-12)
        if i > 0:
            assert rec.average(gl[i - 1], gr[i - 1]) == pytest.approx(state.gaps[i - 1], abs=1e-12)
        if i < G.n_cells:
            assert rec.average(gl[i], gr[i]) == pytest.approx(state.gaps[i], abs=1e-12)
    assert recs[0](-1.0) == pytest.approx(0.0, abs=1e-12)
    assert recs[-1](1.0) == pytest.approx(0.0, abs=1e-12)


def test_batch_lifter_matches_per_unit():
    rng = np.random.default_rng(9)
    state = MacroState(rng.uniform(0, 2, G.n_teeth), rng.uniform(0, 2, G.n_gaps))
    bins = BatchLifter(G).bins(state)
    recs = lift_state(state, G)
    np.testing.assert_allclose(bins[5], fine_bin_averages(recs[5], G), atol=1e-12)
    np.testing.assert_allclose(bins[0, G.n_b:], fine_bin_averages(recs[0], G), atol=1e-12)
    np.testing.assert_allclose(bins[-1, :G.n_t + G.n_b], fine_bin_averages(recs[-1], G), atol=1e-12)
    d_left, d_right = BatchLifter(G).boundary_slopes(state)
    assert d_left == pytest.approx(float(recs[0].derivative(-1.0)), rel=1e-10)
    assert d_right == pytest.approx(float(recs[-1].derivative(1.0)), rel=1e-10)


def test_agents_from_bins_examples():
    rng = np.random.default_rng(0)
    counts, pos, clipped = agents_from_bins([0.2, 0.5, 0.3], None, 10, rng, bin_edges=[0, 1, 2, 3])
    assert counts.tolist() == [2, 5, 3]
    assert clipped == 0.0
    assert np.all((pos >= 0) & (pos < 3))
    counts, _, _ = agents_from_bins(np.full(4, 0.25), None, 400, rng, bin_edges=np.arange(5.0))
    assert counts.tolist() == [100] * 4


def test_agents_from_bins_clips_negative(caplog):
    rng = np.random.default_rng(0)
    with caplog.at_level(logging.DEBUG, logger="patchdyn.lifting"):
        counts, _, clipped = agents_from_bins([0.5, -1e-6, 0.5], None, 1000, rng, bin_edges=[0, 1, 2, 3])
    assert counts[1] == 0
    assert clipped == pytest.approx(1e-6)
    assert "clipped" in caplog.text


def test_agents_from_bins_zero_mass_and_positions_in_bins():
    rng = np.random.default_rng(0)
    counts, pos, _ = agents_from_bins(np.zeros(5), None, 1000, rng, bin_edges=np.arange(6.0))
    assert counts.sum() == 0 and pos.size == 0
    edges = G.unit_bin_edges(3)
    dens = np.linspace(0.1, 1.0, edges.size - 1)
    counts, pos, _ = agents_from_bins(dens, G, 10**5, rng, bin_edges=edges)
    assert counts.sum() == round(10**5 * (dens * np.diff(edges)).sum())
    hist, _ = np.histogram(pos, bins=edges)
    assert hist.tolist() == counts.tolist()
    with pytest.raises(ValueError):
        agents_from_bins(dens, G, 0, rng, bin_edges=edges)


def test_largest_remainder_is_deterministic():
    w = [1.0, 1.0, 1.0]
    assert largest_remainder(w, 2).tolist() == [1, 1, 0]
    assert largest_remainder(w, 0).tolist() == [0, 0, 0]


coeffs = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 39), coeffs, coeffs, coeffs, st.sampled_from([(21, 0.2, 10, 10), (41, 0.1, 10, 10),
                                                                    (11, 0.5, 3, 2), (61, 0.05, 1, 1)]))
def test_quadratic_exactness_interior(i, b0, b1, b2, geo):
    g = build_geometry(*geo)
    i = 1 + i % (g.n_cells - 1)
    c = g.tooth_centers[i]
    poly = Polynomial([b0, b1, b2 / 2]).convert(domain=[-1, 1])
    shifted = lambda x: poly(x - c)
    left, mid, right = interior_averages(shifted, g, i, avg=lambda f, lo, hi: poly_average(poly, lo - c, hi - c))
    rec = lift_unit(g, i, left, mid, right)
    assert rec.a0 == pytest.approx(b0, abs=1e-12 * (1 + abs(b0) + abs(b1) + abs(b2)))
    xs = np.linspace(*rec.valid_interval, 9)
    np.testing.assert_allclose(rec(xs), shifted(xs), atol=1e-11 * (1 + abs(b0) + abs(b1) + abs(b2)))


def test_cubic_slope_error_constant():
    # for v = (x - c)^3 the gap conditions give r1 = (D^2 + h^2) v3 / 12 exactly (v3 = 6)
    for n in (21, 81):
        g = build_geometry(n, 0.2, 10, 10)
        i = n // 2
        c = g.tooth_centers[i]
        avg = lambda lo, hi: ((hi - c) ** 4 - (lo - c) ** 4) / (4 * (hi - lo))
        tl, tr = g.tooth_bounds
        gl, gr = g.gap_bounds
        rec = lift_unit(g, i, avg(gl[i - 1], gr[i - 1]), avg(tl[i], tr[i]), avg(gl[i], gr[i]))
        h = g.tooth_width / 2
        d = g.dx - h
        assert rec.a1 == pytest.approx((d * d + h * h) * 6 / 12, rel=1e-10)
