"""Quadratic reconstruction inside simulation units and its conversion to fine bins or agents.

Each unit carries ``u(x) = a0 + a1*x + a2*x**2/2`` in coordinates centred on its
tooth. Interior units match the averages of the tooth and its two neighbouring
gaps; the two boundary units replace the missing gap by ``u = 0`` at x = -1 or x = 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import SimulationAbort
from .grid import MacroState, PatchGeometry

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


@dataclass(frozen=True)
class QuadraticReconstruction:
    a0: float
    a1: float
    a2: float
    center: float
    valid_interval: tuple[float, float]
    unit: int | None = None

    def __call__(self, x):
        s = np.asarray(x, dtype=float) - self.center
        return self.a0 + self.a1 * s + 0.5 * self.a2 * s * s

    def derivative(self, x):
        return self.a1 + self.a2 * (np.asarray(x, dtype=float) - self.center)

    def average(self, lo, hi):
        """Exact average over ``[lo, hi]`` (global coordinates)."""
        lo = np.asarray(lo, dtype=float) - self.center
        hi = np.asarray(hi, dtype=float) - self.center
        return self.a0 + self.a1 * 0.5 * (lo + hi) + self.a2 * (hi**2 + hi * lo + lo**2) / 6.0

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.a0, self.a1, self.a2])


def _avg_row(lo, hi):
    """Averages of (1, s, s^2/2) over [lo, hi]."""
    return [1.0, 0.5 * (lo + hi), (hi * hi + hi * lo + lo * lo) / 6.0]


def _point_row(s):
    return [1.0, s, 0.5 * s * s]


def _solve(rows, rhs, scale):
    """Solve for (a0, a1, a2) with the local coordinate scaled by ``scale``."""
    A = np.array(rows, dtype=float)
    A[:, 1] /= scale
    A[:, 2] /= scale * scale
    cond = np.linalg.cond(A)
    if not cond < COND_LIMIT:
        raise SimulationAbort(f"lifting system is singular (condition number {cond:.3g})")
    b = np.linalg.solve(A, np.asarray(rhs, dtype=float))
    return b[0], b[1] / scale, b[2] / scale**2


def _unit_rows(geom: PatchGeometry, i: int):
    """Constraint rows of unit ``i`` in tooth-centred coordinates, footprint, and centre."""
    H, dx = geom.tooth_width, geom.dx
    c = geom.tooth_centers[i]
    edges = geom.unit_bin_edges(i)
    footprint = (float(edges[0]), float(edges[-1]))
    gl, gr = geom.gap_bounds
    tooth = _avg_row(-0.5 * H, 0.5 * H)
    if i == 0:
        return [_point_row(-0.5 * H), tooth, _avg_row(gl[0] - c, gr[0] - c)], footprint, c
    if i == geom.n_cells:
        return [_avg_row(gl[-1] - c, gr[-1] - c), tooth, _point_row(0.5 * H)], footprint, c
    # true neighbouring gap footprints (teeth 1 and N-1 border a shortened boundary gap)
    return [_avg_row(gl[i - 1] - c, gr[i - 1] - c), tooth, _avg_row(gl[i] - c, gr[i] - c)], footprint, c


def lift_unit(geom: PatchGeometry, i: int, left: float, tooth: float, right: float) -> QuadraticReconstruction:
    """Reconstruction of unit ``i`` from (left gap, tooth, right gap) averages.

    For the left boundary unit ``left`` is ignored (the point value at x = -1 is 0);
    likewise ``right`` for the right boundary unit.
    """
    rows, footprint, c = _unit_rows(geom, i)
    if i == 0:
        rhs = [0.0, tooth, right]
    elif i == geom.n_cells:
        rhs = [left, tooth, 0.0]
    else:
        rhs = [left, tooth, right]
    a0, a1, a2 = _solve(rows, rhs, geom.dx)
    return QuadraticReconstruction(a0, a1, a2, c, footprint, i)


def lift_interior(u_gap_left, u_tooth, u_gap_right, geom: PatchGeometry, index: int | None = None):
    """Interior reconstruction; ``index`` picks the tooth (defaults to the one right of centre)."""
    i = geom.n_cells // 2 + 1 if index is None else index
    if not 1 <= i <= geom.n_cells - 1:
        raise ValueError(f"tooth {i} is not an interior tooth")
    return lift_unit(geom, i, u_gap_left, u_tooth, u_gap_right)


def lift_left_boundary(u_tooth0, u_gap_half, geom: PatchGeometry):
    return lift_unit(geom, 0, 0.0, u_tooth0, u_gap_half)


def lift_right_boundary(u_toothN, u_gap_half, geom: PatchGeometry):
    return lift_unit(geom, geom.n_cells, u_gap_half, u_toothN, 0.0)


def lift_state(state: MacroState, geom: PatchGeometry) -> list[QuadraticReconstruction]:
    state.check(geom)
    g = state.gaps
    recs = [lift_left_boundary(state.teeth[0], g[0], geom)]
    for i in range(1, geom.n_cells):
        recs.append(lift_unit(geom, i, g[i - 1], state.teeth[i], g[i]))
    recs.append(lift_right_boundary(state.teeth[-1], g[-1], geom))
    return recs


def fine_bin_averages(rec: QuadraticReconstruction, geom: PatchGeometry) -> np.ndarray:
    """Exact bin averages of ``rec`` over the fine bins of its simulation unit."""
    edges = geom.unit_bin_edges(rec.unit)
    return rec.average(edges[:-1], edges[1:])


class BatchLifter:
    """Precomputed linear map from a macro state to fine-bin averages of every unit.

    The result is an ``(N+1, n_t + 2*n_b)`` array whose row ``i`` holds unit ``i``
    with its tooth in columns ``n_b .. n_b+n_t-1``. Boundary units have no outer
    buffer; those columns are filled with zeros.
    """

    def __init__(self, geom: PatchGeometry):
        self.geom = geom
        n_units = geom.n_teeth
        n_bins = geom.n_t + 2 * geom.n_b
        # bins[i] = coeff_map[i] @ (left, tooth, right)
        self.bin_map = np.zeros((n_units, n_bins, 3))
        self.deriv_map = np.zeros((2, 3))  # u'(-1) and u'(1) of the boundary units
        for i in range(n_units):
            for k in range(3):
                e = np.zeros(3)
                e[k] = 1.0
                rec = lift_unit(geom, i, *e)
                vals = fine_bin_averages(rec, geom)
                if i == 0:
                    self.bin_map[i, geom.n_b:, k] = vals
                    self.deriv_map[0, k] = rec.derivative(-1.0)
                elif i == geom.n_cells:
                    self.bin_map[i, : geom.n_t + geom.n_b, k] = vals
                    self.deriv_map[1, k] = rec.derivative(1.0)
                else:
                    self.bin_map[i, :, k] = vals

    def inputs(self, state: MacroState) -> np.ndarray:
        g = state.gaps
        x = np.zeros((g.size + 1, 3))
        x[1:, 0] = g
        x[:, 1] = state.teeth
        x[:-1, 2] = g
        return x

    def bins(self, state: MacroState) -> np.ndarray:
        state.check(self.geom)
        return np.einsum("ubk,uk->ub", self.bin_map, self.inputs(state))

    def boundary_slopes(self, state: MacroState) -> tuple[float, float]:
        """Reconstructed density derivative at x = -1 and x = +1."""
        d0, d1 = self.deriv_map
        t, g = state.teeth, state.gaps
        return float(d0[1] * t[0] + d0[2] * g[0]), float(d1[0] * g[-1] + d1[1] * t[-1])


def largest_remainder(weights, total: int) -> np.ndarray:
    """Apportion ``total`` integer items proportionally to nonnegative ``weights``."""
    w = np.asarray(weights, dtype=float)
    if total <= 0 or w.sum() <= 0:
        return np.zeros(w.size, dtype=np.int64)
    quota = w * (total / w.sum())
    counts = np.floor(quota).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort: ties go to the lower bin index
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def agents_from_bins(bin_densities, geom: PatchGeometry | None, n_total: int, rng: np.random.Generator,
                     bin_edges=None):
    """Convert fine-bin densities to agent counts and uniformly placed agent positions.

    Negative densities are clipped to zero before counting; the clipped mass
    (in units of the total population) is returned and logged.

    Returns ``(counts, positions, clipped_mass)``.
    """
    if n_total <= 0:
        raise ValueError(f"n_total must be positive, got {n_total}")
    dens = np.asarray(bin_densities, dtype=float)
    if bin_edges is None:
        bin_edges = np.arange(dens.size + 1) * geom.h_fine
    edges = np.asarray(bin_edges, dtype=float)
    widths = np.diff(edges)
    clipped = float(-(np.minimum(dens, 0.0) * widths).sum())
    if clipped > 0:
        log.debug("clipped negative lifted density, mass %.3g", clipped)
    mass = np.maximum(dens, 0.0) * widths
    total = int(round(n_total * mass.sum()))
    counts = largest_remainder(mass, total)
    lo = np.repeat(edges[:-1], counts)
    w = np.repeat(widths, counts)
    positions = lo + w * rng.random(lo.size)
    return counts, positions, clipped
