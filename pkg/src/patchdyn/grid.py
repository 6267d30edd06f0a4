"""Two-scale spatial layout on [-1, 1]: big cells, teeth, gaps, buffers and fine bins."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DOMAIN = (-1.0, 1.0)


@dataclass(frozen=True)
class PatchGeometry:
    """Teeth sit on the big-cell edges ``x_i = -1 + i*dx``; gaps fill the space between them.

    The two outer teeth keep their full width ``H`` but are pushed inwards so that
    their outer edge coincides with the domain boundary, which leaves the outermost
    gaps a width of ``dx - 3H/2``.
    """

    n_cells: int
    alpha: float
    n_t: int
    n_b: int
    dx: float = field(init=False)
    h_fine: float = field(init=False)
    tooth_width: float = field(init=False)
    gap_width_interior: float = field(init=False)
    gap_width_boundary: float = field(init=False)
    _gap_widths: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        dx = 2.0 / self.n_cells
        h = self.alpha * dx / (self.n_t + 2 * self.n_b)
        H = self.n_t * h
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "h_fine", h)
        object.__setattr__(self, "tooth_width", H)
        object.__setattr__(self, "gap_width_interior", dx - H)
        object.__setattr__(self, "gap_width_boundary", dx - 1.5 * H)
        w = np.full(self.n_cells, dx - H)
        w[0] = w[-1] = dx - 1.5 * H
        w.flags.writeable = False
        object.__setattr__(self, "_gap_widths", w)

    @property
    def n_teeth(self) -> int:
        return self.n_cells + 1

    @property
    def n_gaps(self) -> int:
        return self.n_cells

    @property
    def cell_edges(self) -> np.ndarray:
        """Big-cell edges ``-1 + i*dx``, i = 0..N (the nominal tooth positions)."""
        return -1.0 + self.dx * np.arange(self.n_cells + 1)

    @property
    def tooth_centers(self) -> np.ndarray:
        c = self.cell_edges.copy()
        c[0] = -1.0 + 0.5 * self.tooth_width
        c[-1] = 1.0 - 0.5 * self.tooth_width
        return c

    @property
    def tooth_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.tooth_centers
        half = 0.5 * self.tooth_width
        left, right = c - half, c + half
        left[0], right[-1] = -1.0, 1.0
        return left, right

    @property
    def gap_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        tl, tr = self.tooth_bounds
        return tr[:-1].copy(), tl[1:].copy()

    @property
    def tooth_widths(self) -> np.ndarray:
        return np.full(self.n_teeth, self.tooth_width)

    @property
    def gap_widths(self) -> np.ndarray:
        """Read-only; boundary gaps are ``dx - 3H/2`` wide."""
        return self._gap_widths

    @property
    def central_gap(self) -> int:
        """0-based index of the gap containing x = 0."""
        return self.n_cells // 2

    @property
    def unit_width(self) -> float:
        return self.alpha * self.dx

    @property
    def space_fraction(self) -> float:
        """Fraction of each big cell covered by a simulation unit (alpha by construction)."""
        return self.alpha

    def unit_bin_edges(self, i: int) -> np.ndarray:
        """Fine-bin edges of simulation unit ``i`` in global coordinates.

        Interior units carry ``n_b`` buffer bins on both sides of the tooth; the two
        boundary units carry a buffer on the inner side only.
        """
        h = self.h_fine
        if i == 0:
            return -1.0 + h * np.arange(self.n_t + self.n_b + 1)
        if i == self.n_cells:
            return 1.0 - h * np.arange(self.n_t + self.n_b, -1, -1)
        c = self.cell_edges[i]
        n = self.n_t + 2 * self.n_b
        return c - 0.5 * n * h + h * np.arange(n + 1)


def build_geometry(n_cells: int, alpha: float, n_t: int, n_b: int) -> PatchGeometry:
    problems = []
    if int(n_cells) != n_cells or n_cells < 3 or n_cells % 2 == 0:
        problems.append(f"n_cells must be an odd integer >= 3, got {n_cells}")
    if n_t < 1 or n_b < 1:
        problems.append(f"need n_t >= 1 and n_b >= 1, got n_t={n_t}, n_b={n_b}")
    if not alpha > 0:
        problems.append(f"alpha must be positive, got {alpha}")
    elif n_t >= 1 and n_b >= 1 and not alpha * n_t / (n_t + 2 * n_b) < 2.0 / 3.0:
        problems.append(f"alpha = {alpha} makes the tooth too wide (need H < 2*dx/3)")
    if problems:
        raise ValueError("; ".join(problems))
    geom = PatchGeometry(int(n_cells), float(alpha), int(n_t), int(n_b))
    if geom.gap_width_boundary <= 0:
        raise ValueError(
            f"tooth width {geom.tooth_width:.4g} leaves no room for the boundary gaps "
            f"(need H < 2*dx/3 = {2 * geom.dx / 3:.4g})"
        )
    return geom


@dataclass
class MacroState:
    """Average densities in the N+1 teeth and N gaps at a given time."""

    teeth: np.ndarray
    gaps: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.teeth = np.asarray(self.teeth, dtype=float)
        self.gaps = np.asarray(self.gaps, dtype=float)

    def copy(self) -> MacroState:
        return MacroState(self.teeth.copy(), self.gaps.copy(), self.time)

    def check(self, geom: PatchGeometry):
        if self.teeth.shape != (geom.n_teeth,) or self.gaps.shape != (geom.n_gaps,):
            raise ValueError(
                f"state shape teeth={self.teeth.shape}, gaps={self.gaps.shape} does not "
                f"match geometry with {geom.n_teeth} teeth and {geom.n_gaps} gaps"
            )


def total_mass(state: MacroState, geom: PatchGeometry) -> float:
    state.check(geom)
    return float(geom.tooth_width * state.teeth.sum() + geom.gap_widths @ state.gaps)


def uniform_state(geom: PatchGeometry, value: float, time: float = 0.0) -> MacroState:
    return MacroState(np.full(geom.n_teeth, value), np.full(geom.n_gaps, value), time)
