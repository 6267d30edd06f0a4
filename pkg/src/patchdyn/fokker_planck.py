"""Finite-volume solver for the Fokker-Planck approximation of the market model.

The density lives on ``n`` equal cells over [-1, 1] (``n`` odd, so one cell holds
x = 0). Agents leave through x = +-1 and are reinjected into the central cell,
which keeps ``dx * sum(cells)`` constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy.special import erf

from .errors import SimulationAbort


@dataclass(frozen=True)
class ModelParams:
    gamma: float = 1.0
    eps_plus: float = 0.075
    eps_minus: float = -0.072
    nu_ex_plus: float = 20.0
    nu_ex_minus: float = 20.0
    g: float = 40.0

    def __post_init__(self):
        problems = []
        if not self.gamma >= 0:
            problems.append(f"gamma must be >= 0 (got {self.gamma})")
        if not self.eps_plus > 0:
            problems.append(f"eps_plus must be > 0 (got {self.eps_plus})")
        if not self.eps_minus < 0:
            problems.append(f"eps_minus must be < 0 (got {self.eps_minus})")
        if not (self.nu_ex_plus >= 0 and self.nu_ex_minus >= 0):
            problems.append("external news rates must be >= 0")
        if not self.g >= 0:
            problems.append(f"g must be >= 0 (got {self.g})")
        if problems:
            raise ValueError("; ".join(problems))


FIG4_PARAMS = ModelParams(gamma=1.0, eps_plus=0.075, eps_minus=-0.072,
                          nu_ex_plus=20.0, nu_ex_minus=20.0, g=40.0)
# external news rates are not given for the agent study; 20/20 is carried over
FIG8_PARAMS = ModelParams(gamma=1e-3, eps_plus=2.9e-3, eps_minus=-2.89e-3,
                          nu_ex_plus=20.0, nu_ex_minus=20.0, g=1.0)

GAUSSIAN_IC = (1.811, 0.01545, 0.3115)


def nu_rates(params: ModelParams, r_plus: float, r_minus: float) -> tuple[float, float]:
    """News arrival frequencies including the mimetic feedback of buy/sell rates."""
    return params.nu_ex_plus + params.g * r_plus, params.nu_ex_minus + params.g * r_minus


def sigma2_of(params: ModelParams, rates) -> float:
    nu_p, nu_m = nu_rates(params, *rates)
    return nu_p * params.eps_plus**2 + nu_m * params.eps_minus**2


def drift_diffusion(params: ModelParams, rates, x):
    """Return ``(mu(x), sigma2)`` for the given buy/sell rates."""
    nu_p, nu_m = nu_rates(params, *rates)
    mu = params.gamma * np.asarray(x, dtype=float) - (nu_p * params.eps_plus + nu_m * params.eps_minus)
    sigma2 = nu_p * params.eps_plus**2 + nu_m * params.eps_minus**2
    if np.ndim(mu) == 0:
        mu = float(mu)
    return mu, sigma2


def edge_flux(u_left, u_right, mu_edge, sigma2, dx_f):
    """Central drift plus centered diffusion flux through an edge (positive = rightward)."""
    return -(mu_edge * 0.5 * (u_left + u_right) + 0.5 * sigma2 * (u_right - u_left) / dx_f)


def self_consistent_rates(params: ModelParams, left_ratio: float, right_ratio: float) -> tuple[float, float]:
    """Solve ``R- = sigma2(R) * left_ratio``, ``R+ = sigma2(R) * right_ratio`` for the rates.

    ``*_ratio`` is the boundary density slope proxy (outer cell density / dx, or
    half the one-sided derivative of a reconstruction). The system is linear in
    ``sigma2`` so it is solved in closed form.
    """
    base = params.nu_ex_plus * params.eps_plus**2 + params.nu_ex_minus * params.eps_minus**2
    loop = params.g * (params.eps_plus**2 * right_ratio + params.eps_minus**2 * left_ratio)
    if loop >= 1.0:
        raise SimulationAbort(f"feedback loop gain {loop:.3g} >= 1: buy/sell rates diverge")
    s2 = base / (1.0 - loop)
    return s2 * right_ratio, s2 * left_ratio


@dataclass
class FvState:
    cells: np.ndarray
    time: float = 0.0
    rates: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=float)
        n = self.cells.size
        if n < 3 or n % 2 == 0:
            raise ValueError(f"need an odd number >= 3 of cells, got {n}")

    @property
    def n(self) -> int:
        return self.cells.size

    @property
    def dx_f(self) -> float:
        return 2.0 / self.cells.size

    @property
    def edges(self) -> np.ndarray:
        n = self.cells.size
        return (2.0 * np.arange(n + 1) - n) / n

    @property
    def centers(self) -> np.ndarray:
        n = self.cells.size
        return (2.0 * np.arange(n) + 1.0 - n) / n

    def mass(self) -> float:
        return float(self.dx_f * self.cells.sum())


def boundary_rates(state: FvState, sigma2: float) -> tuple[float, float]:
    """Outflow rates ``(R+, R-)`` from the outermost cells, with zero density at +-1."""
    dx = state.dx_f
    return sigma2 * state.cells[-1] / dx, sigma2 * state.cells[0] / dx


def stable_dt(params: ModelParams, dx_f: float, rates=(0.0, 0.0)) -> float:
    """Largest explicit step allowed by the diffusion and drift limits."""
    mu_lo, s2 = drift_diffusion(params, rates, -1.0)
    mu_hi, _ = drift_diffusion(params, rates, 1.0)
    limit = dx_f**2 / s2 if s2 > 0 else math.inf
    mu_max = max(abs(mu_lo), abs(mu_hi))
    if mu_max > 0:
        limit = min(limit, dx_f / (2.0 * mu_max))
    return limit


def _check_dt(params, dx, dt, rates):
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    limit = stable_dt(params, dx, rates)
    if dt > limit * (1 + 1e-12):
        raise ValueError(f"dt={dt:.4g} exceeds the explicit stability bound {limit:.4g}")


def fv_step(state: FvState, params: ModelParams, dt: float) -> FvState:
    """One forward-Euler flux-form step; rates are lagged by one step."""
    cells, rates = _advance(state.cells, state.edges, params, dt, 1, state.rates)
    return FvState(cells, state.time + dt, rates)


def _advance_numpy(cells, edges, params, dt, n_steps, rates):
    """Plain array version of the stepping loop; kept as a cross-check for the compiled one."""
    n = cells.size
    dx = 2.0 / n
    centre = n // 2
    x_in = edges[1:-1]
    u = cells.copy()
    flux = np.empty(n + 1)
    lam = dt / dx
    for _ in range(n_steps):
        _check_dt(params, dx, dt, rates)
        mu, s2 = drift_diffusion(params, rates, x_in)
        r_plus, r_minus = s2 * u[-1] / dx, s2 * u[0] / dx
        flux[1:-1] = edge_flux(u[:-1], u[1:], mu, s2, dx)
        flux[0] = -r_minus
        flux[-1] = r_plus
        u += lam * (flux[:-1] - flux[1:])
        u[centre] += lam * (r_plus + r_minus)
        rates = (float(r_plus), float(r_minus))
    if not np.all(np.isfinite(u)):
        raise SimulationAbort("non-finite density in finite-volume step")
    return u, rates


@njit(cache=True)
def _advance_kernel(u, edges, dt, n_steps, r_plus, r_minus, gamma, ep, em, nxp, nxm, g):
    n = u.size
    dx = 2.0 / n
    lam = dt / dx
    centre = n // 2
    flux = np.empty(n + 1)
    for _ in range(n_steps):
        nu_p = nxp + g * r_plus
        nu_m = nxm + g * r_minus
        s2 = nu_p * ep * ep + nu_m * em * em
        drift = nu_p * ep + nu_m * em
        mu_max = max(abs(gamma + drift), abs(gamma - drift))
        if dt * s2 > dx * dx * (1 + 1e-12) or 2.0 * dt * mu_max > dx * (1 + 1e-12):
            return False, r_plus, r_minus
        r_plus = s2 * u[n - 1] / dx
        r_minus = s2 * u[0] / dx
        flux[0] = -r_minus
        flux[n] = r_plus
        for i in range(1, n):
            mu = gamma * edges[i] - drift
            flux[i] = -(mu * 0.5 * (u[i - 1] + u[i]) + 0.5 * s2 * (u[i] - u[i - 1]) / dx)
        for i in range(n):
            u[i] += lam * (flux[i] - flux[i + 1])
        u[centre] += lam * (r_plus + r_minus)
    return True, r_plus, r_minus


def _advance(cells, edges, params, dt, n_steps, rates):
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    u = np.array(cells, dtype=float)
    ok, r_plus, r_minus = _advance_kernel(u, np.asarray(edges, dtype=float), float(dt), int(n_steps),
                                          float(rates[0]), float(rates[1]), params.gamma,
                                          params.eps_plus, params.eps_minus, params.nu_ex_plus,
                                          params.nu_ex_minus, params.g)
    if not ok:
        limit = stable_dt(params, 2.0 / u.size, (r_plus, r_minus))
        raise ValueError(f"dt={dt:.4g} exceeds the explicit stability bound {limit:.4g}")
    if not np.all(np.isfinite(u)):
        raise SimulationAbort("non-finite density in finite-volume step")
    return u, (float(r_plus), float(r_minus))


def advance(state: FvState, params: ModelParams, dt: float, n_steps: int) -> FvState:
    """``n_steps`` steps of size ``dt``; the clock is set to ``t + n_steps*dt`` without accumulation."""
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    if n_steps == 0:
        return replace(state, cells=state.cells.copy())
    cells, rates = _advance(state.cells, state.edges, params, dt, n_steps, state.rates)
    return FvState(cells, state.time + n_steps * dt, rates)


def steps_to(span: float, dt_max: float) -> tuple[int, float]:
    """Fewest equal steps no longer than ``dt_max`` covering ``span``; returns ``(n, dt)``."""
    if span < 0 or not dt_max > 0:
        raise ValueError("need span >= 0 and dt_max > 0")
    if span == 0:
        return 0, dt_max
    n = max(1, math.ceil(span / dt_max * (1 - 1e-12)))
    return n, span / n


def run_to_time(state: FvState, params: ModelParams, dt: float, t_end: float) -> FvState:
    span = t_end - state.time
    n_steps = int(round(span / dt))
    if n_steps < 0 or abs(n_steps * dt - span) > 1e-9 * max(1.0, abs(t_end)):
        raise ValueError(f"t_end - t = {span!r} is not a non-negative integer multiple of dt = {dt!r}")
    if n_steps == 0:
        return replace(state, cells=state.cells.copy())
    cells, rates = _advance(state.cells, state.edges, params, dt, n_steps, state.rates)
    return FvState(cells, state.time + n_steps * dt, rates)


def run_to_steady(state: FvState, params: ModelParams, dt: float, tol: float = 1e-10,
                  check_every: int = 2000, max_time: float = 1e4) -> FvState:
    """Step until one step changes no cell by more than ``tol``."""
    t0 = state.time
    k = 0
    cells, rates = state.cells, state.rates
    while True:
        cells, rates = _advance(cells, state.edges, params, dt, check_every - 1, rates)
        k += check_every - 1
        nxt, rates = _advance(cells, state.edges, params, dt, 1, rates)
        k += 1
        change = np.max(np.abs(nxt - cells))
        cells = nxt
        if change < tol:
            break
        if k * dt > max_time:
            raise SimulationAbort(f"no steady state after t={k * dt:.4g} (last change {change:.3g})")
    return FvState(cells, t0 + k * dt, rates)


def gaussian(x, a=GAUSSIAN_IC[0], b=GAUSSIAN_IC[1], c=GAUSSIAN_IC[2]):
    return a * np.exp(-(((np.asarray(x) - b) / c) ** 2))


def gaussian_average(lo, hi, a=GAUSSIAN_IC[0], b=GAUSSIAN_IC[1], c=GAUSSIAN_IC[2]):
    """Exact average of the Gaussian-like profile over ``[lo, hi]``."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    integral = 0.5 * a * c * math.sqrt(math.pi) * (erf((hi - b) / c) - erf((lo - b) / c))
    return integral / (hi - lo)


def simpson_cell_averages(f, edges, sub: int = 16) -> np.ndarray:
    """Composite Simpson averages of ``f`` over each cell with ``sub`` sub-intervals."""
    if sub % 2:
        raise ValueError("Simpson needs an even number of sub-intervals")
    edges = np.asarray(edges, dtype=float)
    t = np.linspace(0.0, 1.0, sub + 1)
    w = np.ones(sub + 1)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    w /= 3.0 * sub
    x = edges[:-1, None] + (edges[1:] - edges[:-1])[:, None] * t[None, :]
    return f(x) @ w


def gaussian_state(n_cells: int, params: ModelParams | None = None, ic=GAUSSIAN_IC) -> FvState:
    """Cell-averaged Gaussian initial condition with self-consistent initial rates."""
    edges = (2.0 * np.arange(n_cells + 1) - n_cells) / n_cells
    cells = simpson_cell_averages(lambda x: gaussian(x, *ic), edges)
    state = FvState(cells)
    if params is not None:
        dx = state.dx_f
        state.rates = self_consistent_rates(params, cells[0] / dx, cells[-1] / dx)
    return state
