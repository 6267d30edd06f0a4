"""Patch dynamics coarse time-stepper.

One coarse step lifts the macro state into every simulation unit, runs the micro
model for a short burst, averages the fluxes through the tooth edges and feeds
them to a conservative update of the tooth and gap averages. A projective
forward-Euler step then extrapolates over ``(M+1)`` coarse steps.

Micro backends expose ``init_units``, ``micro_step`` and ``max_steps``. The
finite-volume backend evolves all units at once as one array; the agent backend
loops over units and replicas, each with its own random stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .agents import jump_decay
from .errors import SimulationAbort
from .fokker_planck import ModelParams, nu_rates, self_consistent_rates
from .grid import MacroState, PatchGeometry, total_mass
from .lifting import BatchLifter, agents_from_bins

MASS_RTOL = 1e-10


@dataclass(frozen=True)
class PatchRunConfig:
    dt_micro: float
    n_b_steps: int
    m_project: int = 0
    n_realizations: int = 1
    seed: int = 0
    feedback: str = "frozen"

    def __post_init__(self):
        if not self.dt_micro > 0:
            raise ValueError(f"dt_micro must be positive, got {self.dt_micro}")
        if self.n_b_steps < 1:
            raise ValueError(f"n_b_steps must be >= 1, got {self.n_b_steps}")
        if self.m_project < 0:
            raise ValueError(f"m_project must be >= 0, got {self.m_project}")
        if self.n_realizations < 1:
            raise ValueError("n_realizations must be >= 1")
        if self.feedback not in ("frozen", "per-micro-step"):
            raise ValueError(f"feedback must be 'frozen' or 'per-micro-step', got {self.feedback!r}")

    @property
    def delta_t(self) -> float:
        return self.n_b_steps * self.dt_micro

    @property
    def big_dt(self) -> float:
        return (self.m_project + 1) * self.delta_t

    @property
    def time_fraction(self) -> float:
        return 1.0 / (self.m_project + 1)


def estimate_rates(lifter: BatchLifter, state: MacroState, params: ModelParams) -> tuple[float, float]:
    """Buy/sell rates implied by the boundary reconstructions, ``R = sigma2 * |u'| / 2``."""
    d_left, d_right = lifter.boundary_slopes(state)
    return self_consistent_rates(params, max(0.5 * d_left, 0.0), max(-0.5 * d_right, 0.0))


@dataclass
class UnitRunFV:
    """Fine bins of all units; each micro step discards one bin on each side."""

    bins: np.ndarray
    discarded: int = 0
    flux_left: list = field(default_factory=list)
    flux_right: list = field(default_factory=list)

    @property
    def valid_length(self) -> int:
        return self.bins.shape[1]


class FVBackend:
    """Fine-grid finite-volume solver inside buffered units.

    Units share one array layout: row ``i`` has ``n_t + 2*n_b`` columns with the
    tooth in the middle. For the two boundary units the column just outside the
    domain acts as a ghost bin holding minus the adjacent inner density, which
    enforces zero density at x = +-1.
    """

    conservative = True

    def __init__(self, geom: PatchGeometry, params: ModelParams):
        self.geom = geom
        self.params = params
        self.lifter = BatchLifter(geom)
        n = geom.n_t + 2 * geom.n_b
        first = geom.tooth_centers - (0.5 * geom.n_t + geom.n_b) * geom.h_fine
        self.edges = first[:, None] + geom.h_fine * np.arange(n + 1)[None, :]

    def max_steps(self) -> int:
        return self.geom.n_b

    def init_units(self, state: MacroState, step_index: int = 0) -> UnitRunFV:
        return UnitRunFV(self.lifter.bins(state))

    def micro_step(self, units: UnitRunFV, rates, dt: float):
        geom = self.geom
        k = units.discarded
        if k >= geom.n_b:
            raise SimulationAbort(f"buffer exhausted after {k} micro steps")
        h = geom.h_fine
        nu_p, nu_m = nu_rates(self.params, *rates)
        s2 = nu_p * self.params.eps_plus**2 + nu_m * self.params.eps_minus**2
        drift = nu_p * self.params.eps_plus + nu_m * self.params.eps_minus
        if dt * s2 > h * h * (1 + 1e-12):
            raise ValueError(f"micro step {dt:.4g} exceeds the stability bound {h * h / s2:.4g}")
        new, fl, fr = _unit_step(units.bins, self.edges, k, geom.n_b, geom.n_t, dt, h,
                                 self.params.gamma, drift, s2)
        if not np.all(np.isfinite(new)):
            raise SimulationAbort("non-finite density in micro simulation")
        units.bins = new
        units.discarded = k + 1
        units.flux_left.append(fl)
        units.flux_right.append(fr)
        return units, fl, fr, (float(fr[-1]), float(-fl[0]))

    def burst(self, units: UnitRunFV, rates, dt: float, n_steps: int):
        """``n_steps`` micro steps at fixed rates; returns ``(units, sum F_L, sum F_R)``.

        Same arithmetic as repeated ``micro_step`` calls, without the per-step
        flux history.
        """
        geom = self.geom
        if units.discarded + n_steps > geom.n_b:
            raise SimulationAbort(f"buffer exhausted: {units.discarded} + {n_steps} > {geom.n_b} micro steps")
        h = geom.h_fine
        nu_p, nu_m = nu_rates(self.params, *rates)
        s2 = nu_p * self.params.eps_plus**2 + nu_m * self.params.eps_minus**2
        drift = nu_p * self.params.eps_plus + nu_m * self.params.eps_minus
        if dt * s2 > h * h * (1 + 1e-12):
            raise ValueError(f"micro step {dt:.4g} exceeds the stability bound {h * h / s2:.4g}")
        new, fl, fr = _unit_burst(units.bins, self.edges, units.discarded, n_steps, geom.n_b, geom.n_t,
                                  dt, h, self.params.gamma, drift, s2)
        if not np.all(np.isfinite(new)):
            raise SimulationAbort("non-finite density in micro simulation")
        units.bins = new
        units.discarded += n_steps
        return units, fl, fr


@njit(cache=True)
def _unit_burst(u, edges, k0, n_steps, n_b, n_t, dt, h, gamma, drift, s2):
    fl_sum = np.zeros(u.shape[0])
    fr_sum = np.zeros(u.shape[0])
    for k in range(k0, k0 + n_steps):
        u, fl, fr = _unit_step(u, edges, k, n_b, n_t, dt, h, gamma, drift, s2)
        fl_sum += fl
        fr_sum += fr
    return u, fl_sum, fr_sum


@njit(cache=True)
def _unit_step(u, edges, k, n_b, n_t, dt, h, gamma, drift, s2):
    """Advance every unit by one micro step, dropping the outermost bin on each side.

    ``u`` has already lost ``k`` bins per side; ``edges`` holds the full unit edges.
    """
    n_units, w = u.shape
    u[0, n_b - 1 - k] = -u[0, n_b - k]
    gr = n_b + n_t - k
    u[n_units - 1, gr] = -u[n_units - 1, gr - 1]
    new = np.empty((n_units, w - 2))
    fl = np.empty(n_units)
    fr = np.empty(n_units)
    lam = dt / h
    for i in range(n_units):
        prev = 0.0
        for j in range(w - 1):
            mu = gamma * edges[i, k + 1 + j] - drift
            f = -(mu * 0.5 * (u[i, j] + u[i, j + 1]) + 0.5 * s2 * (u[i, j + 1] - u[i, j]) / h)
            if j == n_b - k - 1:
                fl[i] = f
            if j == n_b + n_t - k - 1:
                fr[i] = f
            if j > 0:
                new[i, j - 1] = u[i, j] + lam * (prev - f)
            prev = f
    return new, fl, fr


@dataclass
class AgentUnits:
    positions: list  # positions[i][r] -> agent states of unit i, replica r
    rngs: list
    clipped_mass: float = 0.0


class AgentBackend:
    """Agent simulation inside each unit, repeated over independent replicas.

    Tooth-edge fluxes are net crossing counts; agents leaving (-1, 1) are absorbed
    and reported as buys or sells. All counts are normalised by
    ``n_total * dt * n_realizations`` so they carry density-flux units.
    """

    conservative = True

    def __init__(self, geom: PatchGeometry, params: ModelParams, n_total: int,
                 n_realizations: int = 1, seed: int = 0, max_micro_steps: int = 10**9):
        self.geom = geom
        self.params = params
        self.n_total = int(n_total)
        self.n_realizations = int(n_realizations)
        self.seed = int(seed)
        self.max_micro_steps = max_micro_steps
        self.lifter = BatchLifter(geom)
        tl, tr = geom.tooth_bounds
        self.tooth_left, self.tooth_right = tl, tr

    def max_steps(self) -> int:
        return self.max_micro_steps

    def _unit_edges(self, i):
        return self.geom.unit_bin_edges(i)

    def _unit_columns(self, i):
        g = self.geom
        if i == 0:
            return slice(g.n_b, None)
        if i == g.n_cells:
            return slice(0, g.n_t + g.n_b)
        return slice(None)

    def init_units(self, state: MacroState, step_index: int = 0) -> AgentUnits:
        bins = self.lifter.bins(state)
        positions, rngs, clipped = [], [], 0.0
        for i in range(self.geom.n_teeth):
            dens = bins[i, self._unit_columns(i)]
            edges = self._unit_edges(i)
            pos_i, rng_i = [], []
            for r in range(self.n_realizations):
                ss = np.random.SeedSequence(self.seed, spawn_key=(i, r, step_index))
                rng = np.random.default_rng(ss)
                _, pos, clip = agents_from_bins(dens, None, self.n_total, rng, bin_edges=edges)
                pos_i.append(pos)
                rng_i.append(rng)
                clipped += clip
            positions.append(pos_i)
            rngs.append(rng_i)
        return AgentUnits(positions, rngs, clipped / self.n_realizations)

    def micro_step(self, units: AgentUnits, rates, dt: float):
        nu_p, nu_m = nu_rates(self.params, *rates)
        n_units = self.geom.n_teeth
        fl = np.zeros(n_units)
        fr = np.zeros(n_units)
        buys = sells = 0
        for i in range(n_units):
            for r in range(self.n_realizations):
                x = units.positions[i][r]
                f_l, f_r, (b, s), kept = agent_unit_micro_step(
                    x, self.tooth_left[i], self.tooth_right[i], nu_p, nu_m, self.params, dt,
                    units.rngs[i][r])
                units.positions[i][r] = kept
                fl[i] += f_l
                fr[i] += f_r
                buys += b
                sells += s
        norm = self.n_total * dt * self.n_realizations
        return units, fl / norm, fr / norm, (buys / norm, sells / norm)


def agent_unit_micro_step(x, edge_left, edge_right, nu_plus, nu_minus, params, dt, rng):
    """Advance one unit's agents; return net crossing counts of the tooth edges.

    A crossing to the right counts +1, to the left -1; agents that jump across and
    back within the step count zero. Agents leaving (-1, 1) are removed and
    returned as ``(buys, sells)`` events.

    Returns ``(net_left, net_right, (buys, sells), remaining_states)``.
    """
    new, exits = jump_decay(x, nu_plus, nu_minus, params, dt, rng, offset=None)
    after = np.where(exits > 0, np.inf, np.where(exits < 0, -np.inf, new))
    net_l = int((after > edge_left).sum()) - int((x > edge_left).sum())
    net_r = int((after > edge_right).sum()) - int((x > edge_right).sum())
    events = (int((exits > 0).sum()), int((exits < 0).sum()))
    return net_l, net_r, events, new[exits == 0]


def gap_tooth_step(state: MacroState, geom: PatchGeometry, params: ModelParams, backend,
                   config: PatchRunConfig, step_index: int = 0):
    """Advance the macro state by one coarse step ``delta_t``; returns ``(state, diagnostics)``."""
    state.check(geom)
    n_steps, dt = config.n_b_steps, config.dt_micro
    if n_steps > backend.max_steps():
        raise ValueError(f"{n_steps} micro steps exceed the backend limit of {backend.max_steps()}")
    rates = estimate_rates(backend.lifter, state, params)
    units = backend.init_units(state, step_index)
    if config.feedback == "frozen" and hasattr(backend, "burst"):
        units, fl_sum, fr_sum = backend.burst(units, rates, dt, n_steps)
    else:
        fl_sum = np.zeros(geom.n_teeth)
        fr_sum = np.zeros(geom.n_teeth)
        for _ in range(n_steps):
            units, fl, fr, (r_plus, r_minus) = backend.micro_step(units, rates, dt)
            fl_sum += fl
            fr_sum += fr
            if config.feedback == "per-micro-step":
                rates = (max(r_plus, 0.0), max(r_minus, 0.0))
    f_left, f_right = fl_sum / n_steps, fr_sum / n_steps
    if not (np.all(np.isfinite(f_left)) and np.all(np.isfinite(f_right))):
        raise SimulationAbort("non-finite tooth-edge flux")
    new = restrict(state, geom, f_left, f_right, config.delta_t)
    mass0, mass1 = total_mass(state, geom), total_mass(new, geom)
    if backend.conservative and abs(mass1 - mass0) > MASS_RTOL * max(abs(mass0), 1e-300):
        if not (mass0 == 0 and abs(mass1) < 1e-300):
            raise SimulationAbort(f"mass drift {mass1 - mass0:.3g} from {mass0:.12g} in gap-tooth step")
    diag = {
        "mass": mass1,
        "r_plus": float(f_right[-1]),
        "r_minus": 0.0 - float(f_left[0]),
        "clipped_mass": float(getattr(units, "clipped_mass", 0.0)),
    }
    return new, diag


def restrict(state: MacroState, geom: PatchGeometry, f_left, f_right, delta_t) -> MacroState:
    """Conservative update of teeth and gaps from mean tooth-edge fluxes.

    The outflow through x = +-1 re-enters the gap that contains x = 0.
    """
    teeth = state.teeth + delta_t / geom.tooth_width * (f_left - f_right)
    gap_w = geom.gap_widths
    gaps = state.gaps + delta_t / gap_w * (f_right[:-1] - f_left[1:])
    c = geom.central_gap
    gaps[c] += delta_t / gap_w[c] * (f_right[-1] - f_left[0])
    return MacroState(teeth, gaps, state.time + delta_t)


def projective_step(state_n: MacroState, state_nd: MacroState, config: PatchRunConfig) -> MacroState:
    """Forward-Euler extrapolation over ``(M+1)*delta_t`` using the chord slope of one coarse step."""
    dt = config.delta_t
    big = config.big_dt
    d_teeth = (state_nd.teeth - state_n.teeth) / dt
    d_gaps = (state_nd.gaps - state_n.gaps) / dt
    return MacroState(state_n.teeth + big * d_teeth, state_n.gaps + big * d_gaps, state_n.time + big)


@dataclass
class PatchTrajectory:
    states: list
    diagnostics: list
    space_fraction: float
    time_fraction: float


def run_patch_dynamics(initial: MacroState, geom: PatchGeometry, params: ModelParams, backend,
                       config: PatchRunConfig, n_outer: int, record_every: int = 1,
                       callback=None) -> PatchTrajectory:
    """Repeat gap-tooth step plus projective step ``n_outer`` times.

    States are kept every ``record_every`` outer steps (the final state always).
    """
    state = initial.copy()
    states, diags = [state.copy()], []
    for n in range(n_outer):
        burst, diag = gap_tooth_step(state, geom, params, backend, config, step_index=n)
        state = projective_step(state, burst, config)
        # avoid accumulating round-off in the clock
        state.time = initial.time + (n + 1) * config.big_dt
        diag["t"] = state.time
        diag["mass"] = total_mass(state, geom)
        diags.append(diag)
        if (n + 1) % record_every == 0 or n + 1 == n_outer:
            states.append(state.copy())
        if callback is not None:
            callback(n, state, diag)
    return PatchTrajectory(states, diags, geom.space_fraction, config.time_fraction)


def run_patch_to_steady(initial: MacroState, geom: PatchGeometry, params: ModelParams, backend,
                        config: PatchRunConfig, tol: float = 1e-9, check_every: int = 500,
                        max_outer: int = 10**7) -> MacroState:
    """Run outer steps until one outer step changes no average by more than ``tol``."""
    state = initial.copy()
    n = 0
    while n < max_outer:
        burst, _ = gap_tooth_step(state, geom, params, backend, config, step_index=n)
        nxt = projective_step(state, burst, config)
        n += 1
        if n % check_every == 0:
            change = max(np.max(np.abs(nxt.teeth - state.teeth)), np.max(np.abs(nxt.gaps - state.gaps)))
            if change < tol:
                nxt.time = initial.time + n * config.big_dt
                return nxt
        state = nxt
    raise SimulationAbort(f"patch dynamics not steady after {max_outer} outer steps")


def macro_from_profile(geom: PatchGeometry, average, time: float = 0.0) -> MacroState:
    """Macro state from a callable ``average(lo, hi)`` giving exact footprint averages."""
    tl, tr = geom.tooth_bounds
    gl, gr = geom.gap_bounds
    return MacroState(average(tl, tr), average(gl, gr), time)


def steps_for(total: float, step: float) -> int:
    n = round(total / step)
    if n < 0 or not math.isclose(n * step, total, rel_tol=1e-9, abs_tol=1e-15):
        raise ValueError(f"{total!r} is not an integer multiple of {step!r}")
    return int(n)
