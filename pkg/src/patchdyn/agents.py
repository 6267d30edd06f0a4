"""Stochastic agent model: exponential decay towards 0 plus Poisson news jumps.

An agent whose state leaves (-1, 1) after a jump registers a buy (x > 1) or a
sell (x < -1) and is reset to 0 plus a small uniform offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import SimulationAbort
from .fokker_planck import ModelParams, nu_rates


@dataclass
class RateReport:
    r_plus: float = 0.0
    r_minus: float = 0.0

    def __iter__(self):
        return iter((self.r_plus, self.r_minus))


@dataclass
class AgentPopulation:
    states: np.ndarray
    params: ModelParams
    rng: np.random.Generator
    n_total: int
    window: int = 1
    offset: float = 1e-3
    buys: int = 0
    sells: int = 0
    steps_in_window: int = field(default=0)
    rates: RateReport = field(default_factory=RateReport)


@njit(cache=True)
def _replay(pos, kp, km, u_order, u_offset, starts, eps_plus, eps_minus, offset, reinject):
    """Apply each agent's arrivals one at a time in a uniformly random order.

    The order is drawn as urn sampling without replacement: with ``a`` good and
    ``b`` bad arrivals left, the next one is good with probability ``a/(a+b)``.
    """
    exits = np.zeros(pos.size, dtype=np.int8)
    for i in range(pos.size):
        a, b = kp[i], km[i]
        s = starts[i]
        x = pos[i]
        for j in range(kp[i] + km[i]):
            if u_order[s + j] * (a + b) < a:
                x += eps_plus
                a -= 1
            else:
                x += eps_minus
                b -= 1
            if x > 1.0 or x < -1.0:
                exits[i] = 1 if x > 1.0 else -1
                if not reinject:
                    break
                x = offset * (2.0 * u_offset[s + j] - 1.0)
        pos[i] = x
    return exits


def jump_decay(x, nu_plus, nu_minus, params: ModelParams, dt, rng, offset=None):
    """Advance agent states by ``dt``: exact decay, then the step's arrivals in sequence.

    Arrival counts are exact Poisson draws. Agents that cannot leave (-1, 1) whatever
    the order of their arrivals get the net jump at once; the rest replay their
    arrivals one by one in a uniformly random order.

    With ``offset=None`` exiting agents are not reinjected; their entry in the
    returned array is left at the exit position. Otherwise they restart uniformly
    in ``[-offset, offset]``. Returns ``(x_new, exits)`` where ``exits`` is +1 for
    a buy, -1 for a sell and 0 otherwise (the last exit if an agent exits more
    than once).
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float) * math.exp(-params.gamma * dt)
    n = x.size
    kp = rng.poisson(nu_plus * dt, n)
    km = rng.poisson(nu_minus * dt, n)
    risky = (x + kp * params.eps_plus > 1.0) | (x + km * params.eps_minus < -1.0)
    exits = np.zeros(n, dtype=np.int8)
    safe = ~risky
    x[safe] += kp[safe] * params.eps_plus + km[safe] * params.eps_minus
    idx = np.flatnonzero(risky)
    if idx.size:
        k = kp[idx] + km[idx]
        starts = np.concatenate(([0], np.cumsum(k)[:-1]))
        total = int(k.sum())
        u_order = rng.random(total)
        u_offset = rng.random(total) if offset is not None else u_order
        pos = x[idx]
        exits[idx] = _replay(pos, kp[idx], km[idx], u_order, u_offset, starts, params.eps_plus,
                             params.eps_minus, 0.0 if offset is None else float(offset),
                             offset is not None)
        x[idx] = pos
    if not np.all(np.isfinite(x)):
        raise SimulationAbort("non-finite agent state")
    return x, exits


def agent_step(pop: AgentPopulation, rates, dt: float):
    """One step of the whole population with reinjection; returns ``(pop, (buys, sells))``."""
    if pop.params.gamma * dt >= 1.0:
        raise ValueError(f"gamma*dt = {pop.params.gamma * dt} must be < 1")
    nu_p, nu_m = nu_rates(pop.params, *rates)
    x, exits = jump_decay(pop.states, nu_p, nu_m, pop.params, dt, pop.rng, offset=pop.offset)
    buys, sells = int((exits > 0).sum()), int((exits < 0).sum())
    pop.states = x
    pop.buys += buys
    pop.sells += sells
    pop.steps_in_window += 1
    return pop, (buys, sells)


def report_rates(pop: AgentPopulation, elapsed: float) -> RateReport:
    """Buys and sells per unit time per agent over the window; resets the counters."""
    if not elapsed > 0:
        raise ValueError(f"elapsed time must be positive, got {elapsed}")
    rep = RateReport(pop.buys / (pop.n_total * elapsed), pop.sells / (pop.n_total * elapsed))
    pop.buys = pop.sells = pop.steps_in_window = 0
    pop.rates = rep
    return rep


def density_histogram(pop: AgentPopulation, bin_edges) -> np.ndarray:
    edges = np.asarray(bin_edges, dtype=float)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    counts, _ = np.histogram(pop.states, bins=edges)
    return counts / (pop.n_total * np.diff(edges))


def sample_population(density, bin_edges, n_total, params, rng, **kw) -> AgentPopulation:
    """Population drawn from a binned density profile (counts by largest remainder)."""
    from .lifting import agents_from_bins

    _, positions, _ = agents_from_bins(density, None, n_total, rng, bin_edges=bin_edges)
    return AgentPopulation(positions, params, rng, n_total, **kw)


def run_population(pop: AgentPopulation, dt: float, n_steps: int, rate_log=None) -> AgentPopulation:
    """Advance with mean-field feedback; rates are refreshed every ``pop.window`` steps."""
    for _ in range(n_steps):
        agent_step(pop, pop.rates, dt)
        if pop.steps_in_window >= pop.window:
            rep = report_rates(pop, pop.window * dt)
            if rate_log is not None:
                rate_log.append(rep)
    return pop


@dataclass
class EnsembleResult:
    """Final histograms of every replica and their rate histories."""

    bin_edges: np.ndarray
    histograms: np.ndarray  # (n_realizations, n_bins)
    times: np.ndarray
    rates: np.ndarray  # (n_realizations, n_reports, 2)

    @property
    def mean(self) -> np.ndarray:
        return self.histograms.mean(axis=0)

    @property
    def standard_error(self) -> np.ndarray:
        """Per-bin standard error of the replica mean."""
        r = self.histograms.shape[0]
        if r < 2:
            return np.full(self.histograms.shape[1], np.nan)
        return self.histograms.std(axis=0, ddof=1) / math.sqrt(r)


def replica_rng(seed: int, replica: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replica,)))


def _one_replica(args):
    (density, edges, params, n_total, dt, n_steps, seed, r, offset, window, hist_edges,
     initial_rates) = args
    rng = replica_rng(seed, r)
    pop = sample_population(density, edges, n_total, params, rng, offset=offset, window=window)
    pop.rates = RateReport(*initial_rates)
    log = []
    run_population(pop, dt, n_steps, log)
    return density_histogram(pop, hist_edges), np.array([tuple(x) for x in log]).reshape(-1, 2)


def run_ensemble(density, bin_edges, params: ModelParams, n_total: int, n_realizations: int, dt: float,
                 n_steps: int, seed: int = 0, offset: float = 1e-3, window: int = 1, hist_edges=None,
                 initial_rates=(0.0, 0.0), workers: int = 1) -> EnsembleResult:
    """Independent full-domain replicas started from one binned density profile.

    Replica ``r`` draws everything from ``SeedSequence(seed, spawn_key=(r,))``, so
    results do not depend on ``workers``.
    """
    if n_realizations < 1:
        raise ValueError("need at least one realization")
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    hist_edges = np.asarray(bin_edges if hist_edges is None else hist_edges, dtype=float)
    jobs = [(density, bin_edges, params, n_total, dt, n_steps, seed, r, offset, window, hist_edges,
             initial_rates) for r in range(n_realizations)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            out = list(pool.map(_one_replica, jobs))
    else:
        out = [_one_replica(j) for j in jobs]
    hists = np.array([h for h, _ in out])
    rates = np.array([r for _, r in out])
    times = dt * window * np.arange(1, rates.shape[1] + 1)
    return EnsembleResult(hist_edges, hists, times, rates)
