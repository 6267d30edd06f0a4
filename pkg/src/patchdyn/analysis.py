"""Error norms against a fine reference, log-log order fits and the two-limit order study."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.interpolate import CubicSpline

from .engine import FVBackend, PatchRunConfig, macro_from_profile, run_patch_dynamics, steps_for
from .fokker_planck import (FIG4_PARAMS, GAUSSIAN_IC, FvState, ModelParams, gaussian_average,
                            gaussian_state, run_to_time)
from .grid import MacroState, PatchGeometry, build_geometry

REF_CELLS = 963
STUDY_T = 0.086
STUDY_N = (11, 15, 21, 31, 41, 61)


def footprint_average(ref: FvState, lo, hi, method: str = "overlap"):
    """Average of the reference density over ``[lo, hi]``.

    Both methods interpolate the cumulative mass, which is exact at cell edges, so
    averages over footprints tiling [-1, 1] always carry the reference mass.
    ``overlap`` treats the density as constant per cell (exact partial-cell
    weights); ``spline`` interpolates the cumulative mass with a cubic spline,
    which stays accurate on footprints narrower than a reference cell.
    """
    cum = np.concatenate(([0.0], np.cumsum(ref.cells) * ref.dx_f))
    edges = ref.edges
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if method == "overlap":
        m = lambda x: np.interp(x, edges, cum)
    elif method == "spline":
        m = CubicSpline(edges, cum)
    else:
        raise ValueError(f"unknown averaging method {method!r}")
    return (m(hi) - m(lo)) / (hi - lo)


def reference_macro(ref: FvState, geom: PatchGeometry, method: str = "overlap") -> MacroState:
    return macro_from_profile(geom, lambda lo, hi: footprint_average(ref, lo, hi, method), ref.time)


def l2_errors(patch: MacroState, reference: FvState, geom: PatchGeometry,
              method: str = "overlap") -> tuple[float, float]:
    """Root-mean-square differences of the tooth and gap averages from the reference."""
    patch.check(geom)
    ref = reference_macro(reference, geom, method)
    err_t = math.sqrt(np.mean((patch.teeth - ref.teeth) ** 2))
    err_g = math.sqrt(np.mean((patch.gaps - ref.gaps) ** 2))
    return err_t, err_g


@dataclass
class LogLogFit:
    slope: float
    intercept: float
    ci95: tuple[float, float]
    r_squared: float


def fit_loglog(points) -> LogLogFit:
    """Least-squares line through ``(log x, log y)`` with a t-based 95% interval on the slope."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 points for a log-log fit")
    if np.any(pts <= 0):
        raise ValueError("log-log fit needs positive x and y")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(lx) == 0:
        raise ValueError("all x values are equal")
    n = lx.size
    xm, ym = lx.mean(), ly.mean()
    sxx = np.sum((lx - xm) ** 2)
    slope = float(np.sum((lx - xm) * (ly - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = ly - (intercept + slope * lx)
    sst = np.sum((ly - ym) ** 2)
    ssr = float(np.sum(resid**2))
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    se = math.sqrt(ssr / (n - 2) / sxx)
    half = float(stats.t.ppf(0.975, n - 2)) * se
    return LogLogFit(slope, intercept, (slope - half, slope + half), float(r2))


def steady_state_compare(a, b) -> tuple[float, float]:
    """RMS and max-abs difference of two profiles on common footprints."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"profile shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(math.sqrt(np.mean(d * d))), float(np.max(np.abs(d)))


def tooth_errors(patch: MacroState, reference: FvState, geom: PatchGeometry, method: str = "overlap"):
    """Tooth averages minus the reference averaged over each tooth."""
    tl, tr = geom.tooth_bounds
    return patch.teeth - footprint_average(reference, tl, tr, method)


def coarse_errors(coarse: FvState, reference: FvState, method: str = "overlap"):
    """Coarse cell averages minus the reference averaged over each coarse cell."""
    e = coarse.edges
    return coarse.cells - footprint_average(reference, e[:-1], e[1:], method)


def histogram_discrepancy(mean, stderr, reference) -> tuple[float, float]:
    """RMS of ``mean - reference`` and RMS of the per-bin standard errors."""
    d = np.asarray(mean, dtype=float) - np.asarray(reference, dtype=float)
    se = np.asarray(stderr, dtype=float)
    return float(math.sqrt(np.mean(d * d))), float(math.sqrt(np.mean(se * se)))


@dataclass
class OrderStudyRow:
    n_cells: int
    dx: float
    err_teeth: float
    err_gaps: float


@dataclass
class OrderStudyResult:
    limit: int
    rows: list
    teeth: LogLogFit
    gaps: LogLogFit
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StudySetup:
    """Settings shared by every case of an order study."""

    params: ModelParams = FIG4_PARAMS
    ic: tuple = GAUSSIAN_IC
    t_end: float = STUDY_T
    ref_cells: int = REF_CELLS
    ref_steps: int = 10000
    # limit 1 has one-bin teeth whose boundary units are stiff; M = 90 is unstable there
    m_limit1: int = 24
    m_limit2: int = 90
    limit2_alpha: float = 0.1
    limit2_bins: int = 10
    micro_factor: float = 2.0
    ref_averaging: str = "spline"

    def m_project(self, limit: int) -> int:
        return self.m_limit1 if limit == 1 else self.m_limit2


def study_geometry(limit: int, n_cells: int, setup: StudySetup = StudySetup()) -> PatchGeometry:
    """Limit 1: one tooth = one reference bin, buffers as wide as the tooth.
    Limit 2: fixed unit-to-cell ratio with ``limit2_bins`` bins per tooth and buffer."""
    if limit == 1:
        alpha = 3.0 * (2.0 / setup.ref_cells) / (2.0 / n_cells)
        return build_geometry(n_cells, alpha, 1, 1)
    if limit == 2:
        return build_geometry(n_cells, setup.limit2_alpha, setup.limit2_bins, setup.limit2_bins)
    raise ValueError(f"limit must be 1 or 2, got {limit}")


def study_config(geom: PatchGeometry, m_project: int, setup: StudySetup = StudySetup()) -> tuple[PatchRunConfig, int]:
    """Micro step no larger than ``micro_factor * h**2`` chosen so the run lands on ``t_end``."""
    chunk = (m_project + 1) * geom.n_b
    n_outer = math.ceil(setup.t_end / (chunk * setup.micro_factor * geom.h_fine**2) - 1e-9)
    dt = setup.t_end / (n_outer * chunk)
    cfg = PatchRunConfig(dt_micro=dt, n_b_steps=geom.n_b, m_project=m_project)
    steps_for(setup.t_end, cfg.big_dt)
    return cfg, n_outer


def reference_solution(setup: StudySetup = StudySetup()) -> FvState:
    ref0 = gaussian_state(setup.ref_cells, setup.params, setup.ic)
    return run_to_time(ref0, setup.params, setup.t_end / setup.ref_steps, setup.t_end)


def patch_case(limit: int, n_cells: int, setup: StudySetup = StudySetup()) -> MacroState:
    geom = study_geometry(limit, n_cells, setup)
    cfg, n_outer = study_config(geom, setup.m_project(limit), setup)
    init = macro_from_profile(geom, lambda lo, hi: gaussian_average(lo, hi, *setup.ic))
    traj = run_patch_dynamics(init, geom, setup.params, FVBackend(geom, setup.params), cfg, n_outer,
                              record_every=n_outer)
    return traj.states[-1]


def run_order_study(limit: int, n_list=STUDY_N, setup: StudySetup = StudySetup(),
                    reference: FvState | None = None, workers: int = 1) -> OrderStudyResult:
    n_list = sorted(int(n) for n in n_list)
    if len(n_list) < 3:
        raise ValueError("an order study needs at least 3 values of N")
    ref = reference_solution(setup) if reference is None else reference
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            finals = list(pool.map(patch_case, [limit] * len(n_list), n_list, [setup] * len(n_list)))
    else:
        finals = [patch_case(limit, n, setup) for n in n_list]
    rows = []
    for n, final in zip(n_list, finals):
        geom = study_geometry(limit, n, setup)
        et, eg = l2_errors(final, ref, geom, setup.ref_averaging)
        rows.append(OrderStudyRow(n, geom.dx, et, eg))
    teeth = fit_loglog([(r.dx, r.err_teeth) for r in rows])
    gaps = fit_loglog([(r.dx, r.err_gaps) for r in rows])
    meta = {"limit": limit, "t_end": setup.t_end, "ref_cells": setup.ref_cells,
            "ref_steps": setup.ref_steps, "m_project": setup.m_project(limit),
            "micro_factor": setup.micro_factor, "ref_averaging": setup.ref_averaging}
    if limit == 2:
        meta.update(alpha=setup.limit2_alpha, bins=setup.limit2_bins)
    return OrderStudyResult(limit, rows, teeth, gaps, meta)
