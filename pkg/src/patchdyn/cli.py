"""Experiment runner.

Usage::

    patchdyn run-patch --config fig4.preset --out results/
    patchdyn order-study --limit 1

Configs are flat ``key = value`` files with ``#`` comments. A bare preset name
(``fig4.preset``) is looked up among the bundled presets when no such file
exists, and a ``manifest.json`` written by an earlier run is accepted as well.
Every subcommand writes its CSV files plus ``manifest.json`` into the output
directory (``--out``, else ``$PATCHDYN_OUT``, else ``./patchdyn-out``).

Exit status: 0 on success, 2 on an invalid configuration, 1 on a runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .agents import run_ensemble
from .analysis import (STUDY_N, STUDY_T, StudySetup, coarse_errors, run_order_study, steady_state_compare,
                       tooth_errors)
from .engine import (AgentBackend, FVBackend, PatchRunConfig, macro_from_profile, run_patch_dynamics,
                     run_patch_to_steady)
from .errors import SimulationAbort
from .fokker_planck import (FvState, ModelParams, advance, gaussian_average, gaussian_state, run_to_steady,
                            self_consistent_rates, sigma2_of, stable_dt, steps_to)
from .grid import build_geometry
from .lifting import BatchLifter

log = logging.getLogger("patchdyn")

COMMANDS = ("run-fv", "run-agents", "run-patch", "order-study", "steady-compare")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class RunConfig:
    """Every knob of every subcommand. Defaults match the ``fig4`` continuum preset."""

    # model
    gamma: float = 1.0
    eps_plus: float = 0.075
    eps_minus: float = -0.072
    nu_ex_plus: float = 20.0
    nu_ex_minus: float = 20.0
    g: float = 40.0
    # initial condition a*exp(-((x-b)/c)**2)
    ic_a: float = 1.811
    ic_b: float = 0.01545
    ic_c: float = 0.3115
    # geometry
    n_cells: int = 41
    alpha: float = 0.1
    n_t: int = 10
    n_b: int = 10
    # patch dynamics
    backend: str = "fv"
    dt_micro: float | None = None  # default: dt_micro_factor * h_fine**2
    dt_micro_factor: float = 4.0
    n_b_steps: int | None = None  # default: n_b (finite-volume backend)
    m_project: int = 90
    n_outer: int = 100
    record_every: int = 1
    feedback: str = "frozen"
    # agents
    n_agents: int = 100000
    n_realizations: int = 1
    offset: float | None = None  # default: h_fine / 2
    window: int = 1
    agent_dt: float = 1.0
    hist_bins: int = 40
    # full-domain finite volumes
    fine_cells: int = 1271
    fine_dt_factor: float = 2.0
    steady_tol: float = 1e-9
    # order study
    limit: int = 1
    study_n: tuple = STUDY_N
    ref_cells: int = 963
    ref_steps: int = 10000
    m_limit1: int = 24
    m_limit2: int = 90
    limit2_alpha: float = 0.1
    limit2_bins: int = 10
    micro_factor: float = 2.0
    ref_averaging: str = "spline"
    # run control
    t_end: float | None = None
    seed: int = 0
    workers: int = 1

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.gamma, self.eps_plus, self.eps_minus, self.nu_ex_plus, self.nu_ex_minus, self.g)

    @property
    def ic(self) -> tuple:
        return (self.ic_a, self.ic_b, self.ic_c)

    def geometry(self):
        return build_geometry(self.n_cells, self.alpha, self.n_t, self.n_b)

    def patch_config(self) -> PatchRunConfig:
        geom = self.geometry()
        dt = self.dt_micro if self.dt_micro is not None else self.dt_micro_factor * geom.h_fine**2
        n_steps = self.n_b_steps if self.n_b_steps is not None else geom.n_b
        return PatchRunConfig(dt_micro=dt, n_b_steps=n_steps, m_project=self.m_project,
                              n_realizations=self.n_realizations, seed=self.seed, feedback=self.feedback)

    def run_length(self) -> tuple[int, float]:
        """Outer steps and end time of a patch run; ``t_end`` is rounded up to whole outer steps."""
        big = self.patch_config().big_dt
        if self.t_end is None:
            return self.n_outer, self.n_outer * big
        n = math.ceil(self.t_end / big * (1 - 1e-12)) if self.t_end > 0 else 0
        return n, n * big

    def study_setup(self) -> StudySetup:
        return StudySetup(params=self.params, ic=self.ic,
                          t_end=STUDY_T if self.t_end is None else self.t_end,
                          ref_cells=self.ref_cells, ref_steps=self.ref_steps, m_limit1=self.m_limit1,
                          m_limit2=self.m_limit2, limit2_alpha=self.limit2_alpha,
                          limit2_bins=self.limit2_bins, micro_factor=self.micro_factor,
                          ref_averaging=self.ref_averaging)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, text: str):
    kind = str(_FIELDS[name].type)
    text = text.strip()
    if "None" in kind and text.lower() in ("none", ""):
        return None
    if name == "study_n":
        return tuple(int(v) for v in text.replace(",", " ").split())
    if kind.startswith("int"):
        v = float(text)
        if v != int(v):
            raise ValueError(f"expected an integer, got {text!r}")
        return int(v)
    if kind.startswith("float"):
        return float(text)
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; problems are collected rather than raised one at a time."""
    values, problems = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            problems.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _convert(key, val)
        except ValueError as exc:
            problems.append(f"{source}:{lineno}: {key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return values


def _preset_path(name: str):
    return resources.files("patchdyn").joinpath("presets", name)


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if p.exists():
            text = p.read_text()
        else:
            preset = _preset_path(p.name)
            if not preset.is_file():
                raise ConfigError([f"config file {path!r} not found (and no bundled preset of that name)"])
            text = preset.read_text()
        if p.suffix == ".json":
            raw = json.loads(text).get("config", {})
            unknown = sorted(set(raw) - set(_FIELDS))
            if unknown:
                raise ConfigError([f"unknown manifest keys: {', '.join(unknown)}"])
            values = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
        else:
            values = parse_config_text(text, str(path))
    values.update(overrides or {})
    cfg = RunConfig(**values)
    problems = validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: RunConfig) -> list[str]:
    """All violated preconditions of the modules the config feeds."""
    problems = []

    def attempt(fn):
        try:
            return fn()
        except (ValueError, SimulationAbort) as exc:
            problems.extend(str(exc).split("; "))
            return None

    params = attempt(lambda: cfg.params)
    geom = attempt(cfg.geometry)
    if cfg.backend not in ("fv", "agent"):
        problems.append(f"backend must be 'fv' or 'agent', got {cfg.backend!r}")
    if cfg.backend == "agent" and cfg.n_b_steps is None:
        problems.append("the agent backend needs an explicit n_b_steps")
    pcfg = None
    if geom is not None and not problems:
        pcfg = attempt(cfg.patch_config)
    if pcfg is not None and geom is not None and params is not None:
        if cfg.backend == "fv":
            if pcfg.n_b_steps > geom.n_b:
                problems.append(f"n_b_steps = {pcfg.n_b_steps} exceeds the buffer of {geom.n_b} bins")
            init = attempt(lambda: self_consistent_rates(params, *_boundary_ratios(cfg, geom)))
            if init is not None:
                limit = geom.h_fine**2 / sigma2_of(params, init)
                if pcfg.dt_micro > limit:
                    problems.append(f"dt_micro = {pcfg.dt_micro:.4g} exceeds the micro stability bound {limit:.4g}")
        if params.gamma * pcfg.dt_micro >= 1:
            problems.append("gamma * dt_micro must be < 1")
    for name in ("n_agents", "n_realizations", "window", "hist_bins", "workers", "record_every",
                 "ref_steps", "limit2_bins"):
        if getattr(cfg, name) < 1:
            problems.append(f"{name} must be >= 1")
    for name in ("agent_dt", "dt_micro_factor", "fine_dt_factor", "steady_tol", "micro_factor",
                 "limit2_alpha", "ic_c"):
        if not getattr(cfg, name) > 0:
            problems.append(f"{name} must be > 0")
    if cfg.feedback not in ("frozen", "per-micro-step"):
        problems.append(f"feedback must be 'frozen' or 'per-micro-step', got {cfg.feedback!r}")
    if cfg.dt_micro is not None and not cfg.dt_micro > 0:
        problems.append("dt_micro must be > 0")
    if cfg.n_b_steps is not None and cfg.n_b_steps < 1:
        problems.append("n_b_steps must be >= 1")
    for name in ("n_outer", "m_project", "m_limit1", "m_limit2"):
        if getattr(cfg, name) < 0:
            problems.append(f"{name} must be >= 0")
    if cfg.offset is not None and not cfg.offset > 0:
        problems.append("offset must be > 0")
    for name in ("fine_cells", "ref_cells"):
        n = getattr(cfg, name)
        if n < 3 or n % 2 == 0:
            problems.append(f"{name} must be odd and >= 3, got {n}")
    if cfg.t_end is not None and not cfg.t_end >= 0:
        problems.append("t_end must be >= 0")
    if cfg.limit not in (1, 2):
        problems.append(f"limit must be 1 or 2, got {cfg.limit}")
    if len(cfg.study_n) < 3 or any(n < 3 or n % 2 == 0 for n in cfg.study_n):
        problems.append("study_n needs at least 3 odd values >= 3")
    if cfg.ref_averaging not in ("overlap", "spline"):
        problems.append(f"ref_averaging must be 'overlap' or 'spline', got {cfg.ref_averaging!r}")
    if not 0 <= cfg.seed < 2**64:
        problems.append("seed must fit in an unsigned 64-bit integer")
    return problems


def _boundary_ratios(cfg: RunConfig, geom):
    """Initial (left, right) density-slope proxies used to seed the feedback rates."""
    init = _initial_macro(cfg, geom)
    d_left, d_right = BatchLifter(geom).boundary_slopes(init)
    return max(0.5 * d_left, 0.0), max(-0.5 * d_right, 0.0)


def _initial_macro(cfg: RunConfig, geom):
    return macro_from_profile(geom, lambda lo, hi: gaussian_average(lo, hi, *cfg.ic))


# ---------------------------------------------------------------- output helpers

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _profile_rows(edges, values):
    edges = np.asarray(edges, dtype=float)
    for lo, hi, v in zip(edges[:-1], edges[1:], values):
        yield 0.5 * (lo + hi), hi - lo, v


def _macro_rows(state, geom):
    tl, tr = geom.tooth_bounds
    gl, gr = geom.gap_bounds
    for i, v in enumerate(state.teeth):
        yield state.time, "tooth", i, 0.5 * (tl[i] + tr[i]), tr[i] - tl[i], v
    for j, v in enumerate(state.gaps):
        yield state.time, "gap", j, 0.5 * (gl[j] + gr[j]), gr[j] - gl[j], v


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def write_manifest(out: Path, command: str, cfg: RunConfig, derived: dict, outputs):
    resolved = dataclasses.asdict(cfg)
    manifest = {
        "package": "patchdyn",
        "version": __version__,
        "command": command,
        "config": {k: _jsonable(v) for k, v in resolved.items()},
        "derived": {k: _jsonable(v) for k, v in derived.items()},
        "outputs": sorted(outputs),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _resolved(cfg: RunConfig) -> RunConfig:
    """Config with the derived defaults filled in, so the manifest replays exactly."""
    geom = cfg.geometry()
    pcfg = cfg.patch_config()
    offset = cfg.offset if cfg.offset is not None else 0.5 * geom.h_fine
    return dataclasses.replace(cfg, dt_micro=pcfg.dt_micro, n_b_steps=pcfg.n_b_steps, offset=offset)


def _fine_initial(cfg: RunConfig, n_cells: int) -> FvState:
    return gaussian_state(n_cells, cfg.params, cfg.ic)


# ---------------------------------------------------------------- subcommands

def cmd_run_fv(cfg: RunConfig, out: Path) -> dict:
    params = cfg.params
    state = _fine_initial(cfg, cfg.fine_cells)
    t_end = cfg.t_end if cfg.t_end is not None else cfg.run_length()[1]
    n, dt = steps_to(t_end, cfg.fine_dt_factor * state.dx_f**2)
    marks = sorted(set(np.linspace(0, n, min(n, 100) + 1).round().astype(int).tolist()))
    rate_rows = [(state.time, *state.rates)]
    done = 0
    for m in marks[1:]:
        state = advance(state, params, dt, m - done)
        state.time = m * dt
        done = m
        rate_rows.append((state.time, *state.rates))
    write_csv(out / "fv_density.csv", ("x_center", "width", "density"), _profile_rows(state.edges, state.cells))
    write_csv(out / "fv_rates.csv", ("t", "r_plus", "r_minus"), rate_rows)
    return {"t_end": t_end, "n_steps": n, "dt": dt, "mass": state.mass(),
            "outputs": ["fv_density.csv", "fv_rates.csv"]}


def cmd_run_agents(cfg: RunConfig, out: Path) -> dict:
    params = cfg.params
    init = _fine_initial(cfg, cfg.fine_cells)
    t_end = cfg.t_end if cfg.t_end is not None else cfg.run_length()[1]
    n, dt = steps_to(t_end, cfg.agent_dt)
    if params.gamma * dt >= 1:
        raise ConfigError(["gamma * agent_dt must be < 1"])
    hist_edges = np.linspace(-1.0, 1.0, cfg.hist_bins + 1)
    ens = run_ensemble(init.cells, init.edges, params, cfg.n_agents, cfg.n_realizations, dt, n,
                       seed=cfg.seed, offset=cfg.offset, window=cfg.window, hist_edges=hist_edges,
                       initial_rates=init.rates, workers=cfg.workers)
    header = ("x_center", "width", "density")
    write_csv(out / "agents_density.csv", header, _profile_rows(hist_edges, ens.mean))
    write_csv(out / "agents_stderr.csv", header, _profile_rows(hist_edges, ens.standard_error))
    mean_rates = ens.rates.mean(axis=0) if ens.rates.size else np.zeros((0, 2))
    write_csv(out / "agents_rates.csv", ("t", "r_plus", "r_minus"),
              ((t, rp, rm) for t, (rp, rm) in zip(ens.times, mean_rates)))
    return {"t_end": t_end, "n_steps": n, "dt": dt,
            "outputs": ["agents_density.csv", "agents_stderr.csv", "agents_rates.csv"]}


def _patch_backend(cfg: RunConfig, geom):
    if cfg.backend == "fv":
        return FVBackend(geom, cfg.params)
    return AgentBackend(geom, cfg.params, cfg.n_agents, cfg.n_realizations, cfg.seed)


def cmd_run_patch(cfg: RunConfig, out: Path) -> dict:
    geom = cfg.geometry()
    pcfg = cfg.patch_config()
    n_outer, t_end = cfg.run_length()
    init = _initial_macro(cfg, geom)
    backend = _patch_backend(cfg, geom)
    traj_path, diag_path = out / "trajectory.csv", out / "diagnostics.csv"
    with open(traj_path, "w", newline="") as ft, open(diag_path, "w", newline="") as fd:
        wt, wd = csv.writer(ft, lineterminator="\n"), csv.writer(fd, lineterminator="\n")
        wt.writerow(("t", "kind", "index", "x_center", "width", "density"))
        wd.writerow(("t", "mass", "r_plus", "r_minus", "clipped_mass"))
        for row in _macro_rows(init, geom):
            wt.writerow([_fmt(v) for v in row])

        def record(n, state, diag):
            wd.writerow([_fmt(diag[k]) for k in ("t", "mass", "r_plus", "r_minus", "clipped_mass")])
            if (n + 1) % cfg.record_every == 0 or n + 1 == n_outer:
                for row in _macro_rows(state, geom):
                    wt.writerow([_fmt(v) for v in row])

        traj = run_patch_dynamics(init, geom, cfg.params, backend, pcfg, n_outer,
                                  record_every=max(n_outer, 1), callback=record)
    return {"t_end": t_end, "n_outer": n_outer, "dx": geom.dx, "h_fine": geom.h_fine,
            "tooth_width": geom.tooth_width, "delta_t": pcfg.delta_t, "big_dt": pcfg.big_dt,
            "space_fraction": traj.space_fraction, "time_fraction": traj.time_fraction,
            "outputs": ["trajectory.csv", "diagnostics.csv"]}


def cmd_order_study(cfg: RunConfig, out: Path) -> dict:
    setup = cfg.study_setup()
    res = run_order_study(cfg.limit, cfg.study_n, setup, workers=cfg.workers)
    tag = f"limit{cfg.limit}"
    write_csv(out / f"order_study_{tag}.csv", ("N", "dx", "err_teeth", "err_gaps"),
              ((r.n_cells, r.dx, r.err_teeth, r.err_gaps) for r in res.rows))
    write_csv(out / f"fit_summary_{tag}.csv", ("target", "slope", "ci_lo", "ci_hi", "r2"),
              ((name, f.slope, f.ci95[0], f.ci95[1], f.r_squared)
               for name, f in (("teeth", res.teeth), ("gaps", res.gaps))))
    for name, f in (("teeth", res.teeth), ("gaps", res.gaps)):
        print(f"limit {cfg.limit} {name}: slope {f.slope:.3f} "
              f"(95% CI {f.ci95[0]:.3f}, {f.ci95[1]:.3f}), R^2 {f.r_squared:.4f}")
    return {**res.metadata, "outputs": [f"order_study_{tag}.csv", f"fit_summary_{tag}.csv"]}


def steady_states(cfg: RunConfig):
    """Fine FV, coarse FV (one cell per big cell, step = outer step) and patch steady states."""
    params = cfg.params
    geom = cfg.geometry()
    pcfg = cfg.patch_config()
    fine0 = _fine_initial(cfg, cfg.fine_cells)
    fine = run_to_steady(fine0, params, cfg.fine_dt_factor * fine0.dx_f**2, tol=cfg.steady_tol * 0.1)
    coarse0 = _fine_initial(cfg, cfg.n_cells)
    coarse = run_to_steady(coarse0, params, min(pcfg.big_dt, 0.9 * stable_dt(params, coarse0.dx_f, coarse0.rates)),
                           tol=cfg.steady_tol, check_every=200)
    patch = run_patch_to_steady(_initial_macro(cfg, geom), geom, params, FVBackend(geom, params), pcfg,
                                tol=cfg.steady_tol)
    return fine, coarse, patch


def cmd_steady_compare(cfg: RunConfig, out: Path) -> dict:
    if cfg.backend != "fv":
        raise ConfigError(["steady-compare supports the fv backend only"])
    geom = cfg.geometry()
    fine, coarse, patch = steady_states(cfg)
    method = cfg.ref_averaging
    e_patch = tooth_errors(patch, fine, geom, method)
    e_coarse = coarse_errors(coarse, fine, method)
    header = ("x_center", "width", "density")
    write_csv(out / "steady_fine.csv", header, _profile_rows(fine.edges, fine.cells))
    write_csv(out / "steady_coarse.csv", header, _profile_rows(coarse.edges, coarse.cells))
    write_csv(out / "steady_patch.csv", ("t", "kind", "index", "x_center", "width", "density"),
              _macro_rows(patch, geom))
    rows = [("patch_teeth", *steady_state_compare(e_patch, np.zeros_like(e_patch))),
            ("coarse_fv", *steady_state_compare(e_coarse, np.zeros_like(e_coarse)))]
    write_csv(out / "steady_errors.csv", ("scheme", "l2", "linf"), rows)
    for name, l2, linf in rows:
        print(f"{name}: rms {l2:.3e}, max {linf:.3e}")
    peak = float(fine.cells.max())
    return {"fine_time": fine.time, "coarse_time": coarse.time, "patch_time": patch.time,
            "fine_peak": peak, "outputs": ["steady_fine.csv", "steady_coarse.csv", "steady_patch.csv",
                                           "steady_errors.csv"]}


HANDLERS = {
    "run-fv": cmd_run_fv,
    "run-agents": cmd_run_agents,
    "run-patch": cmd_run_patch,
    "order-study": cmd_order_study,
    "steady-compare": cmd_steady_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchdyn", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file, bundled preset name or manifest.json")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default: $PATCHDYN_OUT or ./patchdyn-out)")
        p.add_argument("--workers", type=int)
        p.add_argument("--t-end", type=float, dest="t_end")
        p.add_argument("--limit", type=int, choices=(1, 2))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    return parser


def _overrides(args) -> dict:
    values = parse_config_text("\n".join(args.set), "--set") if args.set else {}
    for key in ("seed", "workers", "t_end", "limit"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    return values


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolved(load_config(args.config, _overrides(args)))
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return 2
    except (TypeError, ValueError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or os.environ.get("PATCHDYN_OUT") or "patchdyn-out")
    out.mkdir(parents=True, exist_ok=True)
    try:
        derived = HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return 2
    except (SimulationAbort, ValueError, FloatingPointError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return 1
    outputs = derived.pop("outputs")
    write_manifest(out, args.command, cfg, derived, outputs + ["manifest.json"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
