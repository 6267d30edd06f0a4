import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from patchdyn.cli import ConfigError, load_config, main, parse_config_text, write_csv
from patchdyn.fokker_planck import gaussian_state


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_parse_collects_every_problem():
    text = "gamma = 1\nbogus = 3\nn_cells = 4.5\nno equals sign\n# comment only\n"
    with pytest.raises(ConfigError) as err:
        parse_config_text(text, "x.cfg")
    probs = err.value.problems
    assert len(probs) == 3
    assert any("bogus" in p for p in probs) and any("x.cfg:3" in p for p in probs)
    assert parse_config_text("gamma = 2  # trailing\nstudy_n = 11, 21, 41\ndt_micro = none") == {
        "gamma": 2.0, "study_n": (11, 21, 41), "dt_micro": None}


def test_validation_is_aggregated(tmp_path, capsys):
    rc = main(["run-patch", "--out", str(tmp_path), "--set", "n_cells=40", "--set", "n_agents=0",
               "--set", "backend=gpu"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "odd" in err and "n_agents" in err and "backend" in err
    assert not (tmp_path / "manifest.json").exists()


def test_missing_config_is_a_config_error(tmp_path):
    assert main(["run-fv", "--config", str(tmp_path / "nope.preset"), "--out", str(tmp_path)]) == 2


def test_bundled_presets_load():
    c4 = load_config("fig4.preset")
    assert (c4.n_cells, c4.alpha, c4.m_project, c4.backend) == (41, 0.1, 90, "fv")
    c8 = load_config("fig8.preset")
    assert (c8.n_cells, c8.alpha, c8.backend, c8.n_realizations) == (21, 0.2, "agent", 20)
    assert c8.gamma == 1e-3 and c8.eps_plus == 2.9e-3 and c8.eps_minus == -2.89e-3


def test_run_fv_t_end_zero_writes_initial_profile(tmp_path):
    assert main(["run-fv", "--config", "fig4.preset", "--t-end", "0", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "fv_density.csv")
    assert rows[0] == ["x_center", "width", "density"]
    dens = np.array([float(r[2]) for r in rows[1:]])
    np.testing.assert_array_equal(dens, gaussian_state(1271, load_config("fig4.preset").params).cells)
    assert len(read_csv(tmp_path / "fv_rates.csv")) == 2
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "run-fv" and man["derived"]["n_steps"] == 0
    assert sorted(man["outputs"]) == ["fv_density.csv", "fv_rates.csv", "manifest.json"]


def test_manifest_replays_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run-patch", "--config", "fig4.preset", "--set", "n_outer=7", "--set", "record_every=3",
                 "--out", str(a)]) == 0
    man = json.loads((a / "manifest.json").read_text())
    assert man["config"]["dt_micro"] is not None and man["config"]["n_b_steps"] == 10
    assert man["derived"]["space_fraction"] == 0.1
    assert man["derived"]["time_fraction"] == pytest.approx(1 / 91)
    assert main(["run-patch", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    for name in ("trajectory.csv", "diagnostics.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    traj = read_csv(a / "trajectory.csv")
    times = sorted({float(r[0]) for r in traj[1:]})
    assert len(times) == 1 + 3  # initial, after 3, 6 and the final 7th outer step
    assert len(read_csv(a / "diagnostics.csv")) == 1 + 7


def test_t_end_rounds_up_to_whole_outer_steps(tmp_path):
    cfg = load_config("fig4.preset")
    big = cfg.patch_config().big_dt
    assert main(["run-patch", "--config", "fig4.preset", "--t-end", repr(2.5 * big), "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["derived"]["n_outer"] == 3
    assert man["derived"]["t_end"] == pytest.approx(3 * big)


def test_env_output_directory(tmp_path, monkeypatch):
    monkeypatch.setenv("PATCHDYN_OUT", str(tmp_path / "env"))
    assert main(["run-fv", "--config", "fig4.preset", "--t-end", "0"]) == 0
    assert (tmp_path / "env" / "fv_density.csv").exists()
    monkeypatch.delenv("PATCHDYN_OUT")
    monkeypatch.chdir(tmp_path)
    assert main(["run-fv", "--config", "fig4.preset", "--t-end", "0"]) == 0
    assert (tmp_path / "patchdyn-out" / "manifest.json").exists()


def test_runtime_abort_exit_code(tmp_path, capsys):
    # projecting 1000 steps ahead is far beyond the stable range and drives the rates to diverge
    rc = main(["run-patch", "--config", "fig4.preset", "--set", "m_project=1000", "--set", "n_outer=200",
               "--out", str(tmp_path)])
    assert rc == 1
    assert "run aborted" in capsys.readouterr().err


def test_steady_compare_rejects_agent_backend(tmp_path):
    assert main(["steady-compare", "--config", "fig8.preset", "--out", str(tmp_path)]) == 2


def test_run_agents_small(tmp_path):
    args = ["run-agents", "--config", "fig8.preset", "--set", "n_agents=2000", "--set", "n_realizations=3",
            "--set", "fine_cells=201", "--t-end", "20", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--workers", "2", "--out", str(tmp_path / "b")]) == 0
    for name in ("agents_density.csv", "agents_stderr.csv", "agents_rates.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_csv(tmp_path / "a" / "agents_density.csv")
    assert len(rows) == 1 + 40
    mass = sum(float(r[1]) * float(r[2]) for r in rows[1:])
    assert 0.9 < mass <= 1.0 + 1e-12
    assert len(read_csv(tmp_path / "a" / "agents_rates.csv")) == 1 + 4


def test_csv_floats_round_trip(tmp_path):
    vals = [0.1, 1 / 3, 1e-300, -2.5e17]
    write_csv(tmp_path / "x.csv", ("v",), ([v] for v in vals))
    back = [float(r[0]) for r in read_csv(tmp_path / "x.csv")[1:]]
    assert back == vals
    assert read_csv(tmp_path / "x.csv")[1] == ["0.1"]


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "patchdyn.cli", "run-fv", "--config", "fig4.preset", "--t-end", "0",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "patchdyn.cli", "run-fv", "--set", "gamma"],
                       capture_output=True, text=True)
    assert r.returncode == 2
