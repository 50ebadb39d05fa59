import numpy as np
import pytest

from bsq.cli import EXIT_BLOWUP, EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main
from bsq.io import load_trajectory, read_csv

BASE = """
[physics]
nu1 = 1.0
nu2 = 1.0
g = 1.0
[truncation]
n_trunc = 3
[integration]
dt = 0.02
T = 0.4
[noise]
realizations = 2
"""


def run(tmp_path, text, sub, *extra, name="cfg.ini"):
    cfg = tmp_path / name
    cfg.write_text(text)
    out = tmp_path / f"out-{sub}-{len(list(tmp_path.iterdir()))}"
    return main([sub, "--config", str(cfg), "--out", str(out), *extra]), out


def test_span_defaults_cover(tmp_path):
    code, out = run(tmp_path, BASE + "[probe]\nN = 3\n", "span")
    assert code == EXIT_OK
    head, cols, rows = read_csv(out / "span.csv")
    assert "covered=True" in head
    assert not [r for r in rows if r[0] == "uncovered"]


def test_span_negative_control_fails(tmp_path):
    code, out = run(tmp_path, BASE.replace("g = 1.0", "g = 1.0\nforcing = (2,0) (0,2)") + "[probe]\nN = 1\n",
                    "span")
    assert code == EXIT_CHECK
    assert (out / "PARTIAL").exists()


def test_simulate_is_byte_identical(tmp_path):
    c1, o1 = run(tmp_path, BASE, "simulate")
    c2, o2 = run(tmp_path, BASE, "simulate")
    assert c1 == c2 == EXIT_OK
    for f in sorted(o1.glob("*.bsq1")):
        assert f.read_bytes() == (o2 / f.name).read_bytes()
    traj = load_trajectory(o1 / "trajectory_r0001.bsq1")
    assert traj.steps == 20 and np.any(traj.states[-1])


def test_simulate_parallel_matches_serial(tmp_path, monkeypatch):
    _, o1 = run(tmp_path, BASE, "simulate")
    monkeypatch.setenv("BSQ_WORKERS", "2")
    _, o2 = run(tmp_path, BASE, "simulate")
    for f in sorted(o1.glob("*.bsq1")):
        a, b = load_trajectory(f).states, load_trajectory(o2 / f.name).states
        assert np.max(np.abs(a - b)) <= 1e-12


def test_seed_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("BSQ_SEED", "17")
    _, out = run(tmp_path, BASE, "simulate")
    head, _, _ = read_csv(out / "simulate.csv")
    assert "seed=17" in head
    assert load_trajectory(out / "trajectory_r0000.bsq1").noise_seed == 17
    _, out = run(tmp_path, BASE, "simulate", "--seed", "5")
    assert "seed=5" in read_csv(out / "simulate.csv")[0]


def test_brackets_verify_small(tmp_path):
    code, out = run(tmp_path, BASE + "[probe]\njmax = 1\n", "brackets-verify")
    assert code == EXIT_OK
    head, cols, rows = read_csv(out / "brackets.csv")
    assert "ratio_in_band" in cols and rows


def test_invalid_config_exit_code(tmp_path, capsys):
    code, _ = run(tmp_path, BASE.replace("g = 1.0", "g = 0.0"), "simulate")
    assert code == EXIT_CONFIG
    assert "coupling hypothesis" in capsys.readouterr().err
    with pytest.raises(SystemExit) as err:
        main(["nonsense", "--config", "x"])
    assert err.value.code == EXIT_CONFIG


def test_blowup_exit_code(tmp_path):
    text = BASE.replace("nu1 = 1.0", "nu1 = 0.001").replace("nu2 = 1.0", "nu2 = 0.001")
    text = text.replace("g = 1.0", "g = 1.0\namplitude = 1e7").replace("T = 0.4", "T = 4.0").replace("dt = 0.02", "dt = 0.5")
    code, out = run(tmp_path, text, "simulate")
    assert code == EXIT_BLOWUP
    assert "stopped" in (out / "PARTIAL").read_text()


def test_malliavin_probe_writes_csv(tmp_path):
    text = BASE.replace("realizations = 2", "realizations = 1") + "[probe]\nburn_in = 0.4\nN = 1\n"
    text = text.replace("T = 0.4", "T = 1.0")
    code, out = run(tmp_path, text, "malliavin-probe")
    head, cols, rows = read_csv(out / "malliavin.csv")
    assert cols[:3] == ["realization", "alpha", "N"] and len(rows) == 1
    assert code == (EXIT_OK if float(rows[0][3]) > 0 else EXIT_CHECK)


def test_cascade_and_control_decay(tmp_path):
    code, out = run(tmp_path, BASE, "cascade")
    assert code == EXIT_OK and (out / "cascade.csv").exists()
    text = BASE.replace("nu1 = 1.0", "nu1 = 5.0").replace("nu2 = 1.0", "nu2 = 5.0") + "[probe]\nK = 2\nburn_in = 0.2\n"
    code, out = run(tmp_path, text, "control-decay")
    assert code == EXIT_OK
    assert "contraction=" in read_csv(out / "control_decay.csv")[0]
