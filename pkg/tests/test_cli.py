import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from opll.cli import main
from opll.csvio import SCHEMAS, read_columns, read_header, write_columns

QUIET = """
[run]
seed = 3
duration_s = {duration}
record_every = 10

[beat]
f_beat_hz = 6.9e9
{f_ref}

[pfd]
n_div = 96
r_div = 3
floor_enabled = false

[laser.noise]

[reference]
enabled = false
"""

NOISY = """
[run]
seed = 3
duration_s = 1.0e-3
record_every = 10

[beat]
f_beat_hz = 6.9e9

[pfd]
n_div = 96
r_div = 3

[reference]
offsets_hz = [1.0e2, 1.0e3, 1.0e4, 1.0e5, 1.0e6]
dbc = [-75.0, -85.0, -96.0, -111.0, -131.0]
"""


def _config(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _manifest(out):
    lines = (Path(out) / "manifest.txt").read_text().splitlines()
    return dict(line.split("=", 1) for line in lines)


def _summary(out):
    return np.genfromtxt(Path(out) / "summary.csv", delimiter=",", names=True)


def test_simulate_locks_and_writes_outputs(tmp_path):
    cfg = _config(tmp_path, QUIET.format(duration=1e-3, f_ref="f_ref_hz = 215.625e6"))
    out = tmp_path / "run"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    man = _manifest(out)
    assert man["locked"] == "true"
    assert float(man["lock_flag_time_s"]) > 0
    assert man["seed"] == "3"
    assert len(man["config_sha256"]) == 64
    assert int(man["outputs"]) == 3
    for i in range(3):
        assert (out / man[f"output.{i}"]).exists()
    assert read_header(out / "phase_error.csv") == SCHEMAS["phase"]
    assert read_header(out / "drives.csv") == SCHEMAS["drives"]
    t, err = read_columns(out / "phase_error.csv", SCHEMAS["phase"])
    assert t.size == 200_000 // 10
    assert np.max(np.abs(err[-100:])) < 1e-3


def test_simulate_is_byte_identical(tmp_path):
    cfg = _config(tmp_path, QUIET.format(duration=3e-4, f_ref=""))
    for name in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / name), "--seed-override", "11"]) == 0
    for csv in ("beat_phase.csv", "phase_error.csv", "drives.csv"):
        assert (tmp_path / "a" / csv).read_bytes() == (tmp_path / "b" / csv).read_bytes()
    assert _manifest(tmp_path / "a")["seed"] == "11"


def test_simulate_lock_condition_mismatch(tmp_path, capsys):
    cfg = _config(tmp_path, QUIET.format(duration=1e-3, f_ref="f_ref_hz = 217.78e6"))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x")]) == 1
    assert "lock condition" in capsys.readouterr().err


def test_simulate_bad_toml(tmp_path, capsys):
    cfg = _config(tmp_path, "[run\nseed = 1\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x")]) == 1
    assert "error" in capsys.readouterr().err


def test_simulate_unknown_key_names_section(tmp_path, capsys):
    cfg = _config(tmp_path, "[pfd]\nn_dvi = 96\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x")]) == 1
    assert "pfd" in capsys.readouterr().err


def test_simulate_not_locked_exit_code(tmp_path):
    # shorter than the lock detector window
    cfg = _config(tmp_path, QUIET.format(duration=5e-5, f_ref=""))
    out = tmp_path / "x"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 2
    assert _manifest(out)["locked"] == "false"


def test_missing_config_file(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "x")]) == 1


def test_usage_errors_exit_one():
    assert main([]) == 1
    assert main(["analyze", "--mode", "bogus", "--input", "x", "--out", "y"]) == 1


# --- analyze ----------------------------------------------------------------


def _phase_csv(path, phi, fs):
    t = np.arange(phi.size) / fs
    write_columns(path, SCHEMAS["phase"], [t, phi])
    return str(path)


def test_analyze_eq1(tmp_path):
    fs, n = 1e6, 2**16
    phi = 2 * math.pi * 2e4 * np.arange(n) / fs + np.random.default_rng(0).normal(0, math.sqrt(0.08), n)
    src = _phase_csv(tmp_path / "phase.csv", phi, fs)
    out = tmp_path / "eq1"
    assert main(["analyze", "--input", src, "--mode", "eq1", "--out", str(out)]) == 0
    assert float(_manifest(out)["phase_var"]) == pytest.approx(0.08, rel=0.1)
    assert (out / "eq1.csv").exists()


def test_analyze_eq1_sa_trace(tmp_path):
    f = np.linspace(-1e6, 1e6, 201)
    p = np.full(f.size, -200.0)
    p[100] = 0.0
    src = tmp_path / "sa.csv"
    write_columns(src, SCHEMAS["sa_trace"], [f, p])
    assert main(["analyze", "--input", str(src), "--mode", "eq1", "--out", str(tmp_path / "o")]) == 1
    assert main(["analyze", "--input", str(src), "--mode", "eq1", "--out", str(tmp_path / "o"), "--rbw-hz", "1e4"]) == 0
    assert float(_manifest(tmp_path / "o")["phase_var"]) < 1e-12


def test_analyze_mvar_ramp(tmp_path):
    fs = 1e4
    phi = 2 * math.pi * 3.84 * np.arange(20_000) / fs
    src = _phase_csv(tmp_path / "phase.csv", phi, fs)
    out = tmp_path / "mvar"
    assert main(["analyze", "--input", src, "--mode", "mvar", "--out", str(out)]) == 1
    assert main(["analyze", "--input", src, "--mode", "mvar", "--out", str(out), "--nu0-hz", "6.9e9"]) == 0
    taus, mdev = read_columns(out / "mvar.csv", SCHEMAS["mvar"])
    assert taus.size == int(_manifest(out)["n_taus"])
    assert np.all(mdev < 1e-15)


def test_analyze_psd_tone_peak(tmp_path):
    fs, n = 1e6, 2**15
    phi = 0.1 * np.sin(2 * math.pi * 12_500 * np.arange(n) / fs)
    src = _phase_csv(tmp_path / "phase.csv", phi, fs)
    out = tmp_path / "psd"
    assert main(["analyze", "--input", src, "--mode", "psd", "--out", str(out), "--seg-len", "4096"]) == 0
    assert float(_manifest(out)["peak_hz"]) == pytest.approx(12_500, abs=fs / 4096)
    f, psd = read_columns(out / "psd.csv", SCHEMAS["psd"])
    assert np.sum(psd) * (f[1] - f[0]) == pytest.approx(0.005, rel=0.02)


def test_analyze_rms(tmp_path):
    fs = 1e7
    x = np.random.default_rng(2).normal(0, 1.0, 2**17)
    src = _phase_csv(tmp_path / "phase.csv", x, fs)
    out = tmp_path / "rms"
    assert main(["analyze", "--input", src, "--mode", "rms", "--out", str(out), "--rate-hz", "1e6"]) == 0
    assert float(_manifest(out)["phase_var"]) == pytest.approx(0.1, rel=0.05)


def test_analyze_schema_mismatch(tmp_path, capsys):
    src = tmp_path / "drives.csv"
    write_columns(src, SCHEMAS["drives"], [np.arange(10.0), np.zeros(10), np.zeros(10)])
    assert main(["analyze", "--input", str(src), "--mode", "psd", "--out", str(tmp_path / "o")]) == 1
    assert "drives.csv" in capsys.readouterr().err


def test_analyze_nonuniform_time(tmp_path):
    src = tmp_path / "p.csv"
    write_columns(src, SCHEMAS["phase"], [np.array([0.0, 1.0, 3.0, 4.0]), np.zeros(4)])
    assert main(["analyze", "--input", str(src), "--mode", "rms", "--out", str(tmp_path / "o")]) == 1


# --- sweep ------------------------------------------------------------------


def test_sweep_empty_values(tmp_path):
    cfg = _config(tmp_path, NOISY)
    out = tmp_path / "s"
    assert main(["sweep", "--config", cfg, "--axis", "pfd.n_div", "--values", "", "--out", str(out)]) == 0
    man = _manifest(out)
    assert man["n_values"] == "0"
    assert (out / "summary.csv").read_text().startswith("value,phase_var,phase_var_eq1,locked")


@pytest.mark.parametrize(
    "axis,values",
    [("pfd.n_div", "96,abc"), ("pfd.nope", "1"), ("beat", "1"), ("pfd.floor_enabled", "1"), ("pfd.n_div", "nan")],
)
def test_sweep_rejects_bad_axis_or_values(tmp_path, axis, values):
    cfg = _config(tmp_path, NOISY)
    assert main(["sweep", "--config", cfg, "--axis", axis, "--values", values, "--out", str(tmp_path / "s")]) == 1


def test_sweep_threads_env_validated(tmp_path, monkeypatch):
    cfg = _config(tmp_path, NOISY)
    monkeypatch.setenv("OPLL_THREADS", "zero")
    assert main(["sweep", "--config", cfg, "--axis", "pfd.n_div", "--values", "", "--out", str(tmp_path / "s")]) == 1


def test_sweep_divider_ratio_raises_noise(tmp_path, monkeypatch):
    monkeypatch.setenv("OPLL_THREADS", "3")
    cfg = _config(tmp_path, NOISY)
    out = tmp_path / "s"
    assert main(["sweep", "--config", cfg, "--axis", "pfd.n_div", "--values", "384,96,192", "--out", str(out)]) == 0
    rows = _summary(out)
    assert list(rows["value"]) == [96, 192, 384]
    assert np.all(rows["locked"] == 1)
    assert np.all(np.diff(rows["phase_var"]) > 0)
    assert _manifest(out)["threads"] == "3"


def test_sweep_reference_level_ordering(tmp_path):
    cfg = _config(tmp_path, NOISY)
    out = tmp_path / "s"
    assert main(["sweep", "--config", cfg, "--axis", "reference.level_dbc", "--values=-90,-115", "--out", str(out)]) == 0
    rows = _summary(out)
    assert list(rows["value"]) == [-115, -90]
    assert rows["phase_var"][0] < rows["phase_var"][1]


# --- entry points -----------------------------------------------------------


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    assert all(line.startswith("PASS") for line in lines)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "opll", "--version"], capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert res.stdout.strip().startswith("opll ")


def test_shipped_configs_validate():
    from opll.config import load_config
    from opll.simengine import validate

    for path in sorted(Path(__file__).resolve().parents[1].joinpath("configs").glob("*.toml")):
        cfg, _ = load_config(path)
        validate(cfg)


def test_reference_bandwidth_key_and_axis():
    from opll.config import config_from_dict, parse_text, set_dotted

    data = parse_text(NOISY.replace("dbc = [", "bandwidth_hz = 3.0e6\ndbc = ["))
    cfg = config_from_dict(data)
    assert cfg.ref_noise_bandwidth == 3.0e6
    swept = config_from_dict(set_dotted(data, "reference.bandwidth_hz", 5.0e6))
    assert swept.ref_noise_bandwidth == 5.0e6
    assert swept.ref_noise == cfg.ref_noise
    assert config_from_dict(parse_text("[reference]\nbandwidth_hz = 1.0e6\n")).ref_noise is None
