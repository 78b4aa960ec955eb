import csv
import json
import subprocess
import sys

import pytest

from fedcore.cli import BENCH_HEADER, ROUNDS_HEADER, SWEEP_HEADER, VALIDATION_HEADER, main
from fedcore.config import KEYS, parse_config
from fedcore.exceptions import ConfigError
from fedcore.svgplot import line_chart


def write_config(tmp_path, body, name="run.toml"):
    p = tmp_path / name
    p.write_text(body)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


ANALYTIC = 'backend = "analytic"\nplots = false\n'


# --- config ---


def test_defaults_fill_every_key(tmp_path):
    cfg = parse_config("", base_dir=tmp_path)
    assert set(cfg.values) == set(KEYS)
    assert cfg.mechanism_config().n == 4


@pytest.mark.parametrize(
    "text, key",
    [
        ("delta = 1.5", "delta"),
        ("nonsense = 1", "nonsense"),
        ('mode = "fast"', "mode"),
        ("n = 2.5", "n"),
        ('strategies = ["bogus:1"]', "strategies"),
        ('n = 2\nstrategies = ["truthful", "noise:0.1", "quit"]', "strategies"),
        ("n = 3\nm = 8", "m"),
        ('dataset = "csv"\ncsv_path = "missing.csv"', "csv_path"),
        ("[section]\nn = 3", "section"),
        ("n = 25\nsweep_modes = [\"exact\"]", "sweep_modes"),
    ],
)
def test_config_errors_name_the_key(tmp_path, text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text, base_dir=tmp_path)
    assert info.value.key == key
    assert str(info.value).startswith(f"{key}:")


def test_overrides_win(tmp_path):
    cfg = parse_config("seed = 1", {"seed": 9, "out": None}, base_dir=tmp_path)
    assert cfg.seed == 9


def test_strategies_are_padded(tmp_path):
    cfg = parse_config('n = 3\nstrategies = ["noise:0.5"]', base_dir=tmp_path)
    assert [str(s) for s in cfg.strategies()] == ["noise:0.5", "truthful", "truthful"]


# --- simulate ---


def test_simulate_writes_rows_and_summary(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, "n = 4\nrounds = 2\nmode = \"exact\"\nplots = true\nn_samples = 200\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    header, rows = read_csv(out / "rounds.csv")
    assert header == ROUNDS_HEADER and len(rows) == 8
    assert [(r[0], r[1]) for r in rows] == [(str(t), str(i)) for t in (1, 2) for i in range(4)]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config_text"] == cfg.read_text()
    assert (out / "utility.svg").read_text().startswith("<svg")
    assert (out / "accuracy.svg").exists()


def test_simulate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, ANALYTIC + "n = 5\nrounds = 3\nm = 7\nstrategies = [\"labelflip:0.5\"]\n")
    outs = []
    for name in ("a", "b"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "rounds.csv").read_bytes())
    assert outs[0] == outs[1]


def test_config_error_exits_1_without_writing(tmp_path, capsys):
    out = tmp_path / "never"
    cfg = write_config(tmp_path, "delta = 1.5\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 1
    assert "delta" in capsys.readouterr().err
    assert not out.exists()


def test_missing_config_file_exits_1(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.toml")]) == 1


def test_plots_flag_off(tmp_path):
    out = tmp_path / "o"
    cfg = write_config(tmp_path, 'backend = "analytic"\nrounds = 1\n')
    assert main(["simulate", "--config", str(cfg), "--out", str(out), "--plots", "off"]) == 0
    assert not list(out.glob("*.svg"))


def test_seed_flag_changes_output(tmp_path):
    cfg = write_config(tmp_path, ANALYTIC + "n = 6\nm = 5\noracle_noise = 0.02\n")
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "rounds.csv").read_bytes() != (tmp_path / "b" / "rounds.csv").read_bytes()


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, ANALYTIC + "rounds = 1\n")
    proc = subprocess.run(
        [sys.executable, "-m", "fedcore", "simulate", "--config", str(cfg), "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr


# --- validate ---


def test_validate_full_grid(tmp_path):
    out = tmp_path / "v"
    cfg = write_config(tmp_path, ANALYTIC + "n = 6\nm_grid = [63, 5, 20]\n")
    assert main(["validate", "--config", str(cfg), "--out", str(out)]) == 0
    header, rows = read_csv(out / "validation.csv")
    assert header == VALIDATION_HEADER
    assert [int(r[0]) for r in rows] == [5, 20, 63]
    assert float(rows[-1][1]) <= 1e-6


def test_validate_rejects_large_n(tmp_path, capsys):
    cfg = write_config(tmp_path, ANALYTIC + "n = 13\n")
    assert main(["validate", "--config", str(cfg), "--out", str(tmp_path / "v")]) == 1
    assert "n:" in capsys.readouterr().err


# --- sweep ---


def test_sweep_rows_and_identity_cells(tmp_path):
    out = tmp_path / "s"
    body = ANALYTIC + (
        'n = 4\nrounds = 2\nm = 5\nsweep_modes = ["vcg_only", "sampled"]\n'
        'sweep_strategies = ["noise", "labelflip"]\nsweep_degrees = [0.0, 1.0]\nsweep_repeats = 3\n'
    )
    assert main(["sweep", "--config", str(write_config(tmp_path, body)), "--out", str(out)]) == 0
    header, rows = read_csv(out / "sweep.csv")
    assert header == SWEEP_HEADER and len(rows) == 2 * 2 * 2
    for mode in ("vcg_only", "sampled"):
        zero = [float(r[3]) for r in rows if r[0] == mode and float(r[2]) == 0.0]
        assert abs(zero[0] - zero[1]) <= 1e-9
        flips = {float(r[2]): float(r[3]) for r in rows if r[0] == mode and r[1] == "labelflip"}
        assert flips[1.0] <= flips[0.0]


# --- bench ---


def test_bench_counts(tmp_path):
    out = tmp_path / "b"
    body = ANALYTIC + 'bench_n = [3, 5]\nbench_modes = ["exact", "sampled", "vcg_only"]\n'
    assert main(["bench", "--config", str(write_config(tmp_path, body)), "--out", str(out)]) == 0
    header, rows = read_csv(out / "bench.csv")
    assert header == BENCH_HEADER
    got = {(int(r[0]), r[1]): int(r[2]) for r in rows}
    assert got[(3, "exact")] == 7 and got[(5, "exact")] == 31
    assert got[(5, "vcg_only")] == 6
    assert got[(5, "sampled")] <= 31


def test_bench_skips_exact_beyond_cap(tmp_path):
    out = tmp_path / "b"
    body = ANALYTIC + 'bench_n = [15]\nbench_modes = ["exact", "vcg_only"]\n'
    assert main(["bench", "--config", str(write_config(tmp_path, body)), "--out", str(out)]) == 0
    _, rows = read_csv(out / "bench.csv")
    assert [r[1] for r in rows] == ["vcg_only"]
    assert json.loads((out / "summary.json").read_text())["skipped"] == [{"n": 15, "mode": "exact"}]


# --- svg ---


def test_line_chart_is_valid_svg():
    import xml.etree.ElementTree as ET

    svg = line_chart([("a", [1, 2, 3], [1.0, 10.0, 100.0]), ("b", [1, 2, 3], [2.0, 2.0, 2.0])], "t", "x", "y", logy=True)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    assert len([e for e in root.iter() if e.tag.endswith("polyline")]) == 2
