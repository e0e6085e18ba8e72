import json
import subprocess
import sys

import pytest

from levyspde.cli import main

BASE = """
grid: {d: 1, M: 16}
time: {T: 0.5, steps: 16}
noise:
  channels:
    - {type: atoms, atoms: [[0.5, 2.0], [-0.5, 2.0]], beta: 0.3}
coefficients: {a: [[1.5]], sigma: [[0.3]], mu: [0.1]}
data:
  u0: {type: modes, modes: [{k: 1}]}
  g: [{type: constant, value: 1.0}]
run: {replicas: 10, seed: 3}
"""


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_simulate_writes_summary_and_manifest(tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", write(tmp_path, BASE), "--out", str(out), "--jobs", "1"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"summary.csv"}
    assert len(manifest["replica_seeds"]) == 10
    lines = (out / "summary.csv").read_text().splitlines()
    assert lines[0].startswith("# levyspde-ensemble-summary-csv v1")
    assert len(lines) == 2 + 10 * 17


def test_rerun_from_manifest_is_byte_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", write(tmp_path, BASE), "--out", str(out1), "--replicas", "20",
                 "--jobs", "1"]) == 0
    assert main(["simulate", "--config", str(out1 / "manifest.json"), "--out", str(out2), "--jobs", "2"]) == 0
    assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()
    m1, m2 = (json.loads((o / "manifest.json").read_text()) for o in (out1, out2))
    assert m1["outputs"] == m2["outputs"]


def test_seed_flag_changes_output(tmp_path):
    cfg = write(tmp_path, BASE)
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "a"), "--jobs", "1"])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "4", "--jobs", "1"])
    assert (tmp_path / "a" / "summary.csv").read_bytes() != (tmp_path / "b" / "summary.csv").read_bytes()


def test_zero_data_gives_zero_summaries(tmp_path):
    cfg = write(tmp_path, "grid: {M: 8}\nnoise: {channels: [{type: atoms, atoms: [[0.5, 1.0]]}]}\nrun: {replicas: 2}\n")
    out = tmp_path / "z"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "summary.csv").read_text().splitlines()[2:]
    assert all(float(r.split(",")[2]) == 0.0 and float(r.split(",")[3]) == 0.0 for r in rows)


def test_coercivity_violation_blocks_outputs(tmp_path, capsys):
    bad = BASE.replace("a: [[1.5]]", "a: [[0.01]]")
    out = tmp_path / "bad"
    assert main(["simulate", "--config", write(tmp_path, bad), "--out", str(out)]) == 2
    assert not out.exists()
    assert "coercivity" in capsys.readouterr().err
    assert main(["simulate", "--config", write(tmp_path, bad), "--out", str(out), "--force", "--jobs", "1"]) == 0


def test_invalid_config_exits_2(tmp_path, capsys):
    assert main(["simulate", "--config", write(tmp_path, "grid: {M: 12}")]) == 2
    assert "grid" in capsys.readouterr().err


@pytest.mark.parametrize("mode, extra", [
    ("picard", "nonlinear: {alpha: 1.5, beta: 0.5, channel: 0}"),
    ("localized", ""),
])
def test_other_modes(tmp_path, mode, extra):
    text = BASE.replace("run: {replicas: 10, seed: 3}", f"run: {{replicas: 2, seed: 3, mode: {mode}}}\n{extra}")
    if mode == "localized":
        text = text.replace("sigma: [[0.3]]", "sigma: [[0.0]]").replace("channels:", "N0: 1\n  truncation: 0.4\n  channels:")
    out = tmp_path / mode
    assert main(["simulate", "--config", write(tmp_path, text), "--out", str(out), "--jobs", "1"]) == 0
    assert (out / "replica_meta.csv").exists()


def test_verify_quadratic_variation_passes(tmp_path, capsys):
    cfg = write(tmp_path, BASE.replace("beta: 0.3", "beta: 1.0"))
    assert main(["verify", "quadratic-variation", "--config", cfg, "--replicas", "2000",
                 "--out", str(tmp_path)]) == 0
    assert "quadratic-variation ch=0" in capsys.readouterr().out


def test_verify_levy_system_with_zero_g_is_vacuous(tmp_path):
    cfg = write(tmp_path, BASE.replace("g: [{type: constant, value: 1.0}]", "g: [null]"))
    assert main(["verify", "levy-system", "--config", cfg, "--out", str(tmp_path)]) == 3


def test_verify_apriori_scaling(tmp_path, capsys):
    assert main(["verify", "apriori", "--config", write(tmp_path, BASE), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "apriori scale=1" in out and "apriori scale=10" in out


def test_verify_unknown_check(tmp_path):
    assert main(["verify", "nope", "--config", write(tmp_path, BASE)]) == 2


def test_verify_t_independence(tmp_path):
    text = BASE.replace("mu: [0.1]", "mu: [0.0]")
    assert main(["verify", "t-independence", "--config", write(tmp_path, text), "--out", str(tmp_path)]) == 0
    assert main(["verify", "t-independence", "--config", write(tmp_path, BASE, "b.yaml"), "--out", str(tmp_path)]) == 2


def test_converge_exit_codes(tmp_path):
    det = "grid: {M: 16}\ntime: {T: 0.5}\ndata: {u0: {type: modes, modes: [{k: 1}]}, f: {type: modes, modes: [{k: 2}]}}\n"
    cfg = write(tmp_path, det)
    assert main(["converge", "--config", cfg, "--ladder", "16,32,64", "--out", str(tmp_path)]) == 0
    table = (tmp_path / "convergence.csv").read_text().splitlines()
    assert table[0].startswith("# levyspde-convergence-csv v1")
    assert main(["converge", "--config", cfg, "--ladder", "64"]) == 2
    assert main(["converge", "--config", cfg, "--ladder", "16,24,32"]) == 2


def test_coercivity_command(tmp_path, capsys):
    heat = write(tmp_path, "grid: {M: 8}\n")
    assert main(["coercivity", "--config", heat, "--out", str(tmp_path)]) == 0
    assert "delta_min,1.0" in capsys.readouterr().out
    degenerate = write(tmp_path, "grid: {M: 8}\nnoise: {channels: [{type: atoms, beta: 1.4142135623730951}]}\n"
                                 "coefficients: {sigma: [[1.4142135623730951]]}\n", "deg.yaml")
    assert main(["coercivity", "--config", degenerate, "--out", str(tmp_path)]) == 2
    heavy = write(tmp_path, "grid: {M: 8}\nnoise: {N0: 1, channels: [{type: stable, alpha: 1.5}, {type: atoms, beta: 1.0}]}\n"
                            "coefficients: {sigma: [[0.0, 0.5]]}\n", "heavy.yaml")
    assert main(["coercivity", "--config", heavy, "--out", str(tmp_path)]) == 0
    assert "partial_moment_n0=1" in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "levyspde.cli", "coercivity", "--config", write(tmp_path, "grid: {M: 8}\n"),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
