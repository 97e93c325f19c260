import json
import subprocess
import sys

import numpy as np
import pytest

from ipdperm.cli import main
from ipdperm.model import example_dataset_path


@pytest.fixture()
def tiny_csv(tmp_path):
    path = tmp_path / "tiny.csv"
    rng = np.random.default_rng(2)
    rows = ["study,y,y0,z"]
    for i in range(4):
        zi = rng.binomial(1, 0.6, 20)
        zi[0], zi[1] = 1, 0
        y0 = rng.normal(4, 1, 20)
        y = 0.5 + 0.8 * y0 + 0.7 * zi + rng.normal(0, 1, 20)
        rows += [f"s{i},{y[j]:.6f},{y0[j]:.6f},{zi[j]}" for j in range(20)]
    path.write_text("\n".join(rows) + "\n")
    return path


def run_cli(args):
    return main([str(a) for a in args])


def test_analyze_normal_interval_matches_quantile(tmp_path, tiny_csv, capsys):
    out = tmp_path / "report.json"
    code = run_cli(["analyze", "--input", tiny_csv, "--methods", "normal",
                    "--seed", "5", "--output", out, "--format", "json"])
    assert code == 0
    report = json.loads(out.read_text())
    res = report["results"][0]
    theta, se = report["fit"]["theta_hat"], report["fit"]["se_theta"]
    assert res["ci_lower"] == pytest.approx(theta - 1.959964 * se, abs=1e-6)
    assert res["ci_upper"] == pytest.approx(theta + 1.959964 * se, abs=1e-6)
    assert res["df"] is None  # infinite df serialized as null


def test_analyze_all_methods_on_bundled_dataset(tmp_path, capsys):
    out = tmp_path / "r.json"
    code = run_cli(["analyze", "--input", example_dataset_path(), "--seed", "3",
                    "--n-perm", "300", "--n-perm-search", "150", "--output", out])
    assert code == 0
    report = json.loads(out.read_text())
    methods = [r["method"] for r in report["results"]]
    assert methods == ["normal", "satterthwaite", "kenward_roger", "permutation", "permutation_search"]
    assert len(set(methods)) == 5
    assert report["dataset"]["k"] == 4
    assert [s["n"] for s in report["dataset"]["studies"]] == [15, 14, 22, 54]
    text = capsys.readouterr().out
    assert "permutation_search" in text


def test_analyze_byte_identical_reruns(tmp_path, tiny_csv, capsys):
    outs = []
    for name, workers in (("a.json", 1), ("b.json", 1), ("c.json", 2)):
        out = tmp_path / name
        code = run_cli(["analyze", "--input", tiny_csv, "--seed", "11",
                        "--n-perm", "250", "--methods", "normal,permutation",
                        "--workers", workers, "--output", out])
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_report_round_trips_losslessly(tmp_path, tiny_csv, capsys):
    from ipdperm.cli import AnalysisReport

    out = tmp_path / "rt.json"
    run_cli(["analyze", "--input", tiny_csv, "--seed", "2", "--n-perm", "200",
             "--methods", "normal,permutation", "--output", out])
    payload = json.loads(out.read_text())
    rebuilt = AnalysisReport(**payload)
    assert rebuilt.to_json().encode() == out.read_bytes()


def test_analyze_seed_echoed_in_report(tmp_path, tiny_csv, capsys):
    out = tmp_path / "seeded.json"
    run_cli(["analyze", "--input", tiny_csv, "--methods", "normal", "--seed", "77",
             "--output", out])
    assert json.loads(out.read_text())["seed"] == 77


def test_analyze_draws_seed_when_missing(tiny_csv, capsys):
    code = run_cli(["analyze", "--input", tiny_csv, "--methods", "normal"])
    assert code == 0
    assert "drew seed" in capsys.readouterr().err


def test_analyze_missing_file(capsys):
    assert run_cli(["analyze", "--input", "/nonexistent/x.csv"]) == 2


def test_analyze_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("study,y,y0,z\ns,oops,1,1\n")
    assert run_cli(["analyze", "--input", bad]) == 2
    assert "not numeric" in capsys.readouterr().err


def test_analyze_single_arm_exit_code(tmp_path, capsys):
    bad = tmp_path / "single.csv"
    rows = ["study,y,y0,z"]
    rows += [f"a,{i}.0,{i}.5,1" for i in range(5)]          # all treated
    rows += [f"b,{i}.0,{i}.5,{i % 2}" for i in range(5)]
    bad.write_text("\n".join(rows) + "\n")
    assert run_cli(["analyze", "--input", bad]) == 3


def test_analyze_unknown_method(tiny_csv, capsys):
    assert run_cli(["analyze", "--input", tiny_csv, "--methods", "bayes"]) == 6


def test_analyze_enforces_permutation_floor(tiny_csv, capsys):
    # inferential permutation use requires at least 100 permutations
    assert run_cli(["analyze", "--input", tiny_csv, "--n-perm", "50", "--seed", "1"]) == 6
    assert run_cli(["analyze", "--input", tiny_csv, "--methods", "normal",
                    "--n-perm", "50", "--seed", "1"]) == 0


def test_simulate_config_deterministic(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "defaults": {"replicates": 4, "n_perm_test": 60, "methods": ["normal", "permutation"]},
        "scenarios": [{"tau": 0.5}, {"tau": 1.0, "theta": 1.0}],
    }))
    outs = []
    for name, workers in (("r1.csv", 1), ("r2.csv", 1), ("r3.csv", 2)):
        out = tmp_path / name
        code = run_cli(["simulate", "--config", cfg, "--seed", "1", "--output", out,
                        "--workers", workers])
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]
    lines = outs[0].decode().strip().split("\n")
    assert len(lines) == 1 + 2 * 2  # header + 2 scenarios x 2 methods


def test_simulate_rejects_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenarios": [{"tau": 0.5, "wibble": 1}]}))
    assert run_cli(["simulate", "--config", cfg, "--seed", "1"]) == 6
    assert "wibble" in capsys.readouterr().err


def test_simulate_rejects_bad_json(tmp_path, capsys):
    cfg = tmp_path / "broken.json"
    cfg.write_text("{not json")
    assert run_cli(["simulate", "--config", cfg, "--seed", "1"]) == 6


def test_simulate_requires_config_or_preset(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--seed", "1"])


def test_simulate_preset_stdout(tmp_path, capsys, monkeypatch):
    # run the desk-scale preset shape with a stub grid to keep runtime tiny
    import ipdperm.cli as cli_mod
    from ipdperm.simulation import ScenarioConfig

    monkeypatch.setitem(
        cli_mod.PRESETS, "desk-scale",
        lambda: [ScenarioConfig(tau=0.5, replicates=3, n_perm_test=50, methods=("normal",))],
    )
    monkeypatch.setattr(cli_mod, "preset_grid", lambda name: cli_mod.PRESETS[name]())
    assert run_cli(["simulate", "--preset", "desk-scale", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("schema_version,")


def test_console_script_installed():
    proc = subprocess.run(
        [sys.executable, "-m", "ipdperm.cli", "analyze", "--input", example_dataset_path(),
         "--methods", "normal", "--seed", "1"],
        capture_output=True, text=True, timeout=300,
    )
    assert proc.returncode == 0
    assert "analysis report" in proc.stdout
