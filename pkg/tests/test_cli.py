import json

import numpy as np
import pytest
import yaml

from mvlab.cli import main
from mvlab.engine import read_paths_bin


def run(tmp_path, *args):
    return main(list(args) + ["--out", str(tmp_path)])


def test_simulate_twice_is_byte_identical(tmp_path):
    args = ["simulate", "--model", "linear_mf", "--N", "1024", "--M", "1024", "--T", "1", "--seed", "7"]
    assert run(tmp_path / "a", *args) == 0
    assert run(tmp_path / "b", *args) == 0
    a, b = (tmp_path / "a" / "paths.csv").read_bytes(), (tmp_path / "b" / "paths.csv").read_bytes()
    assert a == b and a.startswith(b"t,particle,x0\n")
    paths = read_paths_bin((tmp_path / "a" / "paths.bin").read_bytes())
    assert paths.states.shape == (1024, 1025, 1)
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["schema_version"] == 1 and summary["config"]["seed"] == 7


def test_yamada_check(tmp_path):
    assert run(tmp_path, "yamada-check", "--gamma", "7.389", "--eps", "0.1") == 0
    lines = (tmp_path / "yamada.csv").read_text().splitlines()
    assert lines[0] == "x,V,V_prime,V_double_prime,lower,upper,vpp_bound"
    assert len(lines) == 1001
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["passed"] is True


def test_yamada_check_invalid_gamma_is_config_error(tmp_path):
    assert run(tmp_path, "yamada-check", "--gamma", "0.5") == 2


def test_sweep_outputs_and_config_roundtrip(tmp_path):
    args = ["sweep-dt", "--model", "holder_diffusion_1d", "--param", "alpha=0.75", "--N", "32", "--M", "256",
            "--R", "2", "--factors", "2,8,32", "--seed", "3"]
    assert run(tmp_path / "a", *args) == 0
    out = tmp_path / "a"
    assert (out / "error_vs_delta.svg").read_bytes().lstrip().startswith(b"<?xml")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["fit"]["n_points"] == 3 and summary["divergences"] == 0
    cfg = summary["config"]
    cfg["out"] = str(tmp_path / "b")
    (tmp_path / "echo.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["sweep-dt", "--config", str(tmp_path / "echo.yaml")]) == 0
    assert (out / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert (out / "error_vs_delta.svg").read_bytes() == (tmp_path / "b" / "error_vs_delta.svg").read_bytes()


def test_sweep_n_glivenko_picard_validate(tmp_path):
    assert run(tmp_path / "n", "sweep-n", "--N-list", "16,32", "--n-extra", "96", "--M", "64", "--R", "2", "--no-svg") == 0
    assert (tmp_path / "n" / "results.csv").exists()
    assert run(tmp_path / "g", "glivenko", "--law", "uniform", "--N-list", "16,64", "--R", "2") == 0
    assert run(tmp_path / "p", "picard", "--N", "64", "--M", "64", "--k-max", "3") == 0
    rows = (tmp_path / "p" / "results.csv").read_text().splitlines()
    assert rows[0] == "k,distance" and len(rows) == 4
    assert run(tmp_path / "v", "validate-model", "--model", "bounded_holder_multid") == 0
    report = json.loads((tmp_path / "v" / "summary.json").read_text())["report"]
    assert report["passed"]


def test_no_csv_flag(tmp_path):
    assert run(tmp_path, "simulate", "--N", "4", "--M", "64", "--no-csv", "--no-bin") == 0
    assert not (tmp_path / "paths.csv").exists() and not (tmp_path / "paths.bin").exists()


@pytest.mark.parametrize(
    "doc,needle",
    [
        ("sweep:\n  M: [1\n", "line"),
        ("sweep:\n  Mx: 4\n", "sweep"),
        ("sweep:\n  M: 100\n", "sweep.M"),
        ("model:\n  family: nope\n", "model.family"),
        ("seed: -1\n", "seed"),
        ("- 1\n- 2\n", "mapping"),
    ],
)
def test_malformed_config_exits_2(tmp_path, capsys, doc, needle):
    path = tmp_path / "bad.yaml"
    path.write_text(doc)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert needle in capsys.readouterr().err


def test_bad_flags_exit_2(tmp_path):
    assert run(tmp_path, "simulate", "--factors", "a,b") == 2
    assert run(tmp_path, "nope") == 2
    assert run(tmp_path, "simulate", "--model", "linear_mf", "--param", "a=-1") == 2
    assert run(tmp_path, "sweep-dt", "--factors", "3", "--M", "64") == 2


@pytest.mark.filterwarnings("ignore:step")
def test_divergent_simulation_exits_0(tmp_path):
    assert run(tmp_path, "simulate", "--model", "linear_mf", "--param", "a=1e6", "--param", "c=0",
               "--param", "s=1", "--N", "4", "--M", "64", "--T", "16") == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["diverged"] is True


def test_accept_quick_and_forced_failure(tmp_path, capsys):
    assert run(tmp_path / "ok", "accept", "--budget", "quick", "--only", "c09_yamada_invariants,c10_ot_exactness") == 0
    summary = json.loads((tmp_path / "ok" / "summary.json").read_text())
    assert summary["passed"] and len(summary["criteria"]) == 2
    cfg = tmp_path / "force.yaml"
    cfg.write_text(yaml.safe_dump({"accept": {"budget": "quick", "only": ["c08_picard_contraction"],
                                              "tolerance_overrides": {"c08_picard_contraction": {"d8_over_d2_max": 0}}}}))
    assert main(["accept", "--config", str(cfg), "--out", str(tmp_path / "bad")]) == 1
    assert "FAIL c08_picard_contraction" in capsys.readouterr().out


def test_files_are_written_atomically(tmp_path):
    assert run(tmp_path, "simulate", "--N", "4", "--M", "64") == 0
    assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]
    assert np.isfinite(json.loads((tmp_path / "summary.json").read_text())["terminal_mean"][0])


def test_validate_model_failure_exits_1(tmp_path):
    status = run(tmp_path, "validate-model", "--model", "bounded_holder_multid", "--param", "eps=1.5")
    assert status == 1
    report = json.loads((tmp_path / "summary.json").read_text())["report"]
    assert not report["passed"]
