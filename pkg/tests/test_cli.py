from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import constant_coefficients
from weighted_ips.cli import (
    COLUMNS,
    EXIT_BLOWUP,
    UsageError,
    emit_plotdata,
    main,
    parse_config,
    read_csv,
    run_study,
)
from weighted_ips.model import AssumptionConstants, Coefficients, InitialLaw, make_model


def exploding_model(kernel, horizon):
    coeffs = Coefficients(
        phi=lambda t, x, z: np.ones((x.shape[0], 1, 1)),
        g=lambda t, x, z: np.zeros((x.shape[0], 1)),
        lam=lambda t, x, z: np.where(t > 0.3, np.inf, 0.0) * np.ones(x.shape[0]),
        d=1,
        p=1,
    )
    return make_model(coeffs, AssumptionConstants(), InitialLaw.gaussian([0.0], 1.0))


def write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults_from_empty_file(tmp_path):
    cfg = parse_config(write(tmp_path, ""), {"study": "single-run", "N": "100"})
    assert (cfg.T, cfg.m, cfg.M, cfg.Q, cfg.n, cfg.driver) == (1.0, 1.5, 100, 1000, [10], "iid")
    assert cfg.N == [100]


def test_flags_override_file(tmp_path):
    path = write(tmp_path, "study = variance-vs-N\nN = 100, 200, 400  # grid\neps = 0.5\nM = 7\n")
    cfg = parse_config(path, {"N": "50,100,200"})
    assert cfg.N == [50, 100, 200] and cfg.epsilon == [0.5] and cfg.M == 7


@pytest.mark.parametrize(
    "overrides,needle",
    [
        ({"m": "0.5"}, "m must exceed 1"),
        ({"study": "bias-vs-eps", "N": "100,200", "eps": "0.3"}, "epsilon"),
        ({"colour": "red"}, "colour"),
        ({"M": "ten"}, "M"),
        ({"N": "10.5"}, "N"),
        ({"study": "timestep", "n": "5,10"}, "n_ref"),
        ({"study": "nonsense"}, "nonsense"),
    ],
)
def test_usage_errors_name_the_key(overrides, needle):
    with pytest.raises(UsageError, match=needle):
        parse_config(None, overrides)


def test_single_run_conservative(tmp_path):
    cfg = parse_config(None, {"study": "single-run", "testcase": "conservative", "N": "500", "eps": "0.3",
                              "out": str(tmp_path)})
    assert run_study(cfg) == 0
    summary = json.loads((tmp_path / "single-run_summary.json").read_text())
    assert summary["total_weight"] == 500 and summary["total_weight_equals_N"]
    assert abs(summary["mass"] - 1) < 2e-3


def run_small_grid(out, threads):
    return main(["run", "--study", "variance-vs-N", "--N", "60,120,240", "--eps", "0.5", "--n", "3",
                 "--seed", "4", "--threads", str(threads), "--out", str(out), "--set", "M=4", "--set", "Q=40"])


def test_grid_study_deterministic(tmp_path):
    assert run_small_grid(tmp_path / "a", 1) == 0
    assert run_small_grid(tmp_path / "b", 2) == 0
    a = (tmp_path / "a" / "variance-vs-N.csv").read_bytes()
    b = (tmp_path / "b" / "variance-vs-N.csv").read_bytes()
    assert a == b
    assert run_small_grid(tmp_path / "a", 1) == 0
    assert (tmp_path / "a" / "variance-vs-N.csv").read_bytes() == a

    lines = a.decode().splitlines()
    assert lines[0].startswith("# ")
    header = json.loads(lines[0][2:])
    assert header["config"]["N"] == [60, 120, 240] and "version" in header
    assert tuple(lines[1].split(",")) == COLUMNS
    rows = read_csv(tmp_path / "a" / "variance-vs-N.csv")
    assert sum(r["statistic"] == "variance" for r in rows) == 3
    for r in rows:
        assert float(r["value"]) == float(format(float(r["value"]), ".17g"))
    summary = json.loads((tmp_path / "a" / "variance-vs-N_summary.json").read_text())
    assert summary["fits"][0]["slope"] is not None


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("WIPS_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["run", "--study", "single-run", "--N", "50", "--n", "2"]) == 0
    assert (tmp_path / "env" / "single-run.csv").exists()


def test_blowup_marks_failure(tmp_path):
    code = main(["run", "--study", "single-run", "--N", "20", "--n", "5", "--out", str(tmp_path),
                 "--set", "testcase=custom", "--set", "factory=test_cli:exploding_model"])
    assert code == EXIT_BLOWUP
    rows = read_csv(tmp_path / "single-run.csv")
    assert rows[-1]["statistic"] == "failed"


def test_plotdata_variance(tmp_path):
    run_small_grid(tmp_path, 1)
    files = emit_plotdata(tmp_path / "variance-vs-N.csv", "variance-vs-N")
    assert len(files) == 1
    data = np.loadtxt(files[0])
    np.testing.assert_allclose(data[:, 0], np.log([60, 120, 240]))


def test_plotdata_timestep(tmp_path):
    code = main(["run", "--study", "timestep", "--N", "40", "--n", "2,4", "--out", str(tmp_path),
                 "--set", "n_ref=8", "--set", "M=3", "--set", "Q=20", "--set", "pairing=brownian"])
    assert code == 0
    files = emit_plotdata(tmp_path / "timestep.csv", "timestep", tmp_path / "plots")
    names = sorted(f.name for f in files)
    assert any("bias_sq" in n for n in names) and any("variance" in n for n in names)


def test_plotdata_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ValueError):
        emit_plotdata(empty, "variance-vs-N")
    run_small_grid(tmp_path, 1)
    csv_path = tmp_path / "variance-vs-N.csv"
    kept = [ln for ln in csv_path.read_text().splitlines() if ",variance," not in ln]
    csv_path.write_text("\n".join(kept) + "\n")
    with pytest.raises(ValueError, match="variance"):
        emit_plotdata(csv_path, "variance-vs-N")


def test_check_command(capsys):
    assert main(["check", "--samples", "200"]) == 0
    out = capsys.readouterr().out
    assert "selected variant: radial=squared normalization=unit form=exact" in out


def test_usage_exit_code(capsys):
    assert main(["run", "--study", "single-run", "--set", "m=0.5"]) == 2
    assert "m must exceed 1" in capsys.readouterr().err
