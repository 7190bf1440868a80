import json
import shutil
import subprocess

import numpy as np
import pytest

from attnlab.cli import build_parser, main
from attnlab.tokens import read_tokens_csv


@pytest.fixture
def simplex_csv(tmp_path):
    p = tmp_path / "s.csv"
    assert main(["generate", "--kind", "simplex", "--n", "12", "--rho", "0.5", "--out", str(p)]) == 0
    return p


def test_generate_kinds(tmp_path):
    g = tmp_path / "g.csv"
    assert main(["generate", "--kind", "gaussian", "--n", "10", "--d", "4", "--rho", "0.3", "--seed", "5", "--out", str(g)]) == 0
    cfg = read_tokens_csv(g)
    assert (cfg.n, cfg.d) == (10, 4)
    t = tmp_path / "t.csv"
    assert main(["generate", "--kind", "three-phase", "--n", "512", "--out", str(t)]) == 0
    assert read_tokens_csv(t).n == 512
    assert main(["generate", "--kind", "gaussian", "--n", "10", "--out", str(g)]) == 2


def test_generate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        main(["generate", "--kind", "gaussian", "--n", "6", "--d", "3", "--seed", "9", "--out", str(p)])
    assert a.read_bytes() == b.read_bytes()


def test_forward_writes_sidecar(simplex_csv, tmp_path):
    out = tmp_path / "f.csv"
    assert main(["forward", "--tokens", str(simplex_csv), "--gamma", "2", "--alpha", "0.5", "--out", str(out)]) == 0
    side = json.loads(out.with_suffix(".json").read_text())
    assert side["n"] == 12 and side["alpha"] == 0.5
    assert side["row_sum_max_abs_dev"] <= 1e-12
    assert len(side["log_z"]) == 12
    assert read_tokens_csv(out).d == 13


def test_scale_flags_are_exclusive(simplex_csv, tmp_path):
    out = str(tmp_path / "f.csv")
    assert main(["forward", "--tokens", str(simplex_csv), "--gamma", "1", "--beta", "1", "--out", out]) == 2
    assert main(["forward", "--tokens", str(simplex_csv), "--out", out]) == 2


def test_missing_input_is_usage_error(tmp_path):
    assert main(["forward", "--tokens", str(tmp_path / "none.csv"), "--gamma", "1", "--out", str(tmp_path / "o.csv")]) == 2
    assert main(["sweep", "--config", str(tmp_path / "none.cfg")]) == 2


def test_bad_value_is_compute_error(simplex_csv, tmp_path):
    assert main(["forward", "--tokens", str(simplex_csv), "--gamma", "-1", "--out", str(tmp_path / "o.csv")]) == 1


def test_iterate(simplex_csv, tmp_path, capsys):
    out = tmp_path / "last.csv"
    assert main(["iterate", "--tokens", str(simplex_csv), "--gamma", "1", "--layers", "2", "--json", "--out", str(out)]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["layer"] for r in rows] == [1, 2]
    assert rows[1]["rho1"] > rows[0]["rho1"] > 0.5
    assert out.exists()


def test_jacobian_report(simplex_csv, tmp_path):
    out = tmp_path / "j.json"
    code = main(["jacobian", "--tokens", str(simplex_csv), "--gamma", "1.5", "--exact", "--hutchinson", "256", "--fd-check", "3", "--out", str(out)])
    assert code == 0
    rep = json.loads(out.read_text())
    for key in ("n", "d", "gamma", "beta", "alpha", "eta_exact", "eta_hutch", "eta_hutch_se", "fd_max_rel_err"):
        assert key in rep
    assert rep["fd_max_rel_err"] < 1e-6
    assert abs(rep["eta_hutch"] - rep["eta_exact"]) <= 4 * rep["eta_hutch_se"]


def test_jacobian_defaults_to_exact(simplex_csv, capsys):
    assert main(["jacobian", "--tokens", str(simplex_csv), "--beta", "0"]) == 0
    assert "eta_exact" in json.loads(capsys.readouterr().out)


def test_predict_simplex(capsys):
    assert main(["predict", "--case", "simplex", "--rho", "0.5", "--gamma", "2", "--json"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["regime"] == "Critical" and rec["cos_limit"] == pytest.approx(0.8)
    assert rec["z_prefactor"] == 2.0


def test_predict_three_phase(capsys):
    assert main(["predict", "--case", "three-phase", "--n", "4096", "--gamma", "2", "--json"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["regime"] == "Middle" and rec["z_dominant"] == "cluster"
    assert main(["predict", "--case", "simplex", "--gamma", "2"]) == 2


def test_sweep_outputs_and_worker_independence(tmp_path):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("rho = 0.3, 0.6\ngamma = 0.5, 3\nd = 16\nn = 20\nmetrics = lambda, eta_exact\nreplicates = 2\n")
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a"), "--workers", "1", "--seed", "3"]) == 0
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--workers", "2", "--seed", "3"]) == 0
    a = (tmp_path / "a" / "records.csv").read_bytes()
    assert a == (tmp_path / "b" / "records.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1 + 2 * 2 * 2 * 2
    meta = json.loads((tmp_path / "a" / "meta.json").read_text())
    assert meta["grid"]["seed"] == 3
    assert (tmp_path / "a" / "boundary.csv").read_text().splitlines()[1].startswith("0.3,")


def test_verify_suites(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["verify", "--suite", "jacobian", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["passed"]
    assert main(["verify", "--suite", "theory"]) == 0
    assert "uu_sum" in capsys.readouterr().out
    assert main(["verify", "--suite", "nope"]) == 2


def test_help_lists_defaults():
    text = build_parser()._subparsers._group_actions[0].choices["predict"].format_help()
    assert "--gamma" in text and "(default: 1.0)" in text


@pytest.mark.skipif(shutil.which("attn") is None, reason="console script not installed")
def test_console_script_help():
    res = subprocess.run(["attn", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate", "forward", "iterate", "jacobian", "predict", "sweep", "verify"):
        assert cmd in res.stdout
    res = subprocess.run(["attn", "bogus"], capture_output=True, text=True)
    assert res.returncode == 2


def test_forward_output_matches_library(simplex_csv, tmp_path):
    from attnlab.attention import AttentionParams, att_forward

    out = tmp_path / "f.csv"
    main(["forward", "--tokens", str(simplex_csv), "--beta", "3", "--out", str(out)])
    want = att_forward(read_tokens_csv(simplex_csv), AttentionParams.from_beta(3.0)).x_next
    np.testing.assert_array_equal(read_tokens_csv(out).x, want)
