import csv
import io
import json

import pytest

from adalab import cli, harness
from adalab.cli import (ConfigError, RunManifest, config_from_dict, config_to_dict,
                        emit_results, fmt, main, parse_config, selftest)

MINIMAL = {"k": 3, "sigma": 1.0, "replications": 200, "seed": 1,
           "adversary": {"kind": "k_step_greedy"}}


def _write(tmp_path, name, data):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_minimal_config_is_valid():
    cfg = config_from_dict(MINIMAL)
    assert cfg.k == 3 and cfg.replications == 200 and cfg.conjunction == "max"
    assert cfg.mechanism.kind == "gaussian_schedule"
    assert cfg.mechanism.w_schedule[-1] == 0.0
    assert cfg.adversary.sigma == 1.0


def test_config_rejections():
    with pytest.raises(ConfigError, match="k must be ≥ 1"):
        config_from_dict({**MINIMAL, "k": 0})
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({**MINIMAL, "kk": 1})
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({**MINIMAL, "adversary": {"kind": "bayes_sign", "colour": 1}})
    with pytest.raises(ConfigError, match="adversary.kind"):
        config_from_dict({**MINIMAL, "adversary": {"kind": "clever"}})
    with pytest.raises(ConfigError, match="sigma"):
        config_from_dict({**MINIMAL, "sigma": -1.0})
    with pytest.raises(ConfigError, match="adversary"):
        config_from_dict({k: v for k, v in MINIMAL.items() if k != "adversary"})


def test_parse_config_list_and_wrapper(tmp_path):
    items = [{**MINIMAL, "k": k} for k in (2, 3, 4, 5, 6)]
    out = parse_config(_write(tmp_path, "list.json", items))
    assert [c.k for c in out] == [2, 3, 4, 5, 6]
    out = parse_config(_write(tmp_path, "wrapped.json", {"configs": items}))
    assert len(out) == 5
    with pytest.raises(ConfigError, match=r"configs\[1\]"):
        parse_config(_write(tmp_path, "bad.json", [MINIMAL, {**MINIMAL, "k": 0}]))
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "missing.json")


def test_config_round_trip():
    cfg = config_from_dict({**MINIMAL, "mechanism": {"kind": "uniform_schedule",
                                                     "w_schedule": [1.0, 2.0, 0.0]},
                            "conjunction": "sum"})
    assert config_from_dict(json.loads(json.dumps(config_to_dict(cfg)))) == cfg


def test_fmt_uses_nine_significant_digits():
    assert fmt(1 / 3) == "0.333333333"
    assert fmt(12345678912.0) == "1.23456789e+10"
    assert fmt(7) == "7" and fmt("x") == "x"


def test_emit_results_headers_order_and_force(tmp_path):
    configs = [config_from_dict({**MINIMAL, "k": k}) for k in (4, 2)]
    reports = [harness.estimate_risk(c) for c in configs]
    manifest = RunManifest(None, tmp_path, "sweep", {})
    results, plot = emit_results(reports, manifest)
    rows = _read_csv(results)
    assert rows[0] == cli.RESULTS_HEADER + cli.RESULTS_EXTRA
    assert len(rows) == 1 + 4 + 2
    assert rows[1][5] == fmt(reports[0].per_round[0].bias_hat)
    plot_rows = _read_csv(plot)
    assert plot_rows[0] == cli.PLOT_HEADER
    assert [r[0] for r in plot_rows[1:]] == ["2", "4"]
    with pytest.raises(FileExistsError, match="--force"):
        emit_results(reports, manifest)
    emit_results(reports, RunManifest(None, tmp_path, "sweep", {}, force=True))
    with pytest.raises(ValueError):
        emit_results([], manifest)


def test_selftest_passes_and_is_stable():
    first, second = io.StringIO(), io.StringIO()
    assert selftest(out=first) == 0
    assert selftest(out=second) == 0
    assert "8/8 checks passed" in first.getvalue()
    strip = lambda s: [line.split(" (")[0] for line in s.splitlines()]  # noqa: E731
    assert strip(first.getvalue()) == strip(second.getvalue())


def test_selftest_names_failed_check():
    out = io.StringIO()
    assert selftest({"operator_identity_Ax": 0.0}, out=out) == 1
    text = out.getvalue()
    assert "FAIL operator_identity_Ax " in text
    assert "failed: operator_identity_Ax" in text


def test_main_sweep_and_refusal(tmp_path, capsys):
    cfg = _write(tmp_path, "c.json", [MINIMAL, {**MINIMAL, "k": 2}])
    out = tmp_path / "out"
    log = io.StringIO()
    assert main(["--command", "sweep", "--config", str(cfg), "--out", str(out)], log=log) == 0
    assert (out / "results.csv").exists() and (out / "plotdata_risk_vs_k.csv").exists()
    before = (out / "results.csv").read_text()
    assert main(["--command", "sweep", "--config", str(cfg), "--out", str(out)], log=log) == 2
    assert "--force" in log.getvalue()
    assert main(["--command", "sweep", "--config", str(cfg), "--out", str(out), "--force",
                 "--seed", "9"], log=log) == 0
    assert (out / "results.csv").read_text() != before


def test_main_argument_errors(tmp_path):
    log = io.StringIO()
    assert main(["--command", "sweep"], log=log) == 2
    cfg = _write(tmp_path, "c.json", MINIMAL)
    assert main(["--command", "sweep", "--config", str(cfg), "--reps", "0"], log=log) == 2
    bad = _write(tmp_path, "bad.json", {**MINIMAL, "k": 0})
    assert main(["--command", "sweep", "--config", str(bad), "--out", str(tmp_path)], log=log) == 2
    assert "k must be ≥ 1" in log.getvalue()


def test_sweep_with_failing_config_exits_2(tmp_path):
    bad = {**MINIMAL, "k": 2, "adversary": {"kind": "fixed_sequence", "queries": [
        {"variance": 1.0}, {"variance": 1.0, "cov_with_history": [2.0]}]}}
    cfg = _write(tmp_path, "c.json", [bad, MINIMAL])
    log = io.StringIO()
    assert main(["--command", "sweep", "--config", str(cfg), "--out", str(tmp_path)], log=log) == 2
    assert "config 0 failed" in log.getvalue()
    assert len(_read_csv(tmp_path / "results.csv")) == 1 + 3


def test_game_command_writes_transcripts(tmp_path):
    cfg = _write(tmp_path, "c.json", MINIMAL)
    assert main(["--command", "game", "--config", str(cfg), "--out", str(tmp_path),
                 "--reps", "2"], log=io.StringIO()) == 0
    rows = _read_csv(tmp_path / "transcripts.csv")
    assert rows[0] == cli.TRANSCRIPT_HEADER
    assert len(rows) == 1 + 2 * 3
    for row in rows[1:]:
        release, noise, phi = float(row[9]), float(row[10]), float(row[11])
        assert release == pytest.approx(phi + noise, rel=1e-8, abs=1e-8)


def test_bounds_command(tmp_path):
    cfg = _write(tmp_path, "c.json", {**MINIMAL, "k": 10})
    assert main(["--command", "bounds", "--config", str(cfg), "--out", str(tmp_path)],
                log=io.StringIO()) == 0
    rows = _read_csv(tmp_path / "bounds.csv")
    assert rows[0] == cli.BOUNDS_HEADER
    row = dict(zip(rows[0], rows[1]))
    assert float(row["k_step_mse"]) == pytest.approx(8.0)
    assert float(row["k_step_bias_sq"]) == pytest.approx(4.0)


def test_noiseopt_command(tmp_path):
    cfg = _write(tmp_path, "n.json", {"sigma": 1.0, "w": [0.0, 2.0], "n_points": 401})
    assert main(["--command", "noiseopt", "--config", str(cfg), "--out", str(tmp_path)],
                log=io.StringIO()) == 0
    rows = _read_csv(tmp_path / "noiseopt.csv")
    assert rows[0] == cli.NOISEOPT_HEADER
    zero, two = (dict(zip(rows[0], r)) for r in rows[1:])
    assert float(zero["margin"]) == pytest.approx(0.7978845608, rel=1e-4)
    assert zero["dual_u1"] == "" and zero["tv_to_uniform"] == ""
    assert float(two["dual_objective_bound"]) <= float(two["lp_objective"]) + 1e-9
    assert float(two["margin_lower_bound"]) <= float(two["margin"]) <= float(two["uniform_margin"])
    density = (tmp_path / two["density_file"]).read_text().split()
    weights = [float(x) for x in density[1::2]]
    assert sum(weights) == pytest.approx(1.0, abs=1e-9)
