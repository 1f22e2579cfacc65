import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnep import cli
from gnep import newton as nt

NOMINAL = """\
format_version: 1
scenario:
  name: ramp_merging
  params: {M: 3, N: 21}
samples: 1
perturb: false
seed: 0
"""


def _cfg(text=NOMINAL):
    return cli.parse_config(text, "test.yaml")


def test_parse_defaults():
    cfg = _cfg()
    assert cfg.scenario == "ramp_merging" and cfg.scenario_params == {"M": 3, "N": 21}
    assert cfg.samples == 1 and cfg.baseline == "algames" and not cfg.perturb


@pytest.mark.parametrize("text,line,field", [
    ("scenario: ramp_merging\nsamples: 0\n", 2, "samples"),
    ("scenario: roundabout\n", 1, "scenario.name"),
    ("scenario: ramp_merging\nsolver:\n  tol_residual: 1e-3\n  warp: 2\n", 4, "solver.warp"),
    ("seed: 1\nbogus: 3\n", 2, "bogus"),
    ("format_version: 7\n", 1, "format_version"),
    ("scenario:\n  name: ramp_merging\n  params: {M: 9}\n", 3, "scenario.params"),
])
def test_config_errors_name_line_and_field(text, line, field):
    with pytest.raises(cli.ConfigError) as exc:
        cli.parse_config(text, "bad.yaml")
    msg = str(exc.value)
    assert msg.startswith(f"bad.yaml:{line}:") and f"'{field}'" in msg


def test_yaml_syntax_error_has_position():
    with pytest.raises(cli.ConfigError, match=r"bad.yaml:2:"):
        cli.parse_config("seed: 1\nsamples: : 2\nx: 1\n", "bad.yaml")


def test_config_round_trip():
    cfg = _cfg(NOMINAL + "baseline: {name: penalty, rho_fixed: 2.5}\nmpc: {knots: 20}\n")
    again = cli.parse_config(cli.dump_config(cfg))
    assert again == cfg


def test_fmt_is_round_trip_decimal():
    for v in (0.1, 1 / 3, 1e-300, 123456789.123456789, -2.5e17):
        assert float(cli.fmt(v)) == v
    assert cli.fmt(3) == "3" and cli.fmt(True) == "true"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=8))
def test_digest_depends_only_on_values(xs):
    assert cli.digest(xs) == cli.digest(np.array(xs))


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    out = tmp_path_factory.mktemp("solve")
    summ = cli.run_solve(_cfg(), out)
    return out, summ


def test_nominal_ramp_merge_record(solved):
    out, summ = solved
    recs = cli.read_jsonl(out / cli.RECORDS)
    assert len(recs) == 1
    r = recs[0]
    assert r["status"] == nt.CONVERGED and r["seed"] == 0 and r["format_version"] == cli.FORMAT_VERSION
    assert r["max_violation"] <= 1e-3 and r["residual_l1"] <= 1e-2
    assert summ["convergence_rate"] == 1.0


def test_rerun_is_byte_identical(solved, tmp_path):
    out, _ = solved
    cli.run_solve(_cfg(), tmp_path)
    for name in (cli.RECORDS, cli.SUMMARY, cli.CONFIG_COPY):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_written_files_reparse(solved):
    out, summ = solved
    cfg = cli.load_config(out / cli.CONFIG_COPY)
    assert cfg == _cfg()
    assert json.loads((out / cli.SUMMARY).read_text()) == json.loads(cli.dumps(summ))
    assert cli.aggregate(cli.read_jsonl(out / cli.RECORDS)) == summ


def test_wall_times_stored_apart(solved):
    out, _ = solved
    assert "wall_time" not in cli.read_jsonl(out / cli.RECORDS)[0]
    assert cli.read_jsonl(out / cli.TIMINGS)[0]["wall_time"] > 0


def test_aggregate_recomputes_from_rows():
    rows = [{"status": nt.CONVERGED, "inner_iters": k, "max_violation": v}
            for k, v in [(3, 1e-5), (9, 2e-4), (5, 1e-9)]]
    rows.append({"status": nt.MAX_ITERS, "inner_iters": 200, "max_violation": 0.3})
    a = cli.aggregate(rows)
    assert a["samples"] == 4 and a["converged"] == 3 and a["convergence_rate"] == 0.75
    assert a["inner_iter_quantiles"]["p50"] == 5.0
    assert a["max_violation_worst"] == 0.3 and a["satisfied_1e-3"] == 3
    assert cli.aggregate(json.loads(json.dumps(rows))) == a


def test_plot_tables(solved):
    out, _ = solved
    names = cli.emit_plots_data(out)
    assert {"hist_violation.csv", "hist_iterations.csv", "convergence.csv", "hist_time.csv"} <= set(names)
    header, rows = cli.read_csv(out / "hist_violation.csv")
    assert header == ["lo", "hi", "count"] and len(rows) == 32
    assert float(rows[0][0]) == 1e-8 and float(rows[-1][1]) == 1.0
    ratios = [float(r[1]) / float(r[0]) for r in rows]
    assert np.allclose(ratios, ratios[0])
    assert sum(int(r[2]) for r in rows) == 1
    first = {n: (out / n).read_bytes() for n in names}
    cli.emit_plots_data(out)
    assert all((out / n).read_bytes() == b for n, b in first.items())


def test_plot_tables_need_a_run(tmp_path):
    with pytest.raises(FileNotFoundError):
        cli.emit_plots_data(tmp_path)
    with pytest.raises(FileNotFoundError):
        cli.emit_plots_data(tmp_path / "missing")
    (tmp_path / "notes.txt").write_text("x")
    with pytest.raises(FileNotFoundError):
        cli.emit_plots_data(tmp_path)


def test_workers_env_overrides(monkeypatch):
    monkeypatch.delenv("GNEP_WORKERS", raising=False)
    assert cli.worker_count(None) == 1 and cli.worker_count(3) == 3
    monkeypatch.setenv("GNEP_WORKERS", "2")
    assert cli.worker_count(5) == 2
    monkeypatch.setenv("GNEP_WORKERS", "many")
    with pytest.raises(cli.ConfigError):
        cli.worker_count(1)


def test_main_verbs(tmp_path, capsys):
    cfgfile = tmp_path / "c.yaml"
    cfgfile.write_text(NOMINAL.replace("N: 21", "N: 11"))
    out = tmp_path / "run"
    assert cli.main(["solve", "--config", str(cfgfile), "--out", str(out), "--solver", "penalty"]) == 0
    summ = json.loads(capsys.readouterr().out)
    assert summ["samples"] == 1
    assert cli.load_config(out / cli.CONFIG_COPY).baseline == "penalty"
    assert cli.main(["plotdata", "--out", str(out)]) == 0
    assert cli.main(["plotdata", "--out", str(tmp_path / "none")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("samples: 0\n")
    assert cli.main(["mc", "--config", str(bad)]) == 2
    assert "bad.yaml:1:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["solve", "--solver", "oracle"])


def test_mpc_run_files(tmp_path):
    text = ("scenario: {name: ramp_merging, params: {M: 2}}\nsamples: 2\nseed: 4\n"
            "mpc: {knots: 20, sim_duration_seconds: 0.631578947368421}\n")
    cfg = cli.parse_config(text)
    summ = cli.run_mpc(cfg, tmp_path / "a")
    cli.run_mpc(cfg, tmp_path / "b")
    assert summ["runs"] == 2
    for name in (cli.MPC_RUNS, cli.MPC_TICKS, "ranks.csv", cli.SUMMARY):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    runs = cli.read_jsonl(tmp_path / "a" / cli.MPC_RUNS)
    assert [r["seed"] for r in runs] == [4, 5]
    assert sum(summ["rank_histogram"].values()) == sum(r["rank"] is not None for r in runs)
    ticks = cli.read_jsonl(tmp_path / "a" / cli.MPC_TICKS)
    assert len(ticks) == 2 * 4
    assert "rank_bars.csv" in cli.emit_plots_data(tmp_path / "a")


def test_analysis_files(tmp_path):
    text = "scenario: {name: drone_doorway, params: {M: 2, N: 21}}\nanalysis: {perturbations: 2}\n"
    res = cli.run_analysis(cli.parse_config(text), tmp_path)
    assert res["nullspace_dim"] >= res["active_shared_rows"]
    assert res["nullspace_residual"] <= 1e-8 * max(1.0, res["rows"])
    eig = [float(r[1]) for r in cli.read_csv(tmp_path / "eigenvalues.csv")[1]]
    assert abs(sum(eig) - res["pca_total_variance"]) <= 1e-10 * max(1.0, res["pca_total_variance"])
    assert json.loads((tmp_path / cli.ANALYSIS).read_text()) == json.loads(cli.dumps(res))


def test_analysis_needs_equilibrium(tmp_path):
    text = "scenario: {name: drone_doorway, params: {M: 2, N: 11}}\nsolver: {inner_max_iters: 1, outer_max_iters: 1}\n"
    with pytest.raises(cli.an.NotConverged):
        cli.run_analysis(cli.parse_config(text), tmp_path)
