import logging
from pathlib import Path

import numpy as np
import pytest

from horizon_nmpc.adapt import AdaptationConfig, Status
from horizon_nmpc.cli import (
    CONFIG_KEYS,
    RUN_FLAGS,
    ConfigError,
    emit_trace_csv,
    load_config,
    main,
    parse_config,
    read_trace_csv,
)
from horizon_nmpc.cloop import ClosedLoopTrace, StepRecord

MINIMAL = "model = scalar_linear\nx0 = 1.0\nsteps = 3\n"


def _write(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _scalar_config(tmp_path, out="out", extra="", steps=12):
    return _write(
        tmp_path,
        f"""# small scalar run
model = scalar_linear
x0 = 2.0
steps = {steps}
param.a = 1.3
param.rho = 2.0
out = {tmp_path / out}
{extra}""",
    )


class TestParse:
    def test_defaults(self, caplog):
        with caplog.at_level(logging.INFO, logger="horizon_nmpc"):
            cfg = parse_config(MINIMAL)
        assert (cfg.alpha_bar, cfg.epsilon, cfg.T, cfg.N_hat, cfg.sigma, cfg.N_min, cfg.N_max) == (0.5, 1e-5, 0.2, 2, 5, 2, 30)
        assert "default applied: alpha_bar = 0.5" in caplog.text
        assert "reference" not in caplog.text

    def test_alpha_bar_range(self):
        with pytest.raises(ConfigError, match=r":4: alpha_bar: 1.5 outside \(0, 1\)"):
            parse_config(MINIMAL + "alpha_bar = 1.5\n")

    def test_duplicate_cites_both_lines(self):
        with pytest.raises(ConfigError, match=r":5: duplicate key 'steps' \(first set on line 3\)"):
            parse_config(MINIMAL + "\nsteps = 4\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'horizon'"):
            parse_config(MINIMAL + "horizon = 3\n")

    def test_missing_required(self):
        with pytest.raises(ConfigError, match="missing required key.*steps"):
            parse_config("model = arp\nx0 = 0 0 0 0 10 0 0 0\n")

    def test_state_dimension(self):
        with pytest.raises(ConfigError, match="x0 has 2 entries"):
            parse_config("model = scalar_linear\nx0 = 1, 2\nsteps = 1\n")

    def test_arp_only_keys(self):
        with pytest.raises(ConfigError, match="only applies to the arp model"):
            parse_config(MINIMAL + "reference = zeta\n")

    def test_reference_sources_exclusive(self):
        text = "model = arp\nx0 = 0 0 0 0 10 0 0 0\nsteps = 1\nreference = zeta\nreference_file = r.dat\n"
        with pytest.raises(ConfigError, match="not both"):
            parse_config(text)

    def test_model_parameters(self):
        cfg = parse_config(MINIMAL + "param.a = 1.25\n")
        assert cfg.params == {"a": 1.25}
        with pytest.raises(ConfigError, match="unknown parameter 'k1'"):
            parse_config(MINIMAL + "param.k1 = 2\n")

    def test_cross_field_checks(self):
        with pytest.raises(ConfigError, match="N_max"):
            parse_config(MINIMAL + "N_max = 2\nN_min = 3\nN_hat = 2\n")

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match=":1: expected 'key = value'"):
            parse_config("model scalar_linear\n")

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# header\n\nmodel = scalar_linear  # trailing\nx0 = 0.5\nsteps = 2\nshorten = off\n")
        assert cfg.x0 == (0.5,) and cfg.shorten is False

    def test_bundled_configs_parse(self):
        root = Path(__file__).resolve().parents[1] / "configs"
        for path in sorted(root.glob("*.cfg")):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            load_config(tmp_path / "nope.cfg")


def _two_state_trace(alpha):
    rec = StepRecord(0, 0.0, np.array([1.0, 1 / 3]), np.array([-0.1]), 3, alpha, 0.1 + 0.2, 1e-300, 1, 2, 0.0123, Status.CERTIFIED)
    return ClosedLoopTrace((rec,), np.array([0.0, 0.0]), AdaptationConfig(), 0.2)


class TestTraceCsv:
    def test_single_row(self, tmp_path):
        path = tmp_path / "t.csv"
        emit_trace_csv(_two_state_trace(0.75), path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert lines[0] == "n,t,x0,x1,u0,N,alpha,V,l,inner_iters,ocp_solves,wall_ms"

    def test_skip_sentinel(self, tmp_path):
        path = tmp_path / "t.csv"
        emit_trace_csv(_two_state_trace(None), path)
        assert path.read_text().splitlines()[1].split(",")[6] == "skip"
        assert read_trace_csv(path)[0]["alpha"] is None

    def test_round_trip_bitwise(self, tmp_path):
        path = tmp_path / "t.csv"
        tr = _two_state_trace(2 / 3)
        emit_trace_csv(tr, path)
        row = read_trace_csv(path)[0]
        s = tr.steps[0]
        assert row["x1"] == s.x[1] and row["alpha"] == s.alpha and row["V"] == s.V and row["l"] == s.l
        assert row["u0"] == s.u[0] and row["N"] == s.N and row["ocp_solves"] == s.ocp_solves

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError, match="cannot write trace"):
            emit_trace_csv(_two_state_trace(0.5), tmp_path / "missing" / "t.csv")


class TestCommand:
    def test_run_writes_outputs(self, tmp_path):
        cfg = _scalar_config(tmp_path, extra="strategy = simple\n")
        assert main(["run", "--config", str(cfg), "--strategy", "fixedpoint", "--estimate", "apriori"]) == 0
        out = tmp_path / "out"
        names = {p.name for p in out.iterdir()}
        assert {"trace.csv", "summary.txt", "report.csv", "horizons.dat", "alphas.dat", "run.log"} <= names
        log_text = (out / "run.log").read_text()
        assert "flag override: strategy = fixedpoint" in log_text
        assert "adaptive fixedpoint/apriori" in (out / "summary.txt").read_text()
        horizons = (out / "horizons.dat").read_text().splitlines()
        assert horizons[0].startswith("#") and len(horizons) == 13

    def test_baseline_row(self, tmp_path):
        cfg = _scalar_config(tmp_path)
        assert main(["run", "--config", str(cfg), "--compare-fixed", "6", "--no-report"]) == 0
        summary = (tmp_path / "out" / "summary.txt").read_text()
        row = next(line for line in summary.splitlines() if line.startswith("standard N=6"))
        assert row.split()[-3:] == ["6", "6", "6.00"]
        assert not (tmp_path / "out" / "report.csv").exists()

    def test_out_flag(self, tmp_path):
        cfg = _scalar_config(tmp_path)
        other = tmp_path / "elsewhere"
        assert main(["run", "--config", str(cfg), "--out", str(other), "--no-report"]) == 0
        assert (other / "trace.csv").exists() and not (tmp_path / "out").exists()

    def test_missing_config(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "absent.cfg")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_config_exit_code(self, tmp_path, capsys):
        cfg = _write(tmp_path, MINIMAL + "alpha_bar = 2\n")
        assert main(["run", "--config", str(cfg)]) == 1
        assert "alpha_bar" in capsys.readouterr().err

    def test_cap_hit_exit_code(self, tmp_path):
        cfg = _scalar_config(tmp_path, extra="N_max = 2\n")
        assert main(["run", "--config", str(cfg), "--no-report"]) == 2
        assert "no (horizon cap hit)" in (tmp_path / "out" / "summary.txt").read_text()

    def test_deterministic_trace(self, tmp_path):
        a = _scalar_config(tmp_path, out="a")
        b = _write(tmp_path, a.read_text().replace(str(tmp_path / "a"), str(tmp_path / "b")), "b.cfg")
        assert main(["run", "--config", str(a), "--no-report"]) == 0
        assert main(["run", "--config", str(b), "--no-report"]) == 0
        rows_a = read_trace_csv(tmp_path / "a" / "trace.csv")
        rows_b = read_trace_csv(tmp_path / "b" / "trace.csv")
        for ra, rb in zip(rows_a, rows_b):
            ra.pop("wall_ms"), rb.pop("wall_ms")
            assert ra == rb

    def test_alphas_file_marks_skips(self, tmp_path):
        cfg = _scalar_config(tmp_path, steps=80)
        assert main(["run", "--config", str(cfg), "--no-report"]) == 0
        values = [line.split()[1] for line in (tmp_path / "out" / "alphas.dat").read_text().splitlines()[1:]]
        assert "nan" in values
        assert all(v == "nan" or float(v) >= 0.5 for v in values)

    def test_help_lists_every_flag(self, capsys):
        with pytest.raises(SystemExit):
            main(["run", "--help"])
        text = capsys.readouterr().out
        for flag, key in RUN_FLAGS.items():
            assert f"--{flag.replace('_', '-')}" in text
            assert f"config key: {key}" in text
            assert key in CONFIG_KEYS

    def test_batch(self, tmp_path, capsys):
        a = _scalar_config(tmp_path, out="a")
        b = _write(tmp_path, a.read_text().replace(str(tmp_path / "a"), str(tmp_path / "b")), "b.cfg")
        assert main(["batch", str(a), str(b), "--jobs", "1", "--no-report"]) == 0
        assert (tmp_path / "a" / "trace.csv").exists() and (tmp_path / "b" / "trace.csv").exists()

    def test_batch_rejects_shared_output(self, tmp_path, capsys):
        a = _scalar_config(tmp_path, out="same")
        b = _write(tmp_path, a.read_text(), "b.cfg")
        assert main(["batch", str(a), str(b)]) == 1
        assert "share output" in capsys.readouterr().err

