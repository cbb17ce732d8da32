"""Experiment files and the command line wrapper."""

import filecmp
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from bsre.cli import main
from bsre.config import load_config, parse_config, save_config
from bsre.errors import InvalidConfigurationError


def _read(path: Path) -> dict:
    return json.loads(path.read_text())


class TestConfigParsing:
    def test_round_trip_preserves_every_field(self, configs_dir, tmp_path):
        cfg = load_config(configs_dir / "verify_small.json")
        assert cfg.to_dict() == _read(configs_dir / "verify_small.json")
        out = tmp_path / "again.json"
        save_config(cfg, out)
        assert load_config(out).to_dict() == cfg.to_dict()

    def test_all_shipped_files_parse(self, configs_dir):
        files = sorted(configs_dir.glob("*.json"))
        assert len(files) == 6
        for f in files:
            cfg = load_config(f)
            assert cfg.model.basis.N >= 2
            assert cfg.grid.L >= 25

    def test_unknown_section_key_names_the_offender(self, configs_dir):
        raw = _read(configs_dir / "verify_small.json")
        raw["solver"]["bogus"] = 1
        with pytest.raises(InvalidConfigurationError, match="bogus"):
            parse_config(raw)

    def test_unknown_top_level_key_rejected(self, configs_dir):
        raw = _read(configs_dir / "verify_small.json")
        raw["extra_section"] = {}
        with pytest.raises(InvalidConfigurationError, match="extra_section"):
            parse_config(raw)

    def test_initial_state_length_must_match_truncation(self, configs_dir):
        raw = _read(configs_dir / "verify_small.json")
        raw["control"]["x"] = [1.0, 0.5, 0.25]
        with pytest.raises(InvalidConfigurationError, match="entries"):
            parse_config(raw).control_x()

    def test_memory_budget_guards_path_count(self, configs_dir):
        raw = _read(configs_dir / "verify_small.json")
        raw["solver"]["n_paths"] = 10**9
        with pytest.raises(InvalidConfigurationError, match="GB"):
            parse_config(raw)

    def test_weight_exponent_outside_interval_rejected(self, configs_dir):
        raw = _read(configs_dir / "verify_small.json")
        raw["model"]["rho"] = 0.6
        with pytest.raises(InvalidConfigurationError, match=r"1/4.*1/2"):
            parse_config(raw)


class TestCli:
    def test_solve_writes_artifacts_and_reports_trace(self, configs_dir, tmp_path,
                                                     capsys):
        rc = main(["solve-riccati", "--config",
                   str(configs_dir / "verify_small.json"),
                   "--output-dir", str(tmp_path)])
        assert rc == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["verify-small_meta.json", "verify-small_p0.csv",
                         "verify-small_surface.csv"]
        out = capsys.readouterr().out
        assert "P(0) trace" in out

    def test_repeat_runs_are_byte_identical(self, configs_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            rc = main(["solve-riccati", "--config",
                       str(configs_dir / "verify_small.json"),
                       "--output-dir", str(d)])
            assert rc == 0
        for name in ("verify-small_meta.json", "verify-small_p0.csv",
                     "verify-small_surface.csv"):
            assert filecmp.cmp(a / name, b / name, shallow=False)
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_initial_operator_csv_round_trips_bitwise(self, configs_dir, tmp_path):
        from bsre.riccati import riccati_solve

        cfg = load_config(configs_dir / "verify_small.json")
        rc = main(["solve-riccati", "--config",
                   str(configs_dir / "verify_small.json"),
                   "--output-dir", str(tmp_path)])
        assert rc == 0
        rows = (tmp_path / "verify-small_p0.csv").read_text().strip().splitlines()
        N = cfg.model.basis.N
        header = [float(v) for v in rows[0].split(",")]
        assert header[0] == N and header[1] == cfg.model.basis.rho
        table = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        sol = riccati_solve(cfg.model, cfg.grid, cfg.riccati_config())
        assert table.shape == (N, N)
        assert np.array_equal(table, sol.P0().entries)

    def test_missing_config_is_a_usage_error(self, tmp_path, capsys):
        rc = main(["solve-riccati", "--config", str(tmp_path / "nope.json")])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "invalid-configuration"

    def test_bad_weight_exponent_is_a_usage_error(self, configs_dir, tmp_path,
                                                  capsys):
        raw = _read(configs_dir / "verify_small.json")
        raw["model"]["rho"] = 0.6
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(raw))
        rc = main(["solve-riccati", "--config", str(bad)])
        assert rc == 2
        err = capsys.readouterr().err
        assert "1/4" in err and "1/2" in err

    def test_oracle_compare_fails_at_impossible_tolerance(self, configs_dir,
                                                          tmp_path, capsys):
        rc = main(["oracle-compare", "--config",
                   str(configs_dir / "lyapunov_closed_form.json"),
                   "--output-dir", str(tmp_path), "--tol", "1e-300"])
        assert rc == 1
        assert "max |solved - oracle|" in capsys.readouterr().out

    def test_oracle_compare_needs_constant_coefficients(self, configs_dir,
                                                        tmp_path, capsys):
        rc = main(["oracle-compare", "--config",
                   str(configs_dir / "random_field.json"),
                   "--output-dir", str(tmp_path)])
        assert rc == 2
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert err["error"] == "invalid-configuration"

    def test_quick_verify_passes_on_small_instance(self, configs_dir, tmp_path,
                                                   capsys):
        rc = main(["verify", "--config", str(configs_dir / "verify_small.json"),
                   "--output-dir", str(tmp_path), "--quick"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert "PASS" in out

    def test_console_script_is_installed(self):
        proc = subprocess.run(["bsre", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "solve-riccati" in proc.stdout

    def test_solve_lyapunov_renders_figures_next_to_tables(self, configs_dir,
                                                           tmp_path):
        rc = main(["solve-lyapunov", "--config",
                   str(configs_dir / "lyapunov_closed_form.json"),
                   "--output-dir", str(tmp_path)])
        assert rc == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert "lyapunov-closed-form_surface.csv" in names
        pngs = [n for n in names if n.endswith(".png")]
        assert pngs == ["lyapunov-closed-form_eigs.png",
                        "lyapunov-closed-form_qks.png"]
        for n in pngs:
            assert (tmp_path / n).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_no_figures_flag_suppresses_rendering(self, configs_dir, tmp_path):
        rc = main(["solve-lyapunov", "--config",
                   str(configs_dir / "lyapunov_closed_form.json"),
                   "--output-dir", str(tmp_path), "--no-figures"])
        assert rc == 0
        assert not list(tmp_path.glob("*.png"))
        assert list(tmp_path.glob("*.csv"))

    def test_simulate_writes_paired_costs_table(self, configs_dir, tmp_path,
                                                capsys):
        cfg = load_config(configs_dir / "verify_small.json")
        rc = main(["simulate", "--config",
                   str(configs_dir / "verify_small.json"),
                   "--output-dir", str(tmp_path)])
        assert rc == 0
        rows = (tmp_path / "verify-small_costs.csv").read_text().splitlines()
        assert rows[0] == "path,cost"
        costs = np.array([float(r.split(",")[1]) for r in rows[1:]])
        assert costs.shape[0] == cfg.control["n_paths"]
        summary = _read(tmp_path / "verify-small_cost.json")
        assert float(costs.mean()) == pytest.approx(summary["mean_cost"],
                                                    rel=1e-12)
        assert "ensemble cost" in capsys.readouterr().out

    def test_simulate_figures_include_trajectory_panel(self, configs_dir,
                                                       tmp_path):
        raw = _read(configs_dir / "verify_small.json")
        raw["report"]["figures"] = True
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(raw))
        out = tmp_path / "out"
        rc = main(["simulate", "--config", str(cfg_path),
                   "--output-dir", str(out)])
        assert rc == 0
        assert (out / "verify-small_traj.png").stat().st_size > 0
        assert (out / "verify-small_traj.csv").stat().st_size > 0
