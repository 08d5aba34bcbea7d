"""Configuration loading, validation, hashing, and the command line."""

import json
import shutil
import subprocess
import sys

import pytest
import yaml

from rbdsdep.cli import main, run_pipeline
from rbdsdep.config import PIPELINES, config_from_dict, load_config
from rbdsdep.errors import ConfigError


def minimal() -> dict:
    return {
        "grid": {"T": 1.0, "N": 4},
        "problem": {"f": "0", "barrier": "-10", "terminal": "0"},
    }


def merged(**sections) -> dict:
    data = minimal()
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return data


class TestConfigDefaults:
    def test_minimal_resolves_documented_defaults(self):
        cfg = config_from_dict(minimal())
        assert cfg.pipeline == "solve"
        assert cfg.dim_d == 1
        assert cfg.marks.m == 0
        assert cfg.paths == 4096
        assert cfg.seed == 2024
        assert cfg.mode == "two-point"
        assert cfg.solver_kind == "tree"
        assert cfg.scheme.basis == "poly"
        assert cfg.scheme.degree == 2
        assert cfg.tree_max_steps == 6
        assert cfg.bracketing_count == 5
        assert cfg.out_dir == "out"
        assert cfg.formats == ["csv", "json"]
        assert cfg.problem.generator.growth_C == 1.0
        assert cfg.problem.generator.contraction_alpha == 0.5
        assert cfg.envelope is None
        assert cfg.ito is None

    def test_pipeline_names(self):
        assert PIPELINES == (
            "solve",
            "inf_sequence",
            "bracketing",
            "sup_sequence",
            "compare",
            "ito_check",
        )


class TestConfigHash:
    def test_hash_is_stable_and_default_insensitive(self):
        base = config_from_dict(minimal()).config_hash
        assert len(base) == 64
        assert base == config_from_dict(minimal()).config_hash
        # spelling out a default does not change the canonical form
        explicit = config_from_dict(
            merged(drivers={"seed": 2024}, dims={"d": 1})
        ).config_hash
        assert explicit == base

    def test_hash_tracks_content(self):
        base = config_from_dict(minimal()).config_hash
        bumped = config_from_dict(merged(drivers={"seed": 7})).config_hash
        assert bumped != base


class TestConfigValidation:
    def test_unknown_keys_are_named(self):
        with pytest.raises(ConfigError, match="unknown key 'configuration.grids'"):
            config_from_dict(merged(grids={}))
        with pytest.raises(ConfigError, match="unknown key 'scheme.solvers'"):
            config_from_dict(merged(scheme={"solvers": "tree"}))
        with pytest.raises(ConfigError, match="unknown key 'problem.h'"):
            config_from_dict(merged(problem={"h": "0"}))

    def test_missing_required_keys(self):
        with pytest.raises(ConfigError, match="missing required key 'grid.T'"):
            config_from_dict({"problem": minimal()["problem"]})
        data = minimal()
        del data["problem"]
        with pytest.raises(
            ConfigError, match="missing required key 'configuration.problem'"
        ):
            config_from_dict(data)
        with pytest.raises(ConfigError, match="missing required key 'problem.f'"):
            config_from_dict(merged(problem={"f": None}))

    def test_type_errors_are_specific(self):
        with pytest.raises(ConfigError, match="'grid.T' must be a number"):
            config_from_dict(merged(grid={"T": True}))
        with pytest.raises(ConfigError, match="'grid.N' must be an integer"):
            config_from_dict(merged(grid={"N": 2.5}))
        with pytest.raises(ConfigError, match="'problem.f' must be a string"):
            config_from_dict(merged(problem={"f": 0}))
        with pytest.raises(ConfigError, match="problem must be a mapping"):
            config_from_dict(merged(problem=3))

    def test_contraction_alpha_range(self):
        with pytest.raises(ConfigError, match="alpha"):
            config_from_dict(merged(problem={"alpha": 1.0}))

    def test_two_point_intensity_budget(self):
        data = merged(marks={"values": [1.0], "intensities": [20.0]})
        with pytest.raises(ConfigError, match="total_intensity \\* dt < 1"):
            config_from_dict(data)

    def test_tree_depth_bound_only_when_a_tree_is_built(self):
        deep = merged(grid={"T": 1.0, "N": 8})
        with pytest.raises(ConfigError, match="tree depth N = 8 exceeds"):
            config_from_dict(deep)
        cfg = config_from_dict(merged(grid={"T": 1.0, "N": 8}, scheme={"solver": "lsmc"}))
        assert cfg.grid.N == 8

    def test_drivers_mode_choices(self):
        with pytest.raises(ConfigError, match="'drivers.mode' must be one of"):
            config_from_dict(merged(drivers={"mode": "uniform"}))
        cfg = config_from_dict(merged(drivers={"mode": "enumerate"}))
        assert cfg.mode == "enumerate"

    def test_compare_needs_problem2_and_shares_g(self):
        with pytest.raises(ConfigError, match="needs a 'problem2' section"):
            config_from_dict(merged(pipeline="compare"))
        with pytest.raises(
            ConfigError, match="'problem2' is only meaningful for the compare"
        ):
            config_from_dict(merged(problem2={"f": "1"}))
        with pytest.raises(
            ConfigError, match="'problem2.g' is not allowed: the comparison shares g"
        ):
            config_from_dict(
                merged(pipeline="compare", problem2={"f": "1", "g": "0"})
            )
        cfg = config_from_dict(merged(pipeline="compare", problem2={"f": "1"}))
        assert cfg.problem2.generator.f is not None
        # untouched fields fall back to the first problem
        assert cfg.canonical["problem2"]["terminal"] == "0"

    def test_sequence_pipelines_need_an_envelope(self):
        with pytest.raises(ConfigError, match="pipeline 'inf_sequence' needs an 'envelope'"):
            config_from_dict(merged(pipeline="inf_sequence"))
        with pytest.raises(ConfigError, match="pipeline 'sup_sequence' needs an 'envelope'"):
            config_from_dict(merged(pipeline="sup_sequence"))

    def test_bracketing_needs_pi_and_rate(self):
        with pytest.raises(ConfigError, match="needs 'problem.pi'"):
            config_from_dict(merged(pipeline="bracketing"))
        with pytest.raises(ConfigError, match="needs 'problem.f_t'"):
            config_from_dict(
                merged(pipeline="bracketing", problem={"pi": "0"})
            )

    def test_ito_check_needs_an_ito_section(self):
        with pytest.raises(ConfigError, match="pipeline 'ito_check' needs an 'ito'"):
            config_from_dict(merged(pipeline="ito_check"))
        with pytest.raises(ConfigError, match="'ito.beta' must be a number or expression"):
            config_from_dict(merged(ito={"beta": True}))

    def test_envelope_box_shape(self):
        with pytest.raises(ConfigError, match="'envelope.box.y' must be a \\[lo, hi\\] pair"):
            config_from_dict(merged(envelope={"box": {"y": [1.0]}}))
        with pytest.raises(ConfigError, match="'envelope.ns' entries must be >= 1"):
            config_from_dict(
                merged(envelope={"box": {"y": [-1.0, 1.0]}, "ns": [0.5]})
            )
        with pytest.raises(ConfigError, match="missing required key 'envelope.box'"):
            config_from_dict(merged(envelope={"grid_points": 11}))

    def test_outputs_formats_subset(self):
        with pytest.raises(ConfigError, match="'outputs.formats' must be a subset"):
            config_from_dict(merged(outputs={"formats": ["csv", "parquet"]}))

    def test_marks_lengths_must_agree(self):
        with pytest.raises(ConfigError, match="differ in length"):
            config_from_dict(merged(marks={"values": [1.0], "intensities": []}))


class TestConfigFile:
    def test_round_trip_through_yaml(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(minimal()))
        cfg = load_config(str(path))
        assert cfg.config_hash == config_from_dict(minimal()).config_hash

    def test_file_errors(self, tmp_path):
        with pytest.raises(ConfigError, match="configuration file not found"):
            load_config(str(tmp_path / "absent.yaml"))
        bad = tmp_path / "bad.yaml"
        bad.write_text("a: [1,")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_config(str(bad))
        empty = tmp_path / "empty.yaml"
        empty.write_text("")
        with pytest.raises(ConfigError, match="configuration file is empty"):
            load_config(str(empty))
        nonmap = tmp_path / "list.yaml"
        nonmap.write_text("- 1\n")
        with pytest.raises(ConfigError, match="configuration must be a mapping"):
            load_config(str(nonmap))


def write_config(tmp_path, data, name="config.yaml") -> str:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


SNELL = {
    "grid": {"T": 1.0, "N": 4},
    "problem": {"f": "0", "barrier": "1 - t", "terminal": "0"},
}


class TestCli:
    def test_grammar_prints_both_grammars(self, capsys):
        assert main(["grammar"]) == 0
        out = capsys.readouterr().out
        assert "expression grammar" in out
        assert "configuration file (YAML mapping)" in out

    def test_validate_config(self, tmp_path, capsys):
        path = write_config(tmp_path, SNELL)
        assert main(["validate-config", path]) == 0
        out = capsys.readouterr().out
        assert out.startswith("valid: pipeline=solve hash=")

    def test_validate_config_rejects(self, tmp_path, capsys):
        path = write_config(tmp_path, merged(grids={}))
        assert main(["validate-config", path]) == 2
        err = capsys.readouterr().err
        assert err.startswith("error[ConfigError]:")

    def test_run_snell_solve(self, tmp_path, capsys):
        path = write_config(tmp_path, SNELL)
        out_dir = tmp_path / "out"
        assert main(["run", "--config", path, "--out", str(out_dir)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert "PASS solution_valid" in lines
        assert "PASS skorokhod_ok" in lines
        assert "PASS balance_residual_ok" in lines
        summary = json.loads((out_dir / "summary.json").read_text())
        assert abs(summary["root_value"] - 1.0) <= 1e-10
        assert summary["schema"] == "rbdsdep.summary.v1"
        assert summary["pipeline"] == "solve"
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["schema"] == "rbdsdep.manifest.v1"
        assert manifest["config_hash"] == summary["config_hash"]
        assert "solution.csv" in manifest["outputs"]
        assert set(manifest["versions"]) == {"python", "numpy", "rbdsdep"}

    def test_csv_schema_header_carries_the_config_hash(self, tmp_path):
        path = write_config(tmp_path, SNELL)
        out_dir = tmp_path / "out"
        main(["run", "--config", path, "--out", str(out_dir)])
        cfg = load_config(path)
        first = (out_dir / "solution.csv").read_text().splitlines()[0]
        assert first == f"# schema=rbdsdep.solution.v1 config_hash={cfg.config_hash}"

    def test_rerun_is_byte_identical(self, tmp_path):
        path = write_config(tmp_path, SNELL)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--config", path, "--out", str(d1)]) == 0
        assert main(["run", "--config", path, "--out", str(d2)]) == 0
        for name in ("solution.csv", "summary.json"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_thread_count_does_not_change_outputs(self, tmp_path):
        data = {
            "grid": {"T": 0.5, "N": 3},
            "problem": {"f": "min(abs(y), 2)", "barrier": "-10", "terminal": "w1"},
            "pipeline": "inf_sequence",
            "envelope": {"box": {"y": [-5.0, 5.0]}, "ns": [1, 2, 4]},
        }
        path = write_config(tmp_path, data)
        dirs = []
        for threads in (1, 2, 8):
            out_dir = tmp_path / f"t{threads}"
            code = main(
                ["run", "--config", path, "--out", str(out_dir), "--threads", str(threads)]
            )
            assert code == 0
            dirs.append(out_dir)
        ref_csv = (dirs[0] / "sequence.csv").read_bytes()
        ref_json = (dirs[0] / "sequence.json").read_bytes()
        for d in dirs[1:]:
            assert (d / "sequence.csv").read_bytes() == ref_csv
            assert (d / "sequence.json").read_bytes() == ref_json

    def test_compare_verdict_drives_the_exit_code(self, tmp_path, capsys):
        ordered = merged(pipeline="compare", problem2={"f": "1"})
        path = write_config(tmp_path, ordered, name="ok.yaml")
        assert main(["run", "--config", path, "--out", str(tmp_path / "ok")]) == 0
        assert "PASS comparison_ok" in capsys.readouterr().out

        reversed_ = merged(
            pipeline="compare", problem={"f": "1"}, problem2={"f": "0"}
        )
        path2 = write_config(tmp_path, reversed_, name="bad.yaml")
        assert main(["run", "--config", path2, "--out", str(tmp_path / "bad")]) == 1
        out = capsys.readouterr().out
        assert "FAIL comparison_ok" in out
        report = json.loads((tmp_path / "bad" / "compare.json").read_text())
        assert report["report"]["verdict"] == "premises-not-met"

    def test_ito_pipeline(self, tmp_path, capsys):
        data = {
            "grid": {"T": 1.0, "N": 8},
            "problem": {"f": "0", "barrier": "-10", "terminal": "0"},
            "drivers": {"mode": "gaussian", "paths": 500, "seed": 41},
            "pipeline": "ito_check",
            "ito": {"eta": "1", "expected_terminal_sq": 1.0},
        }
        path = write_config(tmp_path, data)
        out_dir = tmp_path / "out"
        assert main(["run", "--config", path, "--out", str(out_dir)]) == 0
        report = json.loads((out_dir / "ito.json").read_text())
        assert report["validators"]["identity_ok"]
        assert report["validators"]["martingales_ok"]
        assert report["validators"]["terminal_sq_ok"]

    def test_lsmc_solver_from_config(self, tmp_path):
        data = {
            "grid": {"T": 1.0, "N": 8},
            "problem": {"f": "0", "barrier": "-10", "terminal": "w1"},
            "drivers": {"mode": "gaussian", "paths": 200},
            "scheme": {"solver": "lsmc"},
        }
        path = write_config(tmp_path, data)
        out_dir = tmp_path / "out"
        assert main(["run", "--config", path, "--out", str(out_dir)]) == 0
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["solver"] == "lsmc"
        assert summary["diagnostics"]["basis"] == "poly"
        assert abs(summary["root_value"]) < 0.25  # MC noise around 0

    def test_csv_only_formats_skip_json_reports(self, tmp_path):
        data = merged(outputs={"formats": ["csv"]})
        path = write_config(tmp_path, data)
        out_dir = tmp_path / "out"
        main(["run", "--config", path, "--out", str(out_dir)])
        assert (out_dir / "solution.csv").exists()
        assert not (out_dir / "summary.json").exists()
        # the manifest is always written
        assert (out_dir / "manifest.json").exists()

    def test_no_temp_files_left_behind(self, tmp_path):
        path = write_config(tmp_path, SNELL)
        out_dir = tmp_path / "out"
        main(["run", "--config", path, "--out", str(out_dir)])
        strays = [p.name for p in out_dir.iterdir() if ".tmp." in p.name]
        assert strays == []

    def test_runtime_errors_exit_2(self, tmp_path, capsys):
        missing = str(tmp_path / "absent.yaml")
        assert main(["run", "--config", missing]) == 2
        assert "error[ConfigError]:" in capsys.readouterr().err
        path = write_config(tmp_path, SNELL)
        assert main(["run", "--config", path, "--threads", "0"]) == 2
        assert "error[RbdsdepError]:" in capsys.readouterr().err

    def test_console_script_is_installed(self, tmp_path):
        exe = shutil.which("rbdsdep")
        assert exe is not None, "console entry point missing"
        proc = subprocess.run(
            [exe, "grammar"], capture_output=True, text=True, timeout=60
        )
        assert proc.returncode == 0
        assert "expression grammar" in proc.stdout


class TestRunPipelineApi:
    def test_returns_flag_summary_and_paths(self, tmp_path):
        cfg = config_from_dict(SNELL)
        ok, summary, written = run_pipeline(cfg, out_dir=str(tmp_path / "o"))
        assert ok
        assert summary["config_hash"] == cfg.config_hash
        names = sorted(p.rsplit("/", 1)[-1] for p in written)
        assert names == ["manifest.json", "solution.csv", "summary.json"]
