import filecmp
import json

import pytest

from trajpilot import cli
from trajpilot.pipeline import ConfigError, PrerequisiteError, RunConfig, run_pipeline

TINY = {
    "world": {"n_takes": 14, "segments_per_take": 10, "n_actions": 8, "actions_per_scenario": 4, "n_scenarios": 2,
              "d": 8, "d_v": 8, "n_tok": 4},
    "align": {"width": 16, "layers": 1, "heads": 2, "d": 8, "epochs": 1},
    "predictor": {"width": 16, "layers": 1, "heads": 2, "d": 8, "d_v": 8, "steps": 0},
    "scorer": {"width": 16, "layers": 1, "heads": 2, "k": 4, "epochs": 1},
    "latent": {"width": 16, "layers": 1, "heads": 2, "steps": 2},
    "cem": {"population": 8, "iterations": 1},
    "k_values": [1, 4],
    "eval_queries": 12,
    "cem_queries": 4,
    "scorer_queries": 8,
    "probe_pairs": 50,
}


def tiny(out_dir, **extra) -> RunConfig:
    return RunConfig.from_dict({**TINY, "out_dir": str(out_dir), **extra})


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = tiny(tmp_path)
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"wrld": {}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"world": {"n_take": 3}})
    with pytest.raises(ConfigError):
        tiny(tmp_path, predictor={**TINY["predictor"], "d": 16}).validate()


def test_config_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "seed": 1,\n  "eval_queries": 12,,\n}\n')
    with pytest.raises(ConfigError, match=r"bad.json:3:.*\n.*\"eval_queries\": 12,,"):
        RunConfig.load(path)
    assert cli.main(["generate", "--config", str(path), "-q"]) == 2


def test_seed_override_reaches_every_section():
    cfg = RunConfig().with_seed(7)
    assert {cfg.seed, cfg.world.seed, cfg.align.seed, cfg.predictor.seed, cfg.scorer.seed, cfg.latent.seed,
            cfg.cem.seed} == {7}


def test_missing_prerequisite_is_named(tmp_path, capsys):
    with pytest.raises(PrerequisiteError, match="prep.bin"):
        run_pipeline(tiny(tmp_path), ["generate", "train-align"])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    code = cli.main(["eval", "--config", str(cfg), "--out-dir", str(tmp_path / "empty"), "-q"])
    assert code != 0
    assert "missing prerequisite" in capsys.readouterr().err


def test_unknown_stage_rejected(tmp_path):
    with pytest.raises(ConfigError):
        run_pipeline(tiny(tmp_path), ["generate", "fly"])


def test_generate_twice_is_byte_identical(tmp_path):
    run_pipeline(tiny(tmp_path / "a"), ["generate"])
    run_pipeline(tiny(tmp_path / "b"), ["generate"])
    cmp = filecmp.dircmp(tmp_path / "a" / "data", tmp_path / "b" / "data")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only


@pytest.fixture(scope="module")
def untrained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("untrained")
    cfg = tiny(out)
    return out, cfg, run_pipeline(cfg)


def test_untrained_pipeline_runs_end_to_end(untrained_run):
    out, cfg, results = untrained_run
    for mode in ("planning", "anticipation"):
        for h in cfg.horizons:
            assert (out / f"report_{mode}_{h}.csv").exists()
    for name in ("gate_rates.csv", "pool_recall.csv", "diagnostics_geometry.csv", "diagnostics_monotonicity.csv"):
        assert (out / name).exists()
    reports = results["eval"]["reports"]
    # an untrained oracle is near chance over 8 actions
    assert reports[("planning", 5, "Oracle")]["M@1"] < 0.5
    assert ("planning", 5, "CEM") in reports and ("anticipation", 5, "CEM") not in reports
    assert set(results["diagnose"]["conditioning"]) == {"base", "shuffled", "refreshed_noise"}


def test_rerunning_a_stage_leaves_outputs_unchanged(untrained_run):
    out, cfg, _ = untrained_run
    before = {p: p.read_bytes() for p in out.glob("*.csv")}
    run_pipeline(cfg, ["eval", "diagnose"])
    assert {p: p.read_bytes() for p in out.glob("*.csv")} == before


def test_cli_table(untrained_run, capsys):
    out, _, _ = untrained_run
    table = cli.report_table(out)
    assert "planning mid M@1" in table and "Oracle" in table and "H8" in table
    assert cli.main(["diagnose", "--config", str(out / "config.json"), "--table", "-q"]) == 0
    assert "anticipation mid M@1" in capsys.readouterr().out


def test_stages_flag_only_for_run(tmp_path):
    assert cli.main(["generate", "--stages", "eval", "--out-dir", str(tmp_path), "-q"]) == 2
