import json
import shutil

import pandas as pd
import pytest

from carbon_incentive import cli, pipeline
from carbon_incentive.pipeline import STAGES, PipelineConfig, file_hash

TINY = {
    "seed": 3,
    "scenario": {"n_individuals": 1500, "planted_att": 0.1},
    "forest": {"n_trees": 15, "cv_folds": 2, "cv_trees": 5, "min_profile_trips": 10},
    "gcn": {"conv_widths": [8, 16], "dense_widths": [16, 5], "max_iters": 8, "batch_graphs": 8},
}


def write_config(path, out, **changes):
    data = {**TINY, "out": str(out), **changes}
    path.write_text(json.dumps(data))
    return path


def artifact_hashes(out):
    return {
        p.relative_to(out).as_posix(): file_hash(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != pipeline.MANIFEST
    }


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_config(root / "cfg.json", root / "out")
    assert cli.main(["all", "--config", str(cfg)]) == 0
    return root


def test_all_stages_ok(run_dir):
    manifest = json.loads((run_dir / "out" / pipeline.MANIFEST).read_text())
    assert set(manifest["stages"]) == set(STAGES)
    for stage in STAGES.values():
        for art in stage.outputs:
            assert (run_dir / "out" / art).is_file(), art
            assert manifest["artifacts"][art]["sha256"] == file_hash(run_dir / "out" / art)


def test_rerun_is_byte_identical(run_dir, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "out")
    assert cli.main(["all", "--config", str(cfg)]) == 0
    assert artifact_hashes(tmp_path / "out") == artifact_hashes(run_dir / "out")


def test_config_echo_in_json_artifacts(run_dir):
    for name in ("ground_truth.json", "ingest_report.json", "balance.json", "did_results.json", "metrics.json",
                 "model_card.json", "gcn_metrics.json", "infra_regression.json"):
        data = json.loads((run_dir / "out" / name).read_text())
        assert data["schema_version"] == pipeline.SCHEMA_VERSION
        assert "config" in data


def test_zone_file_schema(run_dir):
    zones = pd.read_csv(run_dir / "out" / "zones.csv")
    assert tuple(zones.columns) == pipeline.ZONE_COLUMNS


def test_report_references_current_hashes(run_dir):
    report = json.loads((run_dir / "out" / "run_report.json").read_text())
    for name, h in report["artifacts"].items():
        assert file_hash(run_dir / "out" / name) == h
    assert report["headline"]["planted_att"] == 0.1


def test_missing_upstream(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "out")
    assert cli.main(["did", "--config", str(cfg)]) == 3
    assert "run panel first" in capsys.readouterr().err


def test_did_without_match(run_dir, tmp_path, capsys):
    out = tmp_path / "out"
    shutil.copytree(run_dir / "out", out)
    (out / "cohort.csv").unlink()
    cfg = write_config(tmp_path / "cfg.json", out)
    assert cli.main(["did", "--config", str(cfg)]) == 3
    assert "run match first" in capsys.readouterr().err


def test_modified_artifact_is_stale(run_dir, tmp_path, capsys):
    out = tmp_path / "out"
    shutil.copytree(run_dir / "out", out)
    with open(out / "cohort.csv", "a") as fh:
        fh.write("999999,999998,5\n")
    cfg = write_config(tmp_path / "cfg.json", out)
    assert cli.main(["did", "--config", str(cfg)]) == 3
    assert "modified" in capsys.readouterr().err


def test_changed_config_is_stale(run_dir, tmp_path, capsys):
    out = tmp_path / "out"
    shutil.copytree(run_dir / "out", out)
    cfg = write_config(tmp_path / "cfg.json", out, psm={"ratio": 1})
    assert cli.main(["did", "--config", str(cfg)]) == 3
    assert "different configuration" in capsys.readouterr().err
    # rerunning the producer clears it
    assert cli.main(["match", "--config", str(cfg)]) == 0
    assert cli.main(["did", "--config", str(cfg)]) == 0


def test_upstream_rerun_invalidates_downstream(run_dir, tmp_path, capsys):
    out = tmp_path / "out"
    shutil.copytree(run_dir / "out", out)
    cfg = write_config(tmp_path / "cfg.json", out, psm={"caliper_mult": 0.2})
    assert cli.main(["match", "--config", str(cfg)]) == 0
    # did_results.json now predates its cohort
    assert cli.main(["report", "--config", str(cfg)]) == 3
    assert "rerun did" in capsys.readouterr().err


def test_downstream_delete_keeps_upstream(run_dir, tmp_path):
    out = tmp_path / "out"
    shutil.copytree(run_dir / "out", out)
    before = artifact_hashes(out)
    (out / "did_results.json").unlink()
    (out / "event_study.csv").unlink()
    cfg = write_config(tmp_path / "cfg.json", out)
    assert cli.main(["did", "--config", str(cfg)]) == 0
    assert artifact_hashes(out) == before


def test_threads_do_not_change_outputs(run_dir, tmp_path):
    out = tmp_path / "out"
    shutil.copytree(run_dir / "out", out)
    cfg = write_config(tmp_path / "cfg.json", out)
    assert cli.main(["counterfactual", "--config", str(cfg), "--threads", "3"]) == 0
    for name in STAGES["counterfactual"].outputs:
        assert file_hash(out / name) == file_hash(run_dir / "out" / name)


@pytest.mark.parametrize(
    "changes",
    [
        {"participant_trip_share": 0.0},
        {"participant_trip_share": 1.5},
        {"psm": {"scale": "odds"}},
        {"psm": {"bogus": 1}},
        {"colour": "red"},
        {"scenario": {"planted_att": 3.0}},
        {"stages": {"teleport": False}},
        {"input": {"trips": "/nonexistent.csv"}},
    ],
)
def test_config_errors(tmp_path, changes, capsys):
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "out", **changes)
    assert cli.main(["synth", "--config", str(cfg)]) == 2
    assert "error" in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    (tmp_path / "cfg.json").write_text("{not json")
    assert cli.main(["synth", "--config", str(tmp_path / "cfg.json")]) == 2


def test_numeric_failure_exit_code(tmp_path, capsys):
    scenario = {"n_individuals": 600, "enrollment_intercept": -30.0}
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "out", scenario=scenario)
    for stage in ("synth", "panel"):
        assert cli.main([stage, "--config", str(cfg)]) == 0
    assert cli.main(["match", "--config", str(cfg)]) == 4
    assert "cohort empty" in capsys.readouterr().err


def test_external_input(run_dir, tmp_path):
    src = run_dir / "out"
    inp = {"trips": str(src / "trips.csv"), "users": str(src / "users.csv"), "zones": str(src / "zones.csv"),
           "start": "2022-12-01", "n_months": 13, "grid_rows": 16, "grid_cols": 16}
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "out", input=inp)
    for stage in ("synth", "panel", "match", "did"):
        assert cli.main([stage, "--config", str(cfg)]) == 0
    # same files in, same estimates out
    assert file_hash(tmp_path / "out" / "panel.csv") == file_hash(src / "panel.csv")
    assert file_hash(tmp_path / "out" / "event_study.csv") == file_hash(src / "event_study.csv")
    truth = json.loads((tmp_path / "out" / "ground_truth.json").read_text())
    assert truth["synthetic"] is False


def test_seed_flag_overrides(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", tmp_path / "a")
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    assert cli.main(["synth", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    assert file_hash(tmp_path / "a" / "trips.csv") != file_hash(tmp_path / "b" / "trips.csv")


def test_sub_seeds_are_distinct():
    cfg = PipelineConfig.from_dict({"seed": 5})
    assert cfg.forest_params().seed != cfg.gcn_params().seed
    assert cfg.scenario_config().seed == 5
