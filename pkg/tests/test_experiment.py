from pathlib import Path

import pandas as pd
import pytest
import yaml

from cli import main
from experiment import (
    ALL_METHODS,
    STAGES,
    ConfigError,
    ExperimentRunner,
    RunManifest,
    load_config,
    render_report,
    report,
    run_experiment,
)
from metrics import rank_models

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _small_run(tmp_path, **sections):
    values = {
        "data": {
            "synthetic": {
                "n_control": 4,
                "n_patient": 4,
                "seed": 3,
                "tissue": {"image_size": 128, "fiber_count": 10, "mean_fiber_diameter": 30.0},
            }
        },
        "preprocessing": {"patch_size": 64},
        "training": {"channels": ["ALL", "NDUFB8", "VDAC1"], "seeds": [0, 1], "max_epochs": 2, "batch_size": 8},
        "explanation": {"methods": ["gradients", "lrp_z", "deconvnet"], "top_k": 1},
        "output_dir": str(tmp_path / "run"),
    }
    for name, overrides in sections.items():
        values[name].update(overrides)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(values), encoding="utf-8")
    return path


def test_desk_config_loads():
    config = load_config(CONFIGS / "desk.yaml")
    assert config.training.channels == ("ALL", "NDUFB8", "VDAC1")
    assert config.explanation.top_k == 2
    assert config.checksum() == load_config(CONFIGS / "desk.yaml").checksum()


def test_overrides_are_parsed_as_yaml_scalars(tmp_path):
    config = load_config(
        _small_run(tmp_path), {"training.max-epochs": "30", "training.seeds": "3,4", "preprocessing.stride": "32"}
    )
    assert config.training.max_epochs == 30
    assert config.training.seeds == (3, 4)
    assert config.preprocessing.stride == 32
    assert config.checksum() != load_config(_small_run(tmp_path)).checksum()


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"training.epochs": "3"}, "Unknown config keys"),
        ({"training.seeds": "0"}, "at least two seeds"),
        ({"explanation.top_k": "5"}, "exceeds"),
        ({"training.channels": "ALL,ATP5"}, "unknown channels"),
        ({"explanation.methods": "lrp_gamma"}, "lrp_gamma"),
        ({"preprocessing.split_ratios": "0.5,0.5,0.5"}, "split_ratios"),
    ],
)
def test_invalid_configs_raise_config_error(tmp_path, overrides, message):
    with pytest.raises(ConfigError, match=message):
        load_config(_small_run(tmp_path), overrides)


def test_missing_config_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="Cannot read"):
        load_config(tmp_path / "absent.yaml")


def test_cli_exit_code_for_config_errors(tmp_path):
    assert main(["run", "--config", str(tmp_path / "absent.yaml")]) == 2
    assert main(["train", "--config", str(_small_run(tmp_path)), "--training.seeds", "0"]) == 2
    assert main(["ingest", "--config", str(_small_run(tmp_path))]) == 2


def test_cli_exit_code_for_stage_failures(tmp_path):
    argv = [
        "ingest",
        "--data.source", "ingest",
        "--data.ingest.paths", str(tmp_path / "absent.ome.tif"),
        "--output-dir", str(tmp_path / "run"),
    ]
    assert main(argv) == 1
    manifest = RunManifest.load(tmp_path / "run" / "run_manifest.yaml")
    assert manifest.stages["data"].status == "failed"


def test_report_embeds_the_ranking_and_notes_missing_sections(tmp_path):
    (tmp_path / "evaluation").mkdir()
    rows = [
        ("ResNet50", "All Patients", "GRIM19", (100, 92.86, 92.86, 96.43)),
        ("ResNet50", "All Patients", "UqCRC2", (100, 92.86, 100, 96.43)),
    ]
    rank_models(rows).to_frame().to_csv(tmp_path / "evaluation" / "ranking.csv", index=False)

    report = render_report(tmp_path, "abc123")

    assert "Config checksum: `abc123`" in report
    assert "| ResNet50 | All Patients | UqCRC2 | 100 | 92.86 | 100 | 96.43 | 97.32 | 3.41 | 11.68 |" in report
    assert report.index("UqCRC2") < report.index("GRIM19")
    assert "_Not available: the evaluate stage has not completed._" in report
    assert "_No figures: the render stage has not completed._" in report
    assert render_report(tmp_path, "abc123") == report


@pytest.mark.slow
def test_synthetic_run_end_to_end_and_resume(tmp_path):
    config = load_config(_small_run(tmp_path))
    root = Path(config.output_dir)

    manifest = run_experiment(config, progress_callback=lambda *_: None)

    assert all(manifest.completed(name) for name in STAGES)
    assert manifest.verify() == []
    ranking = pd.read_csv(root / "evaluation" / "ranking.csv")
    assert sorted(ranking["channel"]) == ["All Channels", "NDUFB8", "VDAC1"]
    assert list(ranking["mean_ta"]) == sorted(ranking["mean_ta"], reverse=True)

    explanations = pd.read_csv(root / "explanations" / "explanations.csv")
    assert len(explanations) == 1 * 2 * 3
    assert set(explanations["status"]) == {"ok"}
    assert explanations.loc[explanations["method"] == "lrp_z", "conservation_residual"].notna().all()
    figures = sorted((root / "figures").glob("*.png"))
    assert len(figures) == 6
    assert all("__seed" in f.name for f in figures)
    report = (root / "report.md").read_text(encoding="utf-8")
    assert "All Channels" in report and "figures/" in report

    rerun = ExperimentRunner(config, progress_callback=lambda *_: None)
    rerun.run()
    assert rerun.skipped == list(STAGES)

    changed = load_config(_small_run(tmp_path), {"explanation.methods": "gradients"})
    partial = ExperimentRunner(changed, progress_callback=lambda *_: None)
    partial.run()
    assert partial.skipped == ["data", "patchify", "train", "evaluate"]
    assert len(list((root / "figures").glob("*.png"))) == 2


@pytest.mark.slow
def test_tampered_artifact_reruns_its_stage(tmp_path):
    config = load_config(_small_run(tmp_path))
    run_experiment(config, until="patchify", progress_callback=lambda *_: None)
    (Path(config.output_dir) / "patches" / "split.csv").write_text("patch_id\n", encoding="utf-8")

    runner = ExperimentRunner(config, progress_callback=lambda *_: None)
    runner.run(until="patchify")

    assert runner.skipped == ["data"]
    assert runner.manifest.verify(["patchify"]) == []


def test_report_of_a_manifest_uses_its_run_directory(tmp_path):
    manifest = RunManifest(config_checksum="feed", path=tmp_path / "run_manifest.yaml")
    assert report(manifest) == render_report(tmp_path, "feed")
    assert "Config checksum: `feed`" in report(manifest)


def _deficient_channel_run(tmp_path, name, deficiency_factor, rrf_fraction, methods):
    values = {
        "data": {
            "synthetic": {
                "n_control": 4,
                "n_patient": 10,
                "seed": 7,
                "tissue": {
                    "deficiency_factor": deficiency_factor,
                    "deficient_fiber_fraction": 0.5,
                    "rrf_fraction": rrf_fraction,
                },
            }
        },
        "preprocessing": {"patch_size": 256, "split_ratios": [0.8, 0.1, 0.1], "group_by_subject": True},
        "training": {"channels": ["NDUFB8"], "seeds": [0, 1], "max_epochs": 50, "early_stop_patience": 20},
        "explanation": {"methods": methods, "top_k": 1 if methods else 0},
        "output_dir": str(tmp_path / name),
    }
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump(values), encoding="utf-8")
    return load_config(path)


@pytest.mark.slow
def test_planted_deficiency_is_learned_and_reruns_are_identical(tmp_path):
    roots = []
    for name in ("first", "second"):
        config = _deficient_channel_run(tmp_path, name, 0.3, 0.1, list(ALL_METHODS))
        run_experiment(config, until="render", progress_callback=lambda *_: None)
        roots.append(Path(config.output_dir))

    per_run = pd.read_csv(roots[0] / "evaluation" / "per_run_metrics.csv")
    assert per_run["test_accuracy"].mean() >= 0.95
    explanations = pd.read_csv(roots[0] / "explanations" / "explanations.csv")
    assert set(explanations["method"]) == set(ALL_METHODS)
    assert set(explanations["status"]) == {"ok"}

    for name in ("per_run_metrics.csv", "ranking.csv", "standard_metrics.csv", "patient_metrics.csv"):
        assert (roots[0] / "evaluation" / name).read_bytes() == (roots[1] / "evaluation" / name).read_bytes()
    figures = sorted(p.name for p in (roots[0] / "figures").glob("*.png"))
    assert len(figures) == 2 * len(ALL_METHODS)
    for figure in figures:
        assert (roots[0] / "figures" / figure).read_bytes() == (roots[1] / "figures" / figure).read_bytes()


@pytest.mark.slow
def test_without_a_planted_signal_accuracy_stays_near_chance(tmp_path):
    config = _deficient_channel_run(tmp_path, "null", 1.0, 0.0, [])
    run_experiment(config, until="evaluate", progress_callback=lambda *_: None)

    per_run = pd.read_csv(Path(config.output_dir) / "evaluation" / "per_run_metrics.csv")
    assert per_run["test_accuracy"].mean() <= 0.65
