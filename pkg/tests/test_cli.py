from __future__ import annotations

import json
from pathlib import Path

import pytest

from main import dispatch
from pipeline.runner import default_schedule, missing_required, resolve_config


@pytest.fixture
def synth_dir(tmp_path: Path) -> Path:
    out: Path = tmp_path / "synth"
    assert dispatch(["synth", "--n", "300", "--seed", "3", "-o", str(out)]) == 0
    return out


class TestSynthCommand:

    def test_writes_dataset_and_manifest(self, synth_dir: Path) -> None:
        assert (synth_dir / "dataset.csv").is_file()
        assert (synth_dir / "planted_levels.csv").is_file()
        manifest: dict = json.loads((synth_dir / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == "synth"
        assert manifest["resolved_config"]["n"] == 300
        assert manifest["resolved_config"]["seed"] == 3
        assert sorted(manifest["output_files"]) == ["dataset.csv", "planted_levels.csv"]
        header: str = (synth_dir / "dataset.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header.startswith("label,L1_c0,L1_c1,L2_c0")

    def test_manifest_reproduces_the_run(self, synth_dir: Path, tmp_path: Path) -> None:
        rerun: Path = tmp_path / "rerun"
        assert dispatch(["synth", "--config", str(synth_dir / "manifest.json"), "-o", str(rerun)]) == 0
        assert (rerun / "dataset.csv").read_bytes() == (synth_dir / "dataset.csv").read_bytes()

    def test_decay_rate_out_of_range(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        assert dispatch(["synth", "--gamma", "1.5", "-o", str(tmp_path / "bad")]) == 1
        assert "error=SpecError" in capsys.readouterr().err

    def test_noise_out_of_range(self, tmp_path: Path) -> None:
        assert dispatch(["synth", "--noise", "0.7", "-o", str(tmp_path / "bad")]) == 1


class TestRankCommand:

    def test_file_output_places_manifest_beside_it(self, synth_dir: Path, tmp_path: Path) -> None:
        target: Path = tmp_path / "rank.csv"
        assert dispatch(["rank", "--data", str(synth_dir / "dataset.csv"), "-o", str(target)]) == 0
        assert target.read_text(encoding="utf-8").splitlines()[0] == (
            "rank,concept_index,concept_name,score,relevance,redundancy"
        )
        manifest: dict = json.loads((tmp_path / "rank.manifest.json").read_text(encoding="utf-8"))
        assert set(manifest["input_hashes"]) == {"data"}

    def test_missing_input_file(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        assert dispatch(["rank", "--data", str(tmp_path / "absent.csv"), "-o", str(tmp_path / "r")]) == 1
        assert "error=SpecError" in capsys.readouterr().err

    def test_malformed_csv(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        source: Path = tmp_path / "bad.csv"
        source.write_text("label,a\n0,1\n1,7\n", encoding="utf-8")
        assert dispatch(["rank", "--data", str(source), "-o", str(tmp_path / "r")]) == 1
        assert "error=ConceptParseError" in capsys.readouterr().err


class TestUsageErrors:

    def test_unknown_command(self, capsys: pytest.CaptureFixture[str]) -> None:
        assert dispatch(["frobnicate"]) == 2
        first: str = capsys.readouterr().err.splitlines()[0]
        assert first.startswith("error=UsageError message=")
        assert "frobnicate" in first

    def test_missing_required_data(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        assert dispatch(["rank", "-o", str(tmp_path / "r")]) == 2
        assert "missing required: data" in capsys.readouterr().err

    def test_bad_list_flag(self, capsys: pytest.CaptureFixture[str]) -> None:
        assert dispatch(["pipeline", "--data", "x.csv", "--schedule", "2,a"]) == 2
        lines: list[str] = capsys.readouterr().err.splitlines()
        assert lines[0].startswith("error=UsageError message=")
        assert any(line.startswith("usage:") for line in lines[1:])

    def test_unwritable_output_is_a_storage_error(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        blocker: Path = tmp_path / "blocker"
        blocker.write_text("not a directory", encoding="utf-8")
        assert dispatch(["synth", "--n", "50", "-o", str(blocker / "out")]) == 1
        assert capsys.readouterr().err.splitlines()[0].startswith("error=StorageError")


class TestConfigResolution:

    def test_flags_beat_file_beat_defaults(self) -> None:
        resolved: dict = resolve_config("synth", {"gamma": 0.3, "n": 50, "unknown": 1}, {"gamma": 0.7})
        assert resolved["gamma"] == 0.7
        assert resolved["n"] == 50
        assert resolved["levels"] == 3
        assert "unknown" not in resolved

    def test_required_keys(self) -> None:
        assert missing_required("intervene", resolve_config("intervene", {}, {})) == ["data", "model"]
        assert missing_required("regimes", resolve_config("regimes", {}, {})) == []

    def test_default_schedule(self) -> None:
        assert default_schedule(14) == [1, 2, 4, 8, 14]
        assert default_schedule(8) == [1, 2, 4, 8]
        assert default_schedule(1) == [1]


class TestAnalysisCommands:

    def test_regimes(self, tmp_path: Path) -> None:
        out: Path = tmp_path / "regimes"
        assert dispatch([
            "regimes", "--r", "2", "--gamma", "0.8", "--levels-grid", "1,2,3,4,5,6", "--samples", "2000", "-o", str(out),
        ]) == 0
        report: dict = json.loads((out / "regimes.json").read_text(encoding="utf-8"))
        assert report["classification"]["regime"] == "heavy_tailed"
        assert len((out / "regimes.csv").read_text(encoding="utf-8").splitlines()) == 7

    def test_decay_fit_from_counts(self, tmp_path: Path) -> None:
        out: Path = tmp_path / "decay"
        assert dispatch(["decay-fit", "--counts", "64,32,16,8", "--level-sizes", "1,2,4,8", "-o", str(out)]) == 0
        report: dict = json.loads((out / "decay.json").read_text(encoding="utf-8"))
        assert report["fit"]["gamma"] == pytest.approx(0.5)
        assert "expected_cost" in report

    def test_pipeline_is_reproducible(self, synth_dir: Path, tmp_path: Path) -> None:
        runs: list[Path] = [tmp_path / "p1", tmp_path / "p2"]
        for out in runs:
            assert dispatch([
                "pipeline", "--data", str(synth_dir / "dataset.csv"), "--schedule", "2,6,14",
                "--epochs", "2", "-o", str(out),
            ]) == 0
        produced: list[str] = sorted(p.name for p in runs[0].iterdir() if p.name != "manifest.json")
        assert {"model.json", "ranking.csv", "curves.csv", "traces.csv", "bound.json", "levels.json"} <= set(produced)
        for name in produced:
            assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name
