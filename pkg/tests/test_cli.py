"""Command-line workflow: exit codes, determinism, artifact outputs."""

import pytest

from mocapcal.chain import CalibrationDataset
from mocapcal.cli import (
    EXIT_INPUT_ERROR,
    EXIT_NO_CONVERGENCE,
    EXIT_OK,
    EXIT_VERIFY_FAIL,
    main,
)
from mocapcal.dataio import (
    load_calibration_result,
    load_dataset,
    save_calibration_result,
    save_dataset,
    save_transform,
)
from mocapcal.solver import CalibrationResult
from mocapcal.synth import perturb_estimate


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared synthetic scene files produced through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    rc = main(
        [
            "synth", "--out", str(root / "scene.jsonl"), "--seed", "7",
            "--cameras", "2", "--frames", "50", "--noise-px", "0.1414",
            "--markers-x", "4", "--markers-y", "3",
            "--lollypop-out", str(root / "rec.jsonl"),
            "--truth-out", str(root / "truth.json"),
        ]
    )
    assert rc == EXIT_OK
    return root


class TestSynthCommand:
    def test_deterministic_output_files(self, tmp_path):
        args = ["synth", "--seed", "7", "--cameras", "1", "--frames", "30",
                "--markers-x", "4", "--markers-y", "3"]
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        assert main(args + ["--out", str(a)]) == EXIT_OK
        assert main(args + ["--out", str(b)]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_millimeter_units_flag(self, tmp_path):
        out = tmp_path / "mm.jsonl"
        rc = main(["synth", "--out", str(out), "--seed", "1", "--cameras", "1",
                   "--frames", "30", "--markers-x", "4", "--markers-y", "3",
                   "--units", "millimeters"])
        assert rc == EXIT_OK
        assert '"units": "millimeters"' in out.read_text().splitlines()[0]
        load_dataset(out)


class TestCalibrateCommand:
    def test_calibrate_writes_result_and_prints_table(self, workdir, capsys):
        out = workdir / "cal.json"
        rc = main(["calibrate", str(workdir / "scene.jsonl"), "--out", str(out)])
        assert rc == EXIT_OK
        printed = capsys.readouterr().out
        assert "Board RMSE (px)" in printed
        assert "Mean" in printed
        result = load_calibration_result(out)
        assert result.converged
        assert result.board_rmse < 0.25

    def test_deterministic_result_files(self, workdir, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        assert main(["calibrate", str(workdir / "scene.jsonl"), "--out", str(a), "--seed", "3"]) == EXIT_OK
        assert main(["calibrate", str(workdir / "scene.jsonl"), "--out", str(b), "--seed", "3"]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_rank_deficient_dataset_exits_two(self, workdir, tmp_path, capsys):
        dataset = load_dataset(workdir / "scene.jsonl")
        keep = {dataset.frames[0].frame_id, dataset.frames[1].frame_id}
        tiny = CalibrationDataset(
            [f for f in dataset.frames if f.frame_id in keep],
            [o for o in dataset.observations if o.frame_id in keep],
            dataset.board,
            dataset.cameras,
        )
        path = tmp_path / "tiny.jsonl"
        save_dataset(path, tiny)
        rc = main(["calibrate", str(path)])
        assert rc == EXIT_NO_CONVERGENCE
        assert "orientation" in capsys.readouterr().err

    def test_missing_dataset_exits_three(self, tmp_path):
        rc = main(["calibrate", str(tmp_path / "nope.jsonl")])
        assert rc == EXIT_INPUT_ERROR

    def test_ablation_flags_accepted(self, workdir, tmp_path):
        rc = main(["calibrate", str(workdir / "scene.jsonl"),
                   "--skip-stage3", "--fix-intrinsics",
                   "--out", str(tmp_path / "ablate.json")])
        assert rc == EXIT_OK
        result = load_calibration_result(tmp_path / "ablate.json")
        assert "stage3_2d" not in result.stage_diagnostics
        assert "stage2_3d" in result.stage_diagnostics

    def test_stage1_only_flags(self, workdir, tmp_path):
        rc = main(["calibrate", str(workdir / "scene.jsonl"),
                   "--skip-stage2", "--skip-stage3",
                   "--out", str(tmp_path / "s1.json")])
        assert rc == EXIT_OK
        result = load_calibration_result(tmp_path / "s1.json")
        assert list(result.stage_diagnostics) == ["stage1_procrustes"]


class TestVerifyCommand:
    def test_pass_and_report(self, workdir, capsys):
        rc = main(["verify", str(workdir / "rec.jsonl"), str(workdir / "truth.json"),
                   "--threshold-2d", "1.0", "--out", str(workdir / "report.json")])
        assert rc == EXIT_OK
        printed = capsys.readouterr().out
        assert "PASS" in printed and "FAIL" not in printed

    def test_fail_exits_one(self, workdir, tmp_path, capsys):
        truth = load_calibration_result(workdir / "truth.json")
        bad = perturb_estimate(truth.estimate, 1e-2, 2e-3, which="extrinsics", seed=0)
        bad_result = CalibrationResult(bad, 0.0, {}, True)
        path = tmp_path / "bad.json"
        save_calibration_result(path, bad_result)
        rc = main(["verify", str(workdir / "rec.jsonl"), str(path), "--threshold-2d", "1.0"])
        assert rc == EXIT_VERIFY_FAIL
        assert "FAIL" in capsys.readouterr().out

    def test_empty_recording_exits_nonzero(self, workdir, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text('{"kind": "header", "format_version": 1, "units": "meters"}\n')
        rc = main(["verify", str(empty), str(workdir / "truth.json")])
        assert rc == EXIT_INPUT_ERROR


class TestHeatmapCommand:
    def test_writes_ppm_and_grid(self, workdir, tmp_path):
        report = workdir / "report.json"
        if not report.exists():
            assert main(["verify", str(workdir / "rec.jsonl"), str(workdir / "truth.json"),
                         "--out", str(report)]) == EXIT_OK
        prefix = tmp_path / "hm"
        rc = main(["heatmap", str(report), "--bin-size", "128", "--out-prefix", str(prefix)])
        assert rc == EXIT_OK
        ppm = (tmp_path / "hm_cam0.ppm").read_text()
        assert ppm.startswith("P3\n10 8\n255\n")
        assert (tmp_path / "hm_cam0.txt").exists()

    def test_unknown_camera_exits_three(self, workdir):
        rc = main(["heatmap", str(workdir / "report.json"), "--camera", "nope"])
        assert rc == EXIT_INPUT_ERROR


class TestDriftCommand:
    def test_series_and_trend(self, workdir, tmp_path, capsys):
        truth = load_calibration_result(workdir / "truth.json")
        from mocapcal.dataio import load_recording, save_verification_report
        from mocapcal.verify import verify

        recording = load_recording(workdir / "rec.jsonl")
        paths = []
        for i, mag in enumerate((0.5e-3, 1e-3, 2e-3)):
            bad = perturb_estimate(truth.estimate, mag, 0.0, which="extrinsics", seed=1)
            rep = verify(recording, bad, 1.0)
            p = tmp_path / f"r{i}.json"
            save_verification_report(p, rep, truth.estimate.intrinsics)
            paths.append(str(p))
        rc = main(["drift", *paths, "--out", str(tmp_path / "series.txt")])
        assert rc == EXIT_OK
        assert "rising" in capsys.readouterr().out
        assert (tmp_path / "series.txt").read_text().count("\n") >= 4

    def test_single_report_exits_three(self, workdir):
        rc = main(["drift", str(workdir / "report.json")])
        assert rc == EXIT_INPUT_ERROR


class TestBaselineCommand:
    def test_baseline_with_true_transform(self, workdir, tmp_path, capsys):
        truth = load_calibration_result(workdir / "truth.json")
        xfile = tmp_path / "x.json"
        save_transform(xfile, truth.estimate.board_to_marker)
        rc = main(["baseline", str(workdir / "scene.jsonl"), "--x-file", str(xfile),
                   "--out", str(tmp_path / "base.json")])
        assert rc == EXIT_OK
        result = load_calibration_result(tmp_path / "base.json")
        assert result.board_rmse < 0.25
        assert "fixed_x_huber" in result.stage_diagnostics

    def test_missing_x_file_exits_three(self, workdir, tmp_path):
        rc = main(["baseline", str(workdir / "scene.jsonl"),
                   "--x-file", str(tmp_path / "missing.json")])
        assert rc == EXIT_INPUT_ERROR


class TestConfigEnvVar:
    def test_default_flags_from_config_file(self, workdir, tmp_path, monkeypatch):
        cfg = tmp_path / "defaults.cfg"
        cfg.write_text("--seed 11\n")
        monkeypatch.setenv("MOCAPCAL_CONFIG", str(cfg))
        out = tmp_path / "cal.json"
        rc = main(["calibrate", str(workdir / "scene.jsonl"), "--out", str(out)])
        assert rc == EXIT_OK

    def test_unreadable_config_exits_three(self, workdir, tmp_path, monkeypatch):
        monkeypatch.setenv("MOCAPCAL_CONFIG", str(tmp_path / "absent.cfg"))
        rc = main(["calibrate", str(workdir / "scene.jsonl")])
        assert rc == EXIT_INPUT_ERROR
