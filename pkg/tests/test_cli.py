"""End-to-end command line behavior, exit codes, and manifests."""

import json

import numpy as np
import pytest

from hoarefine import (
    LandmarkSet,
    degrade_phantom,
    generate_phantom,
    read_volume,
    write_landmarks,
)
from hoarefine.cli import main


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("HOA_REFINE_CONFIG", raising=False)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Three phantoms, their landmark files, and batch fuse/refine output."""
    root = tmp_path_factory.mktemp("cliwork")
    src = root / "src"
    lm = root / "lm"
    src.mkdir()
    lm.mkdir()
    for seed in (0, 1, 2):
        code = main(["phantom", str(src / f"p{seed}.nii"), "--seed", str(seed),
                     "--landmarks-out", str(lm / f"p{seed}.json")])
        assert code == 0
    fused = root / "fused"
    refined = root / "refined"
    assert main(["fuse", str(src), str(fused)]) == 0
    assert main(["refine", str(fused), str(refined),
                 "--landmarks", str(lm)]) == 0
    return root


class TestPipeline:
    def test_refined_matches_source(self, work):
        for seed in (0, 1, 2):
            src = read_volume(work / "src" / f"p{seed}.nii")
            out = read_volume(work / "refined" / f"p{seed}.nii")
            assert np.array_equal(out.data, src.data)
            assert out.taxonomy == "fine26"

    def test_taxonomy_tags_travel(self, work):
        assert read_volume(work / "src" / "p0.nii").taxonomy == "fine26"
        assert read_volume(work / "fused" / "p0.nii").taxonomy == "fused12"

    def test_manifests(self, work):
        doc = json.loads((work / "src" / "p0.nii.manifest.json").read_text())
        assert doc["command"] == "phantom"
        assert doc["seed"] == 0
        assert doc["version"]
        assert doc["elapsed_s"] >= 0
        doc = json.loads(
            (work / "refined" / "p1.nii.manifest.json").read_text())
        assert doc["command"] == "refine"
        assert [p.endswith(("p1.nii", "p1.json")) for p in doc["inputs"]] \
            == [True, True]
        assert doc["config"]["separator_mode"] == "linear"
        assert doc["output"].endswith("p1.nii")

    def test_jobs_do_not_change_bytes(self, work, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert main(["refine", str(work / "fused"), str(a),
                     "--landmarks", str(work / "lm"), "--jobs", "1"]) == 0
        assert main(["refine", str(work / "fused"), str(b),
                     "--landmarks", str(work / "lm"), "--jobs", "8"]) == 0
        for seed in (0, 1, 2):
            name = f"p{seed}.nii"
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_single_file_output_name_kept(self, work, tmp_path):
        out = tmp_path / "custom_name.nii.gz"
        assert main(["fuse", str(work / "src" / "p0.nii"), str(out)]) == 0
        assert out.exists()
        assert read_volume(out).taxonomy == "fused12"


class TestEvaluate:
    def test_json_to_stdout(self, work, capsys):
        code = main(["evaluate", str(work / "refined" / "p0.nii"),
                     str(work / "src" / "p0.nii"),
                     "--landmarks", str(work / "lm" / "p0.json")])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["subject"] == "p0"
        dice_rows = [r for r in doc["rows"] if r["metric"] == "dice"]
        assert len(dice_rows) == 26
        assert all(r["value"] == 1.0 for r in dice_rows)
        pasd_rows = [r for r in doc["rows"] if r["metric"] == "pasd"]
        assert len(pasd_rows) == 15
        assert all(r["value"] == 0.0 for r in pasd_rows)

    def test_csv_to_file_with_manifest(self, work, tmp_path):
        out = tmp_path / "report.csv"
        code = main(["evaluate", str(work / "refined" / "p0.nii"),
                     str(work / "src" / "p0.nii"),
                     "--landmarks", str(work / "lm" / "p0.json"),
                     "--format", "csv", "--out", str(out),
                     "--subject", "sub-7"])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "subject,metric,region,surface,side,value"
        assert lines[1].startswith("sub-7,")
        doc = json.loads((tmp_path / "report.csv.manifest.json").read_text())
        assert doc["command"] == "evaluate"

    def test_misaligned_volumes_exit_2(self, work, tmp_path, capsys):
        other = tmp_path / "other.nii"
        assert main(["phantom", str(other), "--seed", "0",
                     "--spacing", "0.8"]) == 0
        code = main(["evaluate", str(other), str(work / "src" / "p0.nii"),
                     "--landmarks", str(work / "lm" / "p0.json")])
        assert code == 2
        assert "affine" in capsys.readouterr().err


class TestRoundtrip:
    def test_clean_phantom_passes(self, work, capsys):
        code = main(["roundtrip", str(work / "src" / "p0.nii"),
                     "--landmarks", str(work / "lm" / "p0.json")])
        assert code == 0
        out = capsys.readouterr().out
        assert "mean dice: 1.000000" in out
        assert "mean pasd: 0.000000 mm" in out

    def test_jittered_landmarks_fail_threshold(self, work, tmp_path, capsys):
        vol, lms = generate_phantom(0)
        _, moved = degrade_phantom(vol, lms, "landmark-jitter", 1.0, seed=1)
        lm_path = tmp_path / "jittered.json"
        write_landmarks(moved, lm_path)
        code = main(["roundtrip", str(work / "src" / "p0.nii"),
                     "--landmarks", str(lm_path), "--threshold", "0.999"])
        captured = capsys.readouterr()
        assert code == 2
        assert "below threshold" in captured.err
        assert "mean dice: 0.9" in captured.out

    def test_collinear_plane_exits_3(self, work, tmp_path, capsys):
        _, lms = generate_phantom(0)
        pts = {lid: lms[lid].copy() for lid in lms.ids}
        ac, pc = pts[10], pts[15]
        pts[16] = ac + 2.0 * (pc - ac)  # drop PPF onto the AC-PC line
        lm_path = tmp_path / "collinear.json"
        write_landmarks(LandmarkSet(pts), lm_path)
        code = main(["roundtrip", str(work / "src" / "p0.nii"),
                     "--landmarks", str(lm_path)])
        assert code == 3
        assert "collinear" in capsys.readouterr().err


class TestExitCodes:
    def test_missing_input_is_io_error(self, tmp_path, capsys):
        assert main(["fuse", str(tmp_path / "nope.nii"),
                     str(tmp_path / "out.nii")]) == 1
        assert "does not exist" in capsys.readouterr().err

    def test_missing_landmark_file_is_io_error(self, work, tmp_path):
        assert main(["refine", str(work / "fused" / "p0.nii"),
                     str(tmp_path / "out.nii"),
                     "--landmarks", str(tmp_path / "nope.json")]) == 1

    def test_fusing_fused_volume_is_invalid(self, work, tmp_path, capsys):
        code = main(["fuse", str(work / "fused" / "p0.nii"),
                     str(tmp_path / "out.nii")])
        assert code == 2
        assert "fused" in capsys.readouterr().err

    def test_incomplete_landmarks_named_in_error(self, work, tmp_path, capsys):
        doc = json.loads((work / "lm" / "p0.json").read_text())
        doc["landmarks"] = [e for e in doc["landmarks"] if e["id"] != 16]
        lm_path = tmp_path / "short.json"
        lm_path.write_text(json.dumps(doc))
        code = main(["refine", str(work / "fused" / "p0.nii"),
                     str(tmp_path / "out.nii"), "--landmarks", str(lm_path)])
        assert code == 2
        assert "16" in capsys.readouterr().err


class TestConfigPrecedence:
    def test_env_then_file_then_flags(self, work, tmp_path, monkeypatch):
        env_cfg = tmp_path / "env.json"
        env_cfg.write_text(json.dumps(
            {"separator_mode": "posterior", "extent_strict": False}))
        cli_cfg = tmp_path / "cli.json"
        cli_cfg.write_text(json.dumps({"separator_mode": "anterior"}))
        monkeypatch.setenv("HOA_REFINE_CONFIG", str(env_cfg))
        out = tmp_path / "out.nii"
        code = main(["refine", str(work / "fused" / "p0.nii"), str(out),
                     "--landmarks", str(work / "lm" / "p0.json"),
                     "--config", str(cli_cfg), "--slice-adjust"])
        assert code == 0
        cfg = json.loads((tmp_path / "out.nii.manifest.json")
                         .read_text())["config"]
        assert cfg["separator_mode"] == "anterior"  # file beats env
        assert cfg["extent_strict"] is False        # env survives elsewhere
        assert cfg["slice_adjust"] is True          # flag beats both

    def test_bad_config_file_is_invalid(self, work, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"separator_mode": "diagonal"}))
        code = main(["refine", str(work / "fused" / "p0.nii"),
                     str(tmp_path / "out.nii"),
                     "--landmarks", str(work / "lm" / "p0.json"),
                     "--config", str(bad)])
        assert code == 2
        assert "separator_mode" in capsys.readouterr().err


class TestStats:
    def _tables(self, tmp_path, flip_subject=False):
        rng = np.random.default_rng(0)
        n = 12
        header = "subject,dice,pasd"
        rows_a, rows_b = [header], [header]
        for i in range(n):
            d = rng.normal(0.9, 0.01)
            p = rng.normal(0.5, 0.05)
            rows_a.append(f"s{i},{d + 0.05},{p + 0.3}")
            name = f"x{i}" if flip_subject and i == 3 else f"s{i}"
            rows_b.append(f"{name},{d},{p}")
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        a.write_text("\n".join(rows_a) + "\n")
        b.write_text("\n".join(rows_b) + "\n")
        return a, b

    def test_shifted_columns_significant(self, tmp_path, capsys):
        a, b = self._tables(tmp_path)
        assert main(["stats", str(a), str(b)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["q"] == 0.05
        assert [r["column"] for r in doc["results"]] == ["dice", "pasd"]
        assert all(r["significant"] for r in doc["results"])
        assert all(r["p_value"] <= 0.001 for r in doc["results"])

    def test_degenerate_column_serializes_null(self, tmp_path, capsys):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        a.write_text("subject,flat\n" +
                     "".join(f"s{i},0.5\n" for i in range(8)))
        b.write_text("subject,flat\n" +
                     "".join(f"s{i},0.5\n" for i in range(8)))
        assert main(["stats", str(a), str(b)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["results"][0]["p_value"] is None
        assert doc["results"][0]["significant"] is False

    def test_subject_mismatch_is_invalid(self, tmp_path, capsys):
        a, b = self._tables(tmp_path, flip_subject=True)
        assert main(["stats", str(a), str(b)]) == 2
        assert "subject mismatch" in capsys.readouterr().err

    def test_header_required(self, tmp_path, capsys):
        a = tmp_path / "a.csv"
        a.write_text("name,dice\ns0,0.5\n")
        assert main(["stats", str(a), str(a)]) == 2
        assert "header" in capsys.readouterr().err

    def test_csv_output(self, tmp_path, capsys):
        a, b = self._tables(tmp_path)
        assert main(["stats", str(a), str(b), "--format", "csv"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "column,statistic,p_value,significant"
        assert lines[1].startswith("dice,") and lines[1].endswith(",true")


class TestPhantomCommand:
    def test_deterministic_output(self, tmp_path):
        a = tmp_path / "a.nii"
        b = tmp_path / "b.nii"
        assert main(["phantom", str(a), "--seed", "9"]) == 0
        assert main(["phantom", str(b), "--seed", "9"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_degrade_writes_fused_volume(self, tmp_path):
        out = tmp_path / "noisy.nii"
        assert main(["phantom", str(out), "--seed", "1",
                     "--degrade", "boundary-noise", "--amount", "0.2"]) == 0
        vol = read_volume(out)
        assert vol.taxonomy == "fused12"
        assert int(vol.data.max()) <= 12

    def test_degraded_landmarks_move(self, tmp_path):
        clean = tmp_path / "clean.nii"
        noisy = tmp_path / "noisy.nii"
        assert main(["phantom", str(clean), "--seed", "2"]) == 0
        assert main(["phantom", str(noisy), "--seed", "2", "--degrade",
                     "landmark-jitter", "--amount", "1.5"]) == 0
        a = json.loads((tmp_path / "clean.landmarks.json").read_text())
        b = json.loads((tmp_path / "noisy.landmarks.json").read_text())
        assert a["landmarks"][0]["xyz"] != b["landmarks"][0]["xyz"]


class TestShapeCommands:
    def test_fit_apply_iterate_sample(self, work, tmp_path, capsys):
        lm_files = [str(work / "lm" / f"p{s}.json") for s in (0, 1, 2)]
        model_path = tmp_path / "model.json"
        assert main(["shape", "fit", *lm_files, "--selector", "3",
                     "--out", str(model_path)]) == 0
        doc = json.loads(model_path.read_text())
        assert doc["n_components"] == 2  # three samples span two modes

        lm_out = tmp_path / "reconstructed.json"
        assert main(["shape", "apply", str(model_path),
                     "--coeffs", "1.0,0.5", "--out", str(lm_out)]) == 0
        assert len(json.loads(lm_out.read_text())["landmarks"]) == 16

        trace_path = tmp_path / "trace.json"
        assert main(["shape", "iterate", str(model_path),
                     "--target", lm_files[1], "--steps", "4",
                     "--out", str(trace_path)]) == 0
        trace = json.loads(trace_path.read_text())
        errs = [s["mean_error_mm"] for s in trace["steps"]]
        assert errs[0] > 0.1
        assert errs[1] < 1e-9  # full-confidence oracle lands in one step
        assert len(trace["final_landmarks"]) == 16

        sample_path = tmp_path / "patches.json"
        assert main(["shape", "sample", "--center", "1,2,3", "--radius", "4",
                     "--count", "100", "--seed", "7",
                     "--out", str(sample_path)]) == 0
        doc = json.loads(sample_path.read_text())
        assert doc["side"] == 16
        assert len(doc["points"]) == 100

    def test_too_many_coefficients(self, work, tmp_path, capsys):
        lm_files = [str(work / "lm" / f"p{s}.json") for s in (0, 1)]
        model_path = tmp_path / "model.json"
        assert main(["shape", "fit", *lm_files, "--selector", "1",
                     "--out", str(model_path)]) == 0
        code = main(["shape", "apply", str(model_path),
                     "--coeffs", "1,2,3,4", "--out", str(tmp_path / "x.json")])
        assert code == 2
        assert "coefficients" in capsys.readouterr().err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip()
