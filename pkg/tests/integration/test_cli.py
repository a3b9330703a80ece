"""
End-to-end tests of the command-line surface on a small synthetic scene.
"""
import json
import logging

import numpy as np
import pytest

from gsgrasp.cli import main


def _run(*argv: str) -> int:
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    try:
        return main([str(a) for a in argv])
    finally:
        root.handlers, root.level = handlers, level


def _stdout_json(capsys) -> dict:
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def _stderr_json(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic scene, an initialized field and a briefly trained one."""
    root = tmp_path_factory.mktemp("cli")
    manifest = root / "scene" / "manifest.json"
    assert _run("synth", "--out", root / "scene", "--objects", 2, "--width", 32, "--height", 24, "--d-clip", 16) == 0
    assert _run("init", "--scene", manifest, "--out", root / "field.ggf", "--count", 1000) == 0
    assert _run(
        "train", "--scene", manifest, "--checkpoint", root / "field.ggf",
        "--out", root / "trained.ggf", "--iterations", 3,
    ) == 0
    return root


class TestPipelineCommands:
    def test_training_outputs(self, workspace):
        assert (workspace / "trained.ggf").is_file()
        assert (workspace / "trained.decoder.pt").is_file()
        lines = (workspace / "trained.loss.csv").read_text().splitlines()
        assert lines[0].startswith("iteration,view_id")
        assert len(lines) == 4

    def test_render(self, workspace, capsys):
        out = workspace / "render"
        code = _run(
            "render", "--scene", workspace / "scene" / "manifest.json",
            "--checkpoint", workspace / "trained.ggf", "--view", "view_000", "--out", out,
        )

        assert code == 0
        summary = _stdout_json(capsys)
        assert summary["view_id"] == "view_000"
        assert 0.0 <= summary["coverage"] <= 1.0
        for name in ("color.png", "depth.png", "normal.png", "feature.ggfm", "alpha.ggfm"):
            assert (out / name).is_file()

    def test_query_writes_artifacts(self, workspace, capsys):
        out = workspace / "query"
        code = _run(
            "query", "--scene", workspace / "scene" / "manifest.json",
            "--checkpoint", workspace / "trained.ggf", "--query", "object_0",
            "--views", "view_000", "--threshold", "1e-12", "--out", out,
        )

        assert code == 0
        summary = _stdout_json(capsys)
        assert summary["points"] > 0
        assert np.all(np.asarray(summary["bbox_min"]) <= np.asarray(summary["bbox_max"]))
        for name in ("hull.json", "object.ply", "relevance_view_000.png", "relevance_view_000.ggfm", "mask_view_000.png"):
            assert (out / name).is_file()

    def test_eval(self, workspace, capsys):
        code = _run(
            "eval", "--scene", workspace / "scene" / "manifest.json",
            "--checkpoint", workspace / "trained.ggf", "--no-geometry",
            "--latency-height", 48, "--latency-width", 64,
        )

        assert code == 0
        summary = _stdout_json(capsys)
        assert 0.0 <= summary["miou"] <= 1.0
        assert 0.0 <= summary["localization_accuracy"] <= 1.0
        assert summary["resolution"] == [48, 64]
        assert summary["mean_latency_s"] > 0

    def test_eval_rejects_empty_latency_resolution(self, workspace, capsys):
        code = _run(
            "eval", "--scene", workspace / "scene" / "manifest.json",
            "--checkpoint", workspace / "trained.ggf", "--no-geometry", "--latency-width", 0,
        )

        assert code == 2
        assert _stderr_json(capsys)["error"]["code"] == "VALIDATION_ERROR"

    def test_identity_update_copies_checkpoint(self, workspace, tmp_path, capsys):
        motion = tmp_path / "motion.json"
        motion.write_text(json.dumps({"matrix": np.eye(4).reshape(-1).tolist()}))
        hull = tmp_path / "hull.json"
        hull.write_text(json.dumps({"vertices": [[-1, -1, -1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]}))
        out = tmp_path / "updated.ggf"

        code = _run(
            "update", "--scene", workspace / "scene" / "manifest.json",
            "--checkpoint", workspace / "trained.ggf", "--hull", hull,
            "--motion", motion, "--iterations", 0, "--out", out,
        )

        assert code == 0
        assert _stdout_json(capsys)["noop"] is True
        assert out.read_bytes() == (workspace / "trained.ggf").read_bytes()
        assert (tmp_path / "updated.decoder.pt").read_bytes() == (workspace / "trained.decoder.pt").read_bytes()

    def test_grasp_filter_by_score(self, tmp_path, capsys):
        proposals = tmp_path / "proposals.json"
        proposals.write_text(json.dumps([
            {"pose": np.eye(4).reshape(-1).tolist(), "width": 0.05, "score": s} for s in (0.2, 0.9, 0.4)
        ]))

        code = _run("grasp-filter", "--proposals", proposals, "--out", tmp_path / "decisions.json", "--no-normal-filter")

        assert code == 0
        assert _stdout_json(capsys)["selected"] == 1
        decisions = json.loads((tmp_path / "decisions.json").read_text())
        assert [d["feasible"] for d in decisions] == [True, True, True]


class TestErrors:
    def test_malformed_manifest(self, tmp_path, capsys):
        manifest = tmp_path / "manifest.json"
        manifest.write_text("{")

        code = _run("init", "--scene", manifest, "--out", tmp_path / "field.ggf")

        assert code == 2
        assert _stderr_json(capsys)["error"]["code"] == "PARSE_ERROR"
        assert not (tmp_path / "field.ggf").exists()

    def test_missing_checkpoint(self, workspace, tmp_path, capsys):
        code = _run(
            "render", "--scene", workspace / "scene" / "manifest.json",
            "--checkpoint", tmp_path / "absent.ggf", "--view", "view_000", "--out", tmp_path,
        )

        assert code == 1
        assert _stderr_json(capsys)["error"]["code"] == "MISSING_FILE"

    def test_update_needs_one_selector(self, workspace, tmp_path, capsys):
        code = _run(
            "update", "--scene", workspace / "scene" / "manifest.json",
            "--checkpoint", workspace / "trained.ggf", "--motion", tmp_path / "motion.json",
            "--out", tmp_path / "out.ggf",
        )

        assert code == 2
        assert _stderr_json(capsys)["error"]["code"] == "VALIDATION_ERROR"

    def test_grasp_filter_needs_a_surface(self, tmp_path, capsys):
        proposals = tmp_path / "proposals.json"
        proposals.write_text(json.dumps([{"pose": np.eye(4).reshape(-1).tolist(), "width": 0.05, "score": 1.0}]))

        code = _run("grasp-filter", "--proposals", proposals, "--out", tmp_path / "d.json")

        assert code == 2
