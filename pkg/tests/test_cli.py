"""Command-level behavior: outputs, determinism, exit codes."""

import hashlib
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from rotoscale import formats
from rotoscale.cli import EXIT_AUDIT, EXIT_FORMAT, EXIT_OK, EXIT_USAGE, main
from rotoscale.report import read_csv


def run(*argv):
    return main([str(a) for a in argv])


def dir_digest(root):
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset + tiny trained checkpoint shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "ds", "--count", 4, "--size", 24,
               "--classes", 3, "--seed", 3) == EXIT_OK
    assert run("gen-data", "--out", root / "test_ds", "--count", 3, "--size", 24,
               "--classes", 3, "--seed", 90) == EXIT_OK
    cfg = root / "run.cfg"
    cfg.write_text(
        "# toy run\n"
        "model.depth=2\n"
        "model.channels=5,5\n"
        "model.classes=3\n"
        "model.groups=2\n"
        "train.steps=8\n"
        "train.step_size=0.1\n"
        "train.seed=2\n"
        f"data.manifest={root}/ds/manifest.txt\n"
        f"data.test_manifest={root}/test_ds/manifest.txt\n"
    )
    assert run("train", "--config", cfg, "--out", root / "run") == EXIT_OK
    return root


class TestGenData:
    def test_zero_count_empty_manifest(self, tmp_path):
        assert run("gen-data", "--out", tmp_path / "d", "--count", 0) == EXIT_OK
        assert (tmp_path / "d" / "manifest.txt").read_text() == ""

    def test_same_seed_identical_bytes(self, tmp_path):
        for sub in ("a", "b"):
            run("gen-data", "--out", tmp_path / sub, "--count", 3, "--size", 20,
                "--classes", 2, "--seed", 11)
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")

    def test_timing_budget(self, tmp_path):
        start = time.monotonic()
        assert run("gen-data", "--out", tmp_path / "t", "--count", 8, "--size", 64) == EXIT_OK
        assert time.monotonic() - start < 5.0

    def test_images_load_back(self, tmp_path):
        run("gen-data", "--out", tmp_path / "d", "--count", 1, "--size", 16, "--classes", 2)
        pairs = formats.load_manifest(tmp_path / "d" / "manifest.txt")
        image = formats.load_image(pairs[0][0])
        mask = formats.load_mask(pairs[0][1])
        assert image.shape == (1, 16, 16)
        assert mask.shape == (16, 16)


class TestTrain:
    def test_zero_steps_checkpoint_equals_init(self, workspace, tmp_path):
        cfg = tmp_path / "zero.cfg"
        cfg.write_text(
            "model.depth=2\nmodel.channels=5,5\nmodel.classes=3\n"
            "train.steps=0\ntrain.seed=2\n"
            f"data.manifest={workspace}/ds/manifest.txt\n"
        )
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run("train", "--config", cfg, "--out", out_a) == EXIT_OK
        assert run("train", "--config", cfg, "--out", out_b) == EXIT_OK
        assert dir_digest(out_a / "checkpoint") == dir_digest(out_b / "checkpoint")
        from rotoscale import net

        loaded = net.load_checkpoint(out_a / "checkpoint")
        fresh = net.build_model(loaded.config, seed=2)
        for got, want in zip(loaded.banks, fresh.banks):
            assert got.coeffs.tobytes() == want.coeffs.tobytes()

    def test_same_seed_bit_identical_outputs(self, workspace, tmp_path):
        cfg = workspace / "run.cfg"
        out_a, out_b = tmp_path / "r1", tmp_path / "r2"
        assert run("train", "--config", cfg, "--out", out_a) == EXIT_OK
        assert run("train", "--config", cfg, "--out", out_b) == EXIT_OK
        assert dir_digest(out_a / "checkpoint") == dir_digest(out_b / "checkpoint")
        assert (out_a / "loss.csv").read_bytes() == (out_b / "loss.csv").read_bytes()

    def test_resolved_config_written(self, workspace):
        resolved = formats.read_keyvalues(workspace / "run" / "resolved.cfg")
        assert resolved["train.steps"] == "8"

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("model.dpeth=2\n")
        assert run("train", "--config", cfg, "--out", tmp_path / "o") == EXIT_USAGE

    def test_set_override(self, workspace, tmp_path):
        out = tmp_path / "o"
        assert run("train", "--config", workspace / "run.cfg", "--out", out,
                   "--set", "train.steps=1") == EXIT_OK
        assert formats.read_keyvalues(out / "resolved.cfg")["train.steps"] == "1"


class TestEval:
    def test_quarter_rotation_preserves_miou(self, workspace, tmp_path):
        out = tmp_path / "ev"
        assert run("eval", "--checkpoint", workspace / "run" / "checkpoint",
                   "--data", workspace / "ds" / "manifest.txt",
                   "--R", 4, "--reduction", "max",
                   "--angle", "0,90", "--scale", "1", "--out", out) == EXIT_OK
        header, rows = read_csv(out / "report.csv")
        assert header == ["image", "angle_deg", "scale", "miou"]
        by_key = {(r[0], float(r[1])): float(r[3]) for r in rows if r[0] != "mean"}
        for (name, angle), score in by_key.items():
            if angle == 0.0:
                assert abs(score - by_key[(name, 90.0)]) < 1e-9
        assert rows[-1][0] == "mean"

    def test_unknown_reduction_usage_error(self, workspace, tmp_path):
        code = run("eval", "--checkpoint", workspace / "run" / "checkpoint",
                   "--data", workspace / "ds" / "manifest.txt",
                   "--reduction", "median", "--out", tmp_path / "x")
        assert code == EXIT_USAGE

    def test_missing_checkpoint_usage_error(self, workspace, tmp_path):
        code = run("eval", "--checkpoint", tmp_path / "nope",
                   "--data", workspace / "ds" / "manifest.txt", "--out", tmp_path / "x")
        assert code == EXIT_USAGE

    def test_corrupt_tensor_format_error(self, workspace, tmp_path):
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(workspace / "run" / "checkpoint", broken)
        blob = (broken / "head.weights.ten1").read_bytes()
        (broken / "head.weights.ten1").write_bytes(b"XXXX" + blob[4:])
        code = run("eval", "--checkpoint", broken,
                   "--data", workspace / "ds" / "manifest.txt", "--out", tmp_path / "x")
        assert code == EXIT_FORMAT


class TestPolarReport:
    def test_rows_svg_and_cross_check(self, workspace, tmp_path):
        out = tmp_path / "polar"
        assert run("polar-report", "--checkpoint", workspace / "run" / "checkpoint",
                   "--data", workspace / "ds" / "manifest.txt",
                   "--angles", 4, "--scales", "1", "--R", 4, "--reduction", "max",
                   "--out", out) == EXIT_OK
        header, rows = read_csv(out / "polar.csv")
        assert header == ["angle_deg", "scale", "miou"]
        assert len(rows) == 4  # 4 angles x 1 scale
        ET.parse(out / "polar.svg")  # well-formed XML
        root = ET.parse(out / "polar.svg").getroot()
        assert root.get("viewBox") == "0 0 800 800"

        # Cross-check: each polar row equals the eval aggregate at that angle.
        for angle_deg, scale, miou in rows:
            ev_out = tmp_path / f"ev{float(angle_deg):.0f}"
            run("eval", "--checkpoint", workspace / "run" / "checkpoint",
                "--data", workspace / "ds" / "manifest.txt",
                "--R", 4, "--reduction", "max",
                "--angle", angle_deg, "--scale", scale, "--out", ev_out)
            _, ev_rows = read_csv(ev_out / "report.csv")
            assert float(ev_rows[-1][3]) == float(miou)


class TestAudit:
    def test_random_model_passes(self, tmp_path):
        out = tmp_path / "audit"
        assert run("audit", "--random-model", "--out", out) == EXIT_OK
        text = (out / "audit.txt").read_text()
        assert "# threshold" in text
        header, rows = read_csv(out / "audit.csv")
        assert header == ["check", "residual", "threshold", "pass"]
        assert all(row[3] == "true" for row in rows)

    def test_corrupted_rotation_slice_trips_rot90(self, tmp_path):
        clean = tmp_path / "clean"
        assert run("audit", "--random-model", "--out", clean) == EXIT_OK
        tensor_path = clean / "tensors" / "layer02.group00.ten1"
        values = formats.load_tensor(tensor_path)
        values[:, :, 1] += 0.05 * np.abs(values).max()
        formats.save_tensor(tensor_path, values)
        poked = tmp_path / "poked"
        code = run("audit", "--random-model", "--tensors", clean / "tensors", "--out", poked)
        assert code == EXIT_AUDIT
        _, rows = read_csv(poked / "audit.csv")
        failed = {row[0] for row in rows if row[3] == "false"}
        assert "rot90-forward" in failed

    def test_needs_model_source(self, tmp_path):
        assert run("audit", "--out", tmp_path / "x") == EXIT_USAGE


class TestAugmentCompare:
    def test_rows_and_rotation_benefit(self, workspace, tmp_path):
        out = tmp_path / "cmp"
        assert run("augment-compare", "--config", workspace / "run.cfg", "--out", out,
                   "--set", "train.steps=40", "--set", "train.momentum=0.9",
                   "--set", "train.step_size=0.2") == EXIT_OK
        header, rows = read_csv(out / "comparison.csv")
        assert header == ["augmented", "r_infer", "mean_miou"]
        assert len(rows) == 4
        scores = {(r[0], int(r[1])): float(r[2]) for r in rows}
        # Inflating the unaugmented model to R=4 must help on the rotated split.
        assert scores[("no", 4)] >= scores[("no", 1)]

    def test_usage_without_manifest(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("model.depth=2\nmodel.channels=4,4\nmodel.classes=3\n")
        assert run("augment-compare", "--config", cfg, "--out", tmp_path / "o") == EXIT_USAGE
