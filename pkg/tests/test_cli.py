"""End-to-end command-line behavior on a miniature run."""

import json
import re
from pathlib import Path

import numpy as np
import pytest

from softtree.cli import main
from softtree.data import load_dataset

TINY_CONFIG = """\
seed = 3
precision = float32
tree.height = 2
tree.channels = 4,4
tree.dilations = 1,2
backbone.widths = 4
backbone.input_side = 16
augment.resize_shorter = 18
augment.crop = 16
plan.stage1.freeze = on
plan.stage1.epochs = 1
plan.stage1.batch_size = 8
plan.stage1.lr = 0.05
plan.stage1.milestones =
plan.stage2.freeze = off
plan.stage2.epochs = 2
plan.stage2.batch_size = 8
plan.stage2.lr = 0.02
plan.stage2.milestones =
data.root = {root}
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + one tiny training run shared by the command tests."""
    base = tmp_path_factory.mktemp("cli")
    data_dir = base / "data"
    assert main(["gen-data", "--out", str(data_dir), "--classes", "2",
                 "--per-class", "4", "--side", "16", "--seed", "1"]) == 0
    cfg_path = base / "run.conf"
    cfg_path.write_text(TINY_CONFIG.format(root=data_dir))
    out_dir = base / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out_dir)]) == 0
    return {"base": base, "data": data_dir, "config": cfg_path, "out": out_dir}


class TestGenData:
    def test_layout_and_loadability(self, workspace):
        data = workspace["data"]
        train = load_dataset(data / "train")
        test = load_dataset(data / "test")
        assert train.num_classes == 2 and len(train) == 8
        assert test.num_classes == 2 and len(test) == 4
        assert (data / "train_meta.jsonl").exists()
        meta = [json.loads(line) for line in
                (data / "train_meta.jsonl").read_text().splitlines()]
        assert len(meta) == 8
        assert all(len(m["glyph_box"]) == 4 for m in meta)

    def test_files_match_in_memory_generator(self, workspace):
        from softtree.data import generate_synthetic
        train_mem, _ = generate_synthetic(2, 4, 16, seed=1)
        train_fs = load_dataset(workspace["data"] / "train")
        for mem, fs in zip(train_mem.samples, train_fs.samples):
            np.testing.assert_array_equal(mem.image, fs.image)


class TestTrain:
    def test_metrics_file_has_one_line_per_epoch(self, workspace):
        lines = (workspace["out"] / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 3  # 1 + 2 epochs
        records = [json.loads(line) for line in lines]
        assert [r["stage"] for r in records] == [1, 2, 2]
        assert all(set(r) >= {"stage", "epoch", "lr", "train_loss", "train_top1",
                              "val_top1", "leaf_top1"} for r in records)

    def test_outputs_written(self, workspace):
        out = workspace["out"]
        for name in ("stage1.ckpt", "stage2.ckpt", "best.ckpt", "curves.png",
                     "metrics.jsonl"):
            assert (out / name).exists(), name

    def test_same_seed_byte_identical_metrics(self, workspace, tmp_path):
        out2 = tmp_path / "again"
        assert main(["train", "--config", str(workspace["config"]),
                     "--out", str(out2)]) == 0
        assert (out2 / "metrics.jsonl").read_bytes() == \
            (workspace["out"] / "metrics.jsonl").read_bytes()

    def test_resume_skips_completed_stage(self, workspace, tmp_path):
        out2 = tmp_path / "resumed"
        assert main(["train", "--resume", str(workspace["out"] / "stage1.ckpt"),
                     "--out", str(out2)]) == 0
        records = [json.loads(line) for line in
                   (out2 / "metrics.jsonl").read_text().splitlines()]
        assert len(records) == 2
        assert all(r["stage"] == 2 for r in records)

    def test_missing_config_is_error(self, capsys):
        assert main(["train"]) == 2
        assert "config" in capsys.readouterr().err

    def test_bad_data_root_is_clean_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.conf"
        cfg.write_text(TINY_CONFIG.format(root=tmp_path / "nowhere"))
        assert main(["train", "--config", str(cfg), "--out",
                     str(tmp_path / "o")]) == 2
        assert "error" in capsys.readouterr().err


class TestEval:
    def test_report_and_files(self, workspace, capsys):
        rc = main(["eval", "--ckpt", str(workspace["out"] / "stage2.ckpt"),
                   "--data", str(workspace["data"] / "test")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "top1 =" in out
        assert (workspace["out"] / "eval.json").exists()
        assert (workspace["out"] / "eval.png").exists()
        report = json.loads((workspace["out"] / "eval.json").read_text())
        assert len(report["per_leaf_top1"]) == 2
        assert all(0.0 <= v <= 1.0 for v in report["per_leaf_top1"])
        assert report["count"] == 4

    def test_eval_twice_is_identical(self, workspace, capsys):
        args = ["eval", "--ckpt", str(workspace["out"] / "stage2.ckpt"),
                "--data", str(workspace["data"] / "test")]
        main(args)
        first = capsys.readouterr().out
        main(args)
        second = capsys.readouterr().out
        assert first == second

    def test_top1_matches_infer_recount(self, workspace, capsys):
        ckpt = str(workspace["out"] / "stage2.ckpt")
        main(["eval", "--ckpt", ckpt, "--data", str(workspace["data"] / "test")])
        top1 = float(re.search(r"top1 = ([\d.]+)",
                               capsys.readouterr().out).group(1))
        test = load_dataset(workspace["data"] / "test")
        hits = 0
        for sample in test.samples:
            image_path = workspace["data"] / "test" / sample.id
            main(["infer", "--ckpt", ckpt, "--image", str(image_path),
                  "--topk", "1"])
            line = capsys.readouterr().out.splitlines()[0]
            predicted = int(re.search(r"class (\d+)", line).group(1))
            hits += int(predicted == sample.label)
        assert abs(top1 - hits / len(test.samples)) < 1e-9


class TestInfer:
    def test_topk_full_distribution_sums_to_one(self, workspace, capsys):
        sample = next((workspace["data"] / "test" / "class_00").iterdir())
        rc = main(["infer", "--ckpt", str(workspace["out"] / "best.ckpt"),
                   "--image", str(sample), "--topk", "99"])
        assert rc == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 2  # clipped to K
        confs = [float(re.search(r"confidence = ([\d.e+-]+)", ln).group(1))
                 for ln in lines]
        assert abs(sum(confs) - 1.0) < 1e-6
        assert confs == sorted(confs, reverse=True)

    def test_malformed_image_is_clean_error(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"garbage")
        rc = main(["infer", "--ckpt", str(workspace["out"] / "best.ckpt"),
                   "--image", str(bad), "--topk", "1"])
        assert rc == 2
        assert "error" in capsys.readouterr().err


class TestInspect:
    def test_writes_maps_report_and_figure(self, workspace, tmp_path, capsys):
        sample = next((workspace["data"] / "test" / "class_01").iterdir())
        out = tmp_path / "inspection"
        rc = main(["inspect", "--ckpt", str(workspace["out"] / "stage2.ckpt"),
                   "--image", str(sample), "--out", str(out)])
        assert rc == 0
        pgms = sorted(p.name for p in out.glob("*.pgm"))
        assert pgms == ["leaf_1.pgm", "leaf_2.pgm", "node_1_1.pgm"]
        assert (out / "report.txt").exists()
        assert (out / "inspect.png").exists()

    def test_report_values_consistent(self, workspace, tmp_path):
        sample = next((workspace["data"] / "test" / "class_00").iterdir())
        out = tmp_path / "inspection2"
        main(["inspect", "--ckpt", str(workspace["out"] / "stage2.ckpt"),
              "--image", str(sample), "--out", str(out)])
        text = (out / "report.txt").read_text()
        gates = [float(m.group(1)) for m in
                 re.finditer(r"gate \d+ \d+ = ([\d.e+-]+)", text)]
        assert gates and all(0.0 <= g <= 1.0 for g in gates)
        leaf_rs = [float(m.group(1)) for m in
                   re.finditer(r"r 2 \d+ = ([\d.e+-]+)", text)]
        assert abs(sum(leaf_rs) - 1.0) < 1e-6
        final = [float(v) for v in
                 re.search(r"final = (.+)", text).group(1).split(",")]
        assert abs(sum(final) - 1.0) < 1e-6


class TestGradcheckCommand:
    def test_exits_zero_and_prints_per_primitive(self, capsys):
        rc = main(["gradcheck"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "conv2d" in out and "PASS" in out and "FAIL" not in out
