"""CLI commands: schemas, determinism, exit codes, and diagnostics."""

import hashlib
import json
import os

import numpy as np
import pytest

from boxteach.cli import ExperimentConfig, main
from boxteach.detector import DetectorConfig
from boxteach.iou_head import IoUHeadConfig, JitterConfig
from boxteach.pseudo_label import Detection, write_detections
from boxteach.ssl_loop import METRIC_COLUMNS, AugmentConfig, PretrainConfig, SSLConfig
from boxteach.pseudo_label import ThresholdConfig
from boxteach.synth_data import GeneratorConfig, load_dataset


def tiny_config(tmp_path, **overrides):
    cfg = ExperimentConfig(
        seed=3,
        n_scenes=8,
        label_ratio=0.5,
        n_val=2,
        generator=GeneratorConfig(n_objects_range=(2, 3), points_per_object=24,
                                  background_points=48),
        detector=DetectorConfig(n_proposals=8, n_neighbors=8, hidden=16,
                                iou=IoUHeadConfig(hidden=16, grid_depth=2)),
        pretrain=PretrainConfig(epochs=2, batch_size=2,
                                augment=AugmentConfig(n_points=96),
                                jitter=JitterConfig(n_jitters_per_box=1)),
        ssl=SSLConfig(epochs=2, eval_interval=1, n_labeled=2, n_unlabeled=3,
                      ema_decay=0.9, eval_unlabeled_scenes=2,
                      augment=AugmentConfig(n_points=96),
                      jitter=JitterConfig(n_jitters_per_box=1),
                      thresholds=ThresholdConfig(0.3, 0.4, 0.05)),
    )
    doc = cfg.to_dict()
    doc.update(overrides)
    path = str(tmp_path / "config.json")
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


def dir_digest(path):
    digest = hashlib.sha256()
    for root, _, files in sorted(os.walk(path)):
        for name in sorted(files):
            digest.update(name.encode())
            with open(os.path.join(root, name), "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


class TestConfig:
    def test_round_trip_exact(self, tmp_path):
        cfg = ExperimentConfig()
        blob = json.dumps(cfg.to_dict(), sort_keys=True)
        back = ExperimentConfig.from_dict(json.loads(blob))
        assert json.dumps(back.to_dict(), sort_keys=True) == blob

    def test_round_trip_with_per_class_thresholds(self, tmp_path):
        cfg = ExperimentConfig()
        cfg.ssl.thresholds = ThresholdConfig(tau_iou={0: 0.5, 1: 0.25, 2: 0.25})
        blob = json.dumps(cfg.to_dict(), sort_keys=True)
        back = ExperimentConfig.from_dict(json.loads(blob))
        assert back.ssl.thresholds.iou_threshold(0) == 0.5
        assert json.dumps(back.to_dict(), sort_keys=True) == blob


class TestGen:
    def test_writes_dataset(self, tmp_path, capsys):
        config = tiny_config(tmp_path)
        out = str(tmp_path / "data")
        assert main(["gen", "--config", config, "--out", out]) == 0
        split, params = load_dataset(out)
        assert len(split.labeled) == 4
        assert len(split.unlabeled) == 4
        assert len(split.val) == 2
        assert "wrote 8 scenes" in capsys.readouterr().out
        files = set(os.listdir(out))
        assert "split.json" in files
        assert len(files) == 11  # 10 scenes + split.json

    def test_deterministic_rerun(self, tmp_path):
        config = tiny_config(tmp_path)
        out1 = str(tmp_path / "d1")
        out2 = str(tmp_path / "d2")
        main(["gen", "--config", config, "--out", out1])
        main(["gen", "--config", config, "--out", out2])
        assert dir_digest(out1) == dir_digest(out2)

    def test_zero_label_ratio_usage_error(self, tmp_path, capsys):
        config = tiny_config(tmp_path)
        code = main(["gen", "--config", config, "--label-ratio", "0",
                     "--out", str(tmp_path / "d")])
        assert code == 2
        assert "label-ratio" in capsys.readouterr().err


@pytest.fixture()
def trained_dirs(tmp_path):
    config = tiny_config(tmp_path)
    data = str(tmp_path / "data")
    pre = str(tmp_path / "pre")
    main(["gen", "--config", config, "--out", data])
    assert main(["pretrain", "--config", config, "--dataset", data,
                 "--out", pre]) == 0
    return config, data, pre


class TestPretrainSSL:
    def test_pretrain_outputs(self, trained_dirs):
        _, _, pre = trained_dirs
        assert os.path.exists(os.path.join(pre, "pretrain.json"))
        lines = open(os.path.join(pre, "pretrain_loss.csv")).read().splitlines()
        assert lines[0] == "epoch,loss"
        assert len(lines) == 3  # header + 2 epochs

    def test_ssl_metrics_schema(self, trained_dirs, tmp_path):
        config, data, pre = trained_dirs
        out = str(tmp_path / "ssl")
        assert main(["ssl", "--config", config, "--dataset", data,
                     "--pretrained", os.path.join(pre, "pretrain.json"),
                     "--out", out]) == 0
        lines = open(os.path.join(out, "metrics.csv")).read().splitlines()
        assert lines[0] == ",".join(METRIC_COLUMNS)
        assert len(lines) == 1 + 3  # epochs 0, 1, 2
        assert all(len(line.split(",")) == 7 for line in lines[1:])

    def test_ssl_deterministic(self, trained_dirs, tmp_path):
        config, data, pre = trained_dirs
        out1 = str(tmp_path / "s1")
        out2 = str(tmp_path / "s2")
        ckpt = os.path.join(pre, "pretrain.json")
        main(["ssl", "--config", config, "--dataset", data, "--pretrained", ckpt,
              "--out", out1])
        main(["ssl", "--config", config, "--dataset", data, "--pretrained", ckpt,
              "--out", out2])
        assert dir_digest(out1) == dir_digest(out2)

    def test_missing_checkpoint_error(self, trained_dirs, tmp_path, capsys):
        config, data, _ = trained_dirs
        code = main(["ssl", "--config", config, "--dataset", data,
                     "--pretrained", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "x")])
        assert code == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_pretrain_deterministic(self, tmp_path):
        config = tiny_config(tmp_path)
        data = str(tmp_path / "data")
        main(["gen", "--config", config, "--out", data])
        p1 = str(tmp_path / "p1")
        p2 = str(tmp_path / "p2")
        main(["pretrain", "--config", config, "--dataset", data, "--out", p1])
        main(["pretrain", "--config", config, "--dataset", data, "--out", p2])
        assert dir_digest(p1) == dir_digest(p2)


class TestEval:
    def gt_predictions(self, data_dir, path):
        split, _ = load_dataset(data_dir)
        preds = {}
        for scene in split.val:
            dets = []
            for box, cls in scene.labels:
                probs = np.full(3, 0.01)
                probs[cls] = 0.98
                dets.append(Detection(box=box, objectness=0.95, class_probs=probs,
                                      pred_iou=0.9, anchor=box.center))
            preds[scene.scene_id] = dets
        write_detections(preds, path)

    def test_gt_as_predictions_perfect(self, trained_dirs, tmp_path, capsys):
        config, data, _ = trained_dirs
        preds = str(tmp_path / "preds.json")
        self.gt_predictions(data, preds)
        report = str(tmp_path / "report.json")
        assert main(["eval", "--config", config, "--predictions", preds,
                     "--dataset", data, "--out", report]) == 0
        out = capsys.readouterr().out
        assert "mAP@0.25 = 1.000000" in out
        assert "mAP@0.5 = 1.000000" in out
        doc = json.load(open(report))
        assert doc[0]["map"] == 1.0

    def test_r40_mode(self, trained_dirs, tmp_path, capsys):
        config, data, _ = trained_dirs
        preds = str(tmp_path / "preds.json")
        self.gt_predictions(data, preds)
        assert main(["eval", "--config", config, "--predictions", preds,
                     "--dataset", data, "--ap-mode", "r40"]) == 0
        assert "mAP@0.25 = 1.000000" in capsys.readouterr().out

    def test_pr_curves_output(self, trained_dirs, tmp_path, capsys):
        config, data, _ = trained_dirs
        preds = str(tmp_path / "preds.json")
        self.gt_predictions(data, preds)
        pr = str(tmp_path / "pr.csv")
        assert main(["eval", "--config", config, "--predictions", preds,
                     "--dataset", data, "--pr-curves", pr]) == 0
        lines = open(pr).read().strip().splitlines()
        assert lines[0] == "class,recall,precision"
        assert len(lines) > 1

    def test_empty_predictions_zero_map(self, trained_dirs, tmp_path, capsys):
        config, data, _ = trained_dirs
        preds = str(tmp_path / "empty.json")
        write_detections({}, preds)
        assert main(["eval", "--config", config, "--predictions", preds,
                     "--dataset", data]) == 0
        assert "mAP@0.25 = 0.000000" in capsys.readouterr().out

    def test_bad_ap_mode(self, trained_dirs, tmp_path, capsys):
        config, data, _ = trained_dirs
        preds = str(tmp_path / "empty.json")
        write_detections({}, preds)
        assert main(["eval", "--config", config, "--predictions", preds,
                     "--dataset", data, "--ap-mode", "eleven"]) == 2


class TestLogging:
    def test_env_var_levels(self, monkeypatch):
        import importlib
        import logging
        from boxteach import cli as cli_mod
        for value, expected in (("debug", logging.DEBUG), ("error", logging.ERROR),
                                ("nonsense", logging.INFO)):
            monkeypatch.setenv("IOUMATCH_LOG", value)
            logging.getLogger().handlers.clear()
            cli_mod.setup_logging()
            assert logging.getLogger().level == expected


class TestDiag:
    def test_iou_oracle(self, capsys):
        assert main(["diag", "iou-oracle", "-n", "5", "--samples", "200000"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_grad_check(self, capsys):
        assert main(["diag", "grad-check", "-n", "5"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_lhs_check(self, capsys):
        assert main(["diag", "lhs-check", "-n", "30"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_diag_deterministic_output(self, capsys):
        main(["diag", "lhs-check", "-n", "10"])
        first = capsys.readouterr().out
        main(["diag", "lhs-check", "-n", "10"])
        assert capsys.readouterr().out == first
