"""Command-line entry point: dataset generation, the two training stages,
evaluation, and standalone diagnostic batteries.

One JSON config document can seed every setting; any flag given on the
command line wins over the file. All randomness flows from a single --seed,
with per-purpose substreams derived by fixed labeled hashing, so reruns with
identical flags produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .detector import DetectorConfig
from .eval import map_at, write_pr_curves, write_report
from .geometry import OrientedBox3D, iou3d, iou3d_monte_carlo
from .grid_pool import make_grid, pool, pool_with_jacobian
from .iou_head import IoUHeadConfig, JitterConfig
from .pseudo_label import (Detection, ThresholdConfig, read_detections, suppress)
from .ssl_loop import (AugmentConfig, PretrainConfig, SSLConfig, load_checkpoint,
                       pretrain, save_checkpoint, ssl_train, write_metrics_csv)
from .synth_data import (GeneratorConfig, load_dataset, make_split, write_dataset)

log = logging.getLogger("boxteach")


def setup_logging() -> None:
    level = os.environ.get("IOUMATCH_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "info"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(message)s")


def derive_seed(master: int, tag: str) -> list:
    """Fixed labeled hashing: one master seed, one substream per purpose."""
    return [int(master), zlib.crc32(tag.encode())]


def _reference_pretrain() -> PretrainConfig:
    return PretrainConfig(epochs=200, lr=2e-3, lr_decay_epochs=(140, 180),
                          lr_decay_factor=0.3)


def _reference_ssl() -> SSLConfig:
    # Faster EMA than the 0.999 library default so the teacher tracks the
    # student within a desk-scale step budget.
    return SSLConfig(epochs=100, eval_interval=25, ema_decay=0.99)


@dataclass
class ExperimentConfig:
    """Everything that determines an experiment; JSON round-trip exact.

    The defaults are the reference synthetic benchmark: 200 scenes at 10%
    labels, a 200-epoch supervised stage, and a 100-epoch teacher-student
    stage with the stock filtering and suppression constants.
    """

    seed: int = 42
    n_scenes: int = 200
    label_ratio: float = 0.1
    n_val: int = 30
    eval_thresholds: tuple = (0.25, 0.5)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    pretrain: PretrainConfig = field(default_factory=_reference_pretrain)
    ssl: SSLConfig = field(default_factory=_reference_ssl)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["eval_thresholds"] = list(self.eval_thresholds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        cfg = cls()
        cfg.seed = int(doc.get("seed", cfg.seed))
        cfg.n_scenes = int(doc.get("n_scenes", cfg.n_scenes))
        cfg.label_ratio = float(doc.get("label_ratio", cfg.label_ratio))
        cfg.n_val = int(doc.get("n_val", cfg.n_val))
        cfg.eval_thresholds = tuple(doc.get("eval_thresholds", cfg.eval_thresholds))
        if "generator" in doc:
            cfg.generator = GeneratorConfig.from_dict(doc["generator"])
        if "detector" in doc:
            cfg.detector = _detector_from_dict(doc["detector"])
        if "pretrain" in doc:
            cfg.pretrain = _pretrain_from_dict(doc["pretrain"])
        if "ssl" in doc:
            cfg.ssl = _ssl_from_dict(doc["ssl"])
        return cfg


def _iou_head_from_dict(d: dict) -> IoUHeadConfig:
    return IoUHeadConfig(feature_dim=d["feature_dim"], hidden=d["hidden"],
                         n_classes=d["n_classes"], grid_depth=d["grid_depth"],
                         knn=d["knn"])


def _detector_from_dict(d: dict) -> DetectorConfig:
    return DetectorConfig(feature_dim=d["feature_dim"], n_classes=d["n_classes"],
                          n_proposals=d["n_proposals"], n_neighbors=d["n_neighbors"],
                          hidden=d["hidden"], iou=_iou_head_from_dict(d["iou"]))


def _augment_from_dict(d: dict) -> AugmentConfig:
    return AugmentConfig(n_points=d["n_points"], flip_x_prob=d["flip_x_prob"],
                         flip_y_prob=d["flip_y_prob"], rot_range=d["rot_range"],
                         scale_range=tuple(d["scale_range"]))


def _jitter_from_dict(d: dict) -> JitterConfig:
    return JitterConfig(sigma_factor=d["sigma_factor"],
                        n_jitters_per_box=d["n_jitters_per_box"])


def _thresholds_from_dict(d: dict) -> ThresholdConfig:
    tau_iou = d["tau_iou"]
    if isinstance(tau_iou, dict):
        tau_iou = {int(k): float(v) for k, v in tau_iou.items()}
    return ThresholdConfig(tau_obj=d["tau_obj"], tau_cls=d["tau_cls"], tau_iou=tau_iou)


def _pretrain_from_dict(d: dict) -> PretrainConfig:
    return PretrainConfig(epochs=d["epochs"], lr=d["lr"], batch_size=d["batch_size"],
                          lr_decay_epochs=tuple(d["lr_decay_epochs"]),
                          lr_decay_factor=d["lr_decay_factor"], seed=d["seed"],
                          augment=_augment_from_dict(d["augment"]),
                          jitter=_jitter_from_dict(d["jitter"]))


def _ssl_from_dict(d: dict) -> SSLConfig:
    return SSLConfig(lambda_u=d["lambda_u"], n_labeled=d["n_labeled"],
                     n_unlabeled=d["n_unlabeled"], ema_decay=d["ema_decay"],
                     thresholds=_thresholds_from_dict(d["thresholds"]),
                     suppression_mode=d["suppression_mode"],
                     suppression_iou=d["suppression_iou"],
                     association_radius=d["association_radius"],
                     augment=_augment_from_dict(d["augment"]),
                     jitter=_jitter_from_dict(d["jitter"]),
                     epochs=d["epochs"], lr=d["lr"],
                     lr_decay_epochs=tuple(d["lr_decay_epochs"]),
                     lr_decay_factor=d["lr_decay_factor"],
                     eval_interval=d["eval_interval"],
                     eval_unlabeled_scenes=d["eval_unlabeled_scenes"],
                     seed=d["seed"])


def load_experiment_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def _override(value, flag):
    return value if flag is None else flag


# --- subcommands --------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load_experiment_config(args.config)
    log.info("generating dataset into %s", args.out)
    n_scenes = int(_override(cfg.n_scenes, args.scenes))
    ratio = float(_override(cfg.label_ratio, args.label_ratio))
    n_val = int(_override(cfg.n_val, args.val_scenes))
    seed = int(_override(cfg.seed, args.seed))
    if not 0.0 < ratio <= 1.0:
        raise UsageError("--label-ratio must lie in (0, 1]")
    if n_scenes < 1:
        raise UsageError("--scenes must be >= 1")
    split = make_split(n_scenes, ratio, seed=seed, params=cfg.generator, n_val=n_val)
    write_dataset(split, cfg.generator, args.out)
    print(f"wrote {n_scenes} scenes ({len(split.labeled)} labeled, "
          f"{len(split.unlabeled)} unlabeled) + {n_val} val to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_experiment_config(args.config)
    log.info("pretraining from %s", args.dataset)
    split, _ = load_dataset(args.dataset)
    pcfg = cfg.pretrain
    pcfg.epochs = int(_override(pcfg.epochs, args.epochs))
    pcfg.lr = float(_override(pcfg.lr, args.lr))
    pcfg.seed = int(_override(cfg.seed, args.seed))
    params, history = pretrain(split.labeled, cfg.detector, pcfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "pretrain.json")
    save_checkpoint(ckpt, params, None, None, epoch=pcfg.epochs)
    hist_path = os.path.join(args.out, "pretrain_loss.csv")
    with open(hist_path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, value in enumerate(history):
            fh.write(f"{i},{value!r}\n")
    print(f"pretrained {pcfg.epochs} epochs on {len(split.labeled)} scenes; "
          f"final loss {history[-1]:.4f}; checkpoint {ckpt}")
    return 0


def cmd_ssl(args) -> int:
    cfg = load_experiment_config(args.config)
    log.info("semi-supervised stage from %s", args.dataset)
    split, _ = load_dataset(args.dataset)
    if not os.path.exists(args.pretrained):
        raise UsageError(f"pretrain checkpoint not found: {args.pretrained}")
    pretrained, _, _, _ = load_checkpoint(args.pretrained)
    scfg = cfg.ssl
    scfg.lambda_u = float(_override(scfg.lambda_u, args.lambda_u))
    scfg.epochs = int(_override(scfg.epochs, args.epochs))
    scfg.eval_interval = int(_override(scfg.eval_interval, args.eval_interval))
    scfg.seed = int(_override(cfg.seed, args.seed))
    result = ssl_train(split, pretrained, cfg.detector, scfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "ssl.json")
    save_checkpoint(ckpt, result.student, result.teacher, None, epoch=scfg.epochs)
    metrics_path = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(result.metrics, metrics_path)
    final = result.metrics[-1]
    print(f"ssl done: mAP@0.25 {final['map_0.25']:.3f} "
          f"coverage@0.25 {final['coverage_0.25']:.3f}; wrote {ckpt}")
    return 0


def _gts_for_split(split, which: str) -> dict:
    if which == "val":
        return {s.scene_id: s.labels for s in split.val}
    if which == "labeled":
        return {s.scene_id: s.labels for s in split.labeled}
    if which == "unlabeled":
        return {s.scene_id: split.hidden_gt(s.scene_id) for s in split.unlabeled}
    raise UsageError(f"unknown split {which!r}")


def _parse_ap_mode(text: str):
    if text == "all-point":
        return "all-point", None
    if text.startswith("r") and text[1:].isdigit():
        return "r-point", int(text[1:])
    raise UsageError(f"--ap-mode must be 'all-point' or 'r<N>', got {text!r}")


def cmd_eval(args) -> int:
    cfg = load_experiment_config(args.config)
    log.info("evaluating %s against %s", args.predictions, args.dataset)
    split, _ = load_dataset(args.dataset)
    preds = read_detections(args.predictions)
    gts = _gts_for_split(split, args.split)
    thresholds = [float(t) for t in args.thresholds.split(",")]
    mode, r_points = _parse_ap_mode(args.ap_mode)
    reports = map_at(preds, gts, thresholds, mode=mode,
                     r_points=r_points or 40, score=args.score)
    for rep in reports:
        print(f"mAP@{rep.iou_thresh:g} = {rep.map:.6f} "
              f"({', '.join(f'class {c}: {v:.4f}' for c, v in sorted(rep.per_class_ap.items()))})")
    if args.out:
        write_report(reports, args.out)
        print(f"report written to {args.out}")
    if args.pr_curves:
        write_pr_curves(preds, gts, thresholds[0], args.pr_curves, score=args.score)
        print(f"PR curves written to {args.pr_curves}")
    return 0


# --- diagnostics ---------------------------------------------------------------


def _random_box_pair(rng):
    a = OrientedBox3D(rng.uniform(-1, 1, 3), rng.uniform(0.3, 1.8, 3),
                      rng.uniform(-math.pi, math.pi))
    b = OrientedBox3D(a.center + rng.uniform(-0.6, 0.6, 3),
                      rng.uniform(0.3, 1.8, 3), rng.uniform(-math.pi, math.pi))
    return a, b


def diag_iou_oracle(n: int, seed: int, samples: int) -> tuple:
    rng = np.random.default_rng(derive_seed(seed, "diag-iou"))
    worst = 0.0
    for i in range(n):
        a, b = _random_box_pair(rng)
        err = abs(iou3d(a, b) - iou3d_monte_carlo(a, b, samples, seed=seed + i))
        worst = max(worst, err)
    return worst, worst < 5e-3


def diag_grad_check(n: int, seed: int) -> tuple:
    rng = np.random.default_rng(derive_seed(seed, "diag-grad"))
    worst = 0.0
    checked = 0
    delta = 1e-5
    while checked < n:
        seeds = rng.uniform(-1.5, 1.5, (40, 3))
        feats = rng.normal(0.0, 1.0, (40, 8))
        box = OrientedBox3D(rng.uniform(-0.3, 0.3, 3), rng.uniform(0.5, 1.2, 3),
                            rng.uniform(-math.pi, math.pi))
        grid = make_grid(box, 3)
        d = np.sqrt(((grid[:, None, :] - seeds[None, :, :]) ** 2).sum(-1))
        d.sort(axis=1)
        if np.min(d[:, 3] - d[:, 2]) < 1e-3:
            continue
        _, jac = pool_with_jacobian(box, seeds, feats, depth=3, k=3)
        for axis in range(3):
            dc = np.zeros(3)
            dc[axis] = delta
            plus = pool(OrientedBox3D(box.center + dc, box.size, box.yaw),
                        seeds, feats, 3, 3).features
            minus = pool(OrientedBox3D(box.center - dc, box.size, box.yaw),
                         seeds, feats, 3, 3).features
            fd = (plus - minus) / (2 * delta)
            denom = max(np.linalg.norm(fd), 1e-12)
            worst = max(worst, np.linalg.norm(jac.feat_center[:, :, axis] - fd) / denom)
        checked += 1
    return worst, worst < 1e-4


def diag_lhs_check(n: int, seed: int) -> tuple:
    rng = np.random.default_rng(derive_seed(seed, "diag-lhs"))
    worst = 0
    for _ in range(n):
        dets = []
        clumps = rng.uniform(-3, 3, (3, 3))
        for _ in range(int(rng.integers(1, 13))):
            c = clumps[rng.integers(3)] + rng.normal(0, 0.15, 3)
            probs = rng.dirichlet(np.ones(3) * 0.4)
            dets.append(Detection(
                box=OrientedBox3D(c, rng.uniform(0.6, 1.2, 3),
                                  rng.uniform(-math.pi, math.pi)),
                objectness=float(rng.uniform(0.05, 0.999)), class_probs=probs,
                pred_iou=float(rng.uniform(0.01, 0.99)), anchor=c))
        kept = suppress(dets, "iou-lhs", 0.25)
        # Independent cluster enumeration: linear-scan max over an IoU matrix.
        scores = [d.combined_score for d in dets]
        iou = [[iou3d(x.box, y.box) for y in dets] for x in dets]
        remaining = list(range(len(dets)))
        expected = 0
        while remaining:
            s = remaining[0]
            for j in remaining[1:]:
                if scores[j] > scores[s]:
                    s = j
            members = [j for j in remaining if dets[j].class_id == dets[s].class_id
                       and (j == s or iou[s][j] >= 0.25)]
            for j in members:
                remaining.remove(j)
            expected += math.ceil(len(members) / 2)
        worst = max(worst, abs(len(kept) - expected))
    return worst, worst == 0


def cmd_diag(args) -> int:
    if args.kind == "iou-oracle":
        worst, ok = diag_iou_oracle(args.n, args.seed, args.samples)
        print(f"iou-oracle: max |exact - monte carlo| = {worst:.6f} "
              f"over {args.n} pairs -> {'PASS' if ok else 'FAIL'} (tol 5e-3)")
    elif args.kind == "grad-check":
        worst, ok = diag_grad_check(args.n, args.seed)
        print(f"grad-check: max relative error = {worst:.3e} "
              f"over {args.n} configurations -> {'PASS' if ok else 'FAIL'} (tol 1e-4)")
    elif args.kind == "lhs-check":
        worst, ok = diag_lhs_check(args.n, args.seed)
        print(f"lhs-check: max keep-count deviation = {worst} "
              f"over {args.n} instances -> {'PASS' if ok else 'FAIL'} (exact)")
    else:
        raise UsageError(f"unknown diagnostic {args.kind!r}")
    return 0 if ok else 1


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxteach",
        description="Semi-supervised 3D detection sandbox on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--label-ratio", dest="label_ratio", type=float, default=None)
    p.add_argument("--val-scenes", dest="val_scenes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="supervised pre-training stage")
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("ssl", help="semi-supervised teacher-student stage")
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-u", dest="lambda_u", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--eval-interval", dest="eval_interval", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ssl)

    p = sub.add_parser("eval", help="evaluate a predictions file")
    p.add_argument("--config", default=None)
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="val", choices=("val", "labeled", "unlabeled"))
    p.add_argument("--thresholds", default="0.25,0.5")
    p.add_argument("--ap-mode", dest="ap_mode", default="all-point")
    p.add_argument("--score", default="objectness", choices=("objectness", "combined"))
    p.add_argument("--out", default=None)
    p.add_argument("--pr-curves", dest="pr_curves", default=None,
                   help="dump per-class recall,precision rows at the first threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diag", help="run a diagnostic battery")
    p.add_argument("kind", choices=("iou-oracle", "grad-check", "lhs-check"))
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1_000_000)
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
