"""Command-line interface.

Subcommands: gen-data, train, eval, polar-report, audit, augment-compare.
Runs are configured by a key=value file ('#' comments) plus repeatable
--set key=value overrides; unknown keys are rejected and every command
writes its resolved configuration next to its outputs.  Exit codes:
0 success, 1 usage error, 2 file-format error, 3 audit-threshold breach.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from . import conv, data, formats, net, report, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_AUDIT = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_CONFIG_DEFAULTS = {
    "model.depth": "2",
    "model.channels": "8,8",
    "model.order": "2",
    "model.groups": "2",
    "model.bounds": "",
    "model.classes": "3",
    "model.in_channels": "1",
    "model.r_train": "1",
    "model.r_infer": "4",
    "model.hidden_mode": conv.STEERED_PER_CHANNEL,
    "model.reduction": net.REDUCTION_MAX,
    "train.step_size": "0.05",
    "train.steps": "200",
    "train.batch_size": "0",
    "train.seed": "0",
    "train.momentum": "0.9",
    "train.shuffle": "false",
    "train.freeze": "",
    "data.manifest": "",
    "data.test_manifest": "",
}

_PATH_KEYS = ("data.manifest", "data.test_manifest")


class RunConfig:
    """Resolved key=value settings for training-style commands."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def load(cls, config_path=None, overrides=()):
        values = dict(_CONFIG_DEFAULTS)
        if config_path is not None:
            base = Path(config_path).parent
            for key, value in formats.read_keyvalues(config_path).items():
                if key not in values:
                    raise UsageError(f"unknown config key {key!r}")
                if key in _PATH_KEYS and value:
                    value = str((base / value).resolve())
                values[key] = value
        for item in overrides or ():
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            key, _, value = item.partition("=")
            key = key.strip()
            if key not in values:
                raise UsageError(f"unknown config key {key!r}")
            values[key] = value.strip()
        return cls(values)

    def _int(self, key):
        return int(self.values[key])

    def _float(self, key):
        return float(self.values[key])

    def bounds(self):
        text = self.values["model.bounds"]
        if not text:
            return tuple(net.default_scale_bounds(self._int("model.groups")))
        pairs = []
        for chunk in text.split(","):
            lo, _, hi = chunk.partition(":")
            pairs.append((float(lo), float(hi)))
        if len(pairs) != self._int("model.groups"):
            raise UsageError("model.bounds length disagrees with model.groups")
        return tuple(pairs)

    def model_config(self) -> net.ModelConfig:
        return net.ModelConfig(
            depth=self._int("model.depth"),
            channels=tuple(int(c) for c in self.values["model.channels"].split(",")),
            n_classes=self._int("model.classes"),
            bounds=self.bounds(),
            order=self._int("model.order"),
            in_channels=self._int("model.in_channels"),
            r_train=self._int("model.r_train"),
            r_infer=self._int("model.r_infer"),
            hidden_mode=self.values["model.hidden_mode"],
            reduction=self.values["model.reduction"],
        )

    def train_config(self) -> train.TrainConfig:
        freeze = tuple(f for f in self.values["train.freeze"].split(",") if f)
        return train.TrainConfig(
            step_size=self._float("train.step_size"),
            steps=self._int("train.steps"),
            batch_size=self._int("train.batch_size") or None,
            seed=self._int("train.seed"),
            momentum=self._float("train.momentum"),
            shuffle=self.values["train.shuffle"].lower() in ("1", "true", "yes"),
            freeze=freeze,
        )

    def manifest(self, key="data.manifest") -> Path:
        value = self.values[key]
        if not value:
            raise UsageError(f"config key {key} is required for this command")
        return Path(value)

    def write(self, path) -> None:
        formats.write_keyvalues(path, self.values)


def _write_resolved(out_dir: Path, items: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    formats.write_keyvalues(out_dir / "resolved.cfg", {k: str(v) for k, v in items.items()})


def _load_dataset(manifest_path) -> list[tuple[str, data.LabeledImage]]:
    entries = []
    for image_path, mask_path in formats.load_manifest(manifest_path):
        image = conv.InputImage(formats.load_image(image_path))
        mask = formats.load_mask(mask_path)
        entries.append((image_path.name, data.LabeledImage(image, mask)))
    return sorted(entries, key=lambda item: item[0])


def _margin_for(angle_deg: float, size: int, margin_flag: str) -> int:
    if margin_flag != "auto":
        return int(margin_flag)
    if math.isclose(angle_deg % 90.0, 0.0, abs_tol=1e-9) or math.isclose(
        angle_deg % 90.0, 90.0, abs_tol=1e-9
    ):
        return 0
    return data.rotation_margin(size)


def _evaluate_rows(model, dataset, angles_deg, scales, rotations, reduction, margin_flag):
    """Per-image mIoU rows sorted by (image, angle, scale)."""
    tensors = net.materialize_model(model, rotations=rotations)
    rows = []
    for name, labeled in dataset:
        for angle_deg in angles_deg:
            for scale in scales:
                transformed = data.apply_ood(
                    labeled, data.OODTransform(math.radians(angle_deg), scale)
                )
                pred = net.predict(
                    transformed.image, model, tensors=tensors, reduction=reduction
                )
                margin = _margin_for(angle_deg, transformed.mask.shape[0], margin_flag)
                score = net.mean_iou(
                    pred.label_map, transformed.mask, model.config.n_classes, margin
                )
                rows.append((name, angle_deg, scale, score))
    return rows


def cmd_gen_data(args) -> int:
    spec = data.MosaicSpec(size=args.size, n_classes=args.classes)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for index in range(args.count):
        labeled = data.generate_mosaic(spec, args.seed + index)
        image_name = f"mosaic_{index:04d}.pgm"
        mask_name = f"mask_{index:04d}.pgm"
        formats.save_image(out_dir / image_name, labeled.image.values)
        formats.save_mask(out_dir / mask_name, labeled.mask)
        pairs.append((image_name, mask_name))
    formats.save_manifest(out_dir / "manifest.txt", pairs)
    _write_resolved(
        out_dir,
        {"count": args.count, "size": args.size, "classes": args.classes, "seed": args.seed},
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = [labeled for _, labeled in _load_dataset(cfg.manifest())]
    train_cfg = cfg.train_config()
    model = net.build_model(cfg.model_config(), seed=train_cfg.seed)
    model, trace = train.fit(dataset, model, train_cfg)
    net.save_checkpoint(model, out_dir / "checkpoint")
    train.write_loss_trace(out_dir / "loss.csv", trace)
    cfg.write(out_dir / "resolved.cfg")
    return EXIT_OK


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(chunk) for chunk in text.split(",") if chunk != ""]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated number list, got {text!r}") from exc


def cmd_eval(args) -> int:
    model = net.load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    angles = _parse_float_list(args.angle)
    scales = _parse_float_list(args.scale)
    rows = _evaluate_rows(
        model, dataset, angles, scales, args.rotations, args.reduction, args.margin
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    aggregate = float(np.mean([row[3] for row in rows])) if rows else 0.0
    report.write_csv(
        out_dir / "report.csv",
        ["image", "angle_deg", "scale", "miou"],
        list(rows) + [("mean", "", "", aggregate)],
    )
    _write_resolved(
        out_dir,
        {
            "checkpoint": args.checkpoint,
            "data": args.data,
            "rotations": args.rotations,
            "reduction": args.reduction,
            "angle": args.angle,
            "scale": args.scale,
            "margin": args.margin,
        },
    )
    return EXIT_OK


def cmd_polar_report(args) -> int:
    model = net.load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    angles = [360.0 * i / args.angles for i in range(args.angles)]
    scales = _parse_float_list(args.scales)
    per_image = _evaluate_rows(
        model, dataset, angles, scales, args.rotations, args.reduction, args.margin
    )
    rows = []
    for angle_deg in angles:
        for scale in scales:
            scores = [r[3] for r in per_image if r[1] == angle_deg and r[2] == scale]
            rows.append((angle_deg, scale, float(np.mean(scores))))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_dir / "polar.csv", ["angle_deg", "scale", "miou"], rows)
    report.polar_figure(rows, scales, out_dir / "polar.svg")
    _write_resolved(
        out_dir,
        {
            "checkpoint": args.checkpoint,
            "data": args.data,
            "angles": args.angles,
            "scales": args.scales,
            "rotations": args.rotations,
            "reduction": args.reduction,
            "margin": args.margin,
        },
    )
    return EXIT_OK


def _load_tensor_dir(path, model) -> list[list]:
    tensors = []
    for layer in range(1, model.config.depth + 1):
        row = []
        for group in range(model.config.n_groups):
            values = formats.load_tensor(Path(path) / f"layer{layer:02d}.group{group:02d}.ten1")
            row.append(net.FilterTensor(values, float("nan"), np.array([])))
        tensors.append(row)
    return tensors


def cmd_audit(args) -> int:
    if args.random_model:
        config = net.ModelConfig(
            depth=3,
            channels=(4, 5, 5),
            n_classes=3,
            bounds=net.default_scale_bounds(2),
            r_infer=8,
        )
        model = net.build_model(config, seed=args.seed)
    elif args.checkpoint:
        model = net.load_checkpoint(args.checkpoint)
    else:
        raise UsageError("audit needs --checkpoint or --random-model")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensor_dir = out_dir / "tensors"
    tensor_dir.mkdir(exist_ok=True)
    if args.tensors:
        tensors = _load_tensor_dir(args.tensors, model)
    else:
        tensors = net.materialize_model(model, rotations=4)
    for layer, row in enumerate(tensors, 1):
        for group, tensor in enumerate(row):
            formats.save_tensor(tensor_dir / f"layer{layer:02d}.group{group:02d}.ten1", tensor.values)
    checks = audit_mod.run_audit(model, tensors=tensors, seed=args.seed)
    lines = audit_mod.report_lines(checks)
    (out_dir / "audit.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    report.write_csv(
        out_dir / "audit.csv",
        ["check", "residual", "threshold", "pass"],
        [(c.name, c.residual, c.threshold, str(c.passed).lower()) for c in checks],
    )
    _write_resolved(
        out_dir,
        {
            "checkpoint": args.checkpoint or "",
            "random_model": args.random_model,
            "tensors": args.tensors or "",
            "seed": args.seed,
        },
    )
    print("\n".join(lines))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_AUDIT


def _augmented_copies(labeled: data.LabeledImage) -> list[data.LabeledImage]:
    copies = [labeled]
    for turns in (1, 2, 3):
        copies.append(
            data.LabeledImage(
                conv.InputImage(data.quarter_turn(labeled.image.values, turns)),
                data.quarter_turn(labeled.mask, turns),
            )
        )
    return copies


def cmd_augment_compare(args) -> int:
    cfg = RunConfig.load(args.config, args.set)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = [labeled for _, labeled in _load_dataset(cfg.manifest())]
    test_set = _load_dataset(cfg.manifest("data.test_manifest"))
    train_cfg = cfg.train_config()
    model_cfg = cfg.model_config()

    plain = net.build_model(model_cfg, seed=train_cfg.seed)
    plain, _ = train.fit(train_set, plain, train_cfg)
    augmented_set = [copy for labeled in train_set for copy in _augmented_copies(labeled)]
    augmented = net.build_model(model_cfg, seed=train_cfg.seed)
    augmented, _ = train.fit(augmented_set, augmented, train_cfg)

    rows = []
    for label, model in (("no", plain), ("yes", augmented)):
        for rotations in (1, 4):
            per_image = _evaluate_rows(
                model, test_set, [90.0], [1.0], rotations, model_cfg.reduction, "auto"
            )
            rows.append((label, rotations, float(np.mean([r[3] for r in per_image]))))
    report.write_csv(out_dir / "comparison.csv", ["augmented", "r_infer", "mean_miou"], rows)
    cfg.write(out_dir / "resolved.cfg")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rotoscale", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a texture-mosaic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under rotation/scale transforms")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--R", dest="rotations", type=int, default=4)
    p.add_argument("--reduction", choices=net.REDUCTIONS, default=net.REDUCTION_MAX)
    p.add_argument("--angle", default="0", help="comma list of angles in degrees")
    p.add_argument("--scale", default="1", help="comma list of scale factors")
    p.add_argument("--margin", default="auto", help="'auto' or border pixels to exclude")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("polar-report", help="mIoU sweep over angles and scales, CSV + SVG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--angles", type=int, required=True, help="number of evenly spaced angles")
    p.add_argument("--scales", default="0.5,1,1.5,2", help="comma list of scale factors")
    p.add_argument("--R", dest="rotations", type=int, default=8)
    p.add_argument("--reduction", choices=net.REDUCTIONS, default=net.REDUCTION_UNIFIED)
    p.add_argument("--margin", default="auto")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_polar_report)

    p = sub.add_parser("audit", help="equivariance audit report")
    p.add_argument("--checkpoint")
    p.add_argument("--random-model", action="store_true")
    p.add_argument("--tensors", help="directory of materialized filter tensors to audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser(
        "augment-compare", help="train with/without 4-fold rotation augmentation and compare"
    )
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_augment_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except formats.FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
