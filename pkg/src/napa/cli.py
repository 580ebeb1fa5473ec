"""Command line front end: dataset synthesis, bone-map rendering, stylization,
stage training, and PCKh evaluation with optional model ensembling.

Every command takes long-form flags only, honors --seed where randomness is
involved, and drops a metadata sidecar (run.meta.json) naming its inputs and
the sha256 of its effective configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .bonemap import BoneMapSpec, render_hard, soft_to_uint8, write_png
from .data import (load_image, load_manifest, preprocess, scale_keypoints,
                   synth_dataset, synth_styles)
from .nets import depth_forward, pose_forward, stylize
from .skeleton import (PCKH_GROUPS, KinematicChain, Pose2D, Pose3D,
                       SkeletonError, mpjpe, pckh)
from .training import (StageConfig, nets_from_checkpoint, run_stage,
                       train_data_from_manifest)

ROW_ORDER = tuple(PCKH_GROUPS.keys()) + ("total",)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SPEC_FILENAME = "bonemap_spec.json"


def config_hash(config: dict) -> str:
    """sha256 over the canonical JSON encoding of a configuration mapping."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def write_sidecar(target, command: str, inputs: dict, config: dict) -> Path:
    """Record what a command consumed and how it was configured.

    Directories get a run.meta.json inside; plain files get a sibling
    <name>.meta.json. No timestamps, so repeated runs stay byte-identical.
    """
    target = Path(target)
    if target.is_dir():
        path = target / "run.meta.json"
    else:
        path = target.with_name(target.name + ".meta.json")

    def leaf(v):
        if isinstance(v, (list, tuple)):
            return [str(x) for x in v]
        return str(v)

    payload = {
        "command": command,
        "inputs": {k: leaf(v) for k, v in sorted(inputs.items())},
        "config": config,
        "config_hash": config_hash(config),
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


@dataclass
class EvalReport:
    """Joint-group PCKh table plus the per-sample distances behind it.

    rows holds one percentage per group (ankle, knee, wrist, elbow, shoulder,
    head, hip) and the total over every visible joint; counts holds the
    correct/counted integers the percentages reduce to; samples keeps each
    record's per-joint pixel distances, visibility, and head size so the
    whole table can be recomputed from the report alone.
    """
    threshold: float
    rows: dict
    counts: dict
    samples: list
    metadata: dict = field(default_factory=dict)
    mpjpe_px: float | None = None
    pa_mpjpe_px: float | None = None

    def to_dict(self) -> dict:
        d = {
            "threshold": self.threshold,
            "rows": {k: self.rows[k] for k in ROW_ORDER},
            "counts": self.counts,
            "samples": self.samples,
            "metadata": self.metadata,
        }
        if self.mpjpe_px is not None:
            d["mpjpe_px"] = self.mpjpe_px
        if self.pa_mpjpe_px is not None:
            d["pa_mpjpe_px"] = self.pa_mpjpe_px
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(threshold=d["threshold"], rows=d["rows"], counts=d["counts"],
                   samples=d["samples"], metadata=d.get("metadata", {}),
                   mpjpe_px=d.get("mpjpe_px"), pa_mpjpe_px=d.get("pa_mpjpe_px"))

    def text_table(self) -> str:
        """Fixed-width table, one row per joint group plus the total."""
        header = f"PCKh@{self.threshold:g} (%)"
        name_w = max(len("Joint"), max(len(n.capitalize()) for n in ROW_ORDER))
        lines = [
            f"{'Joint':<{name_w}}  {header}",
            f"{'-' * name_w}  {'-' * len(header)}",
        ]
        for name in ROW_ORDER:
            lines.append(
                f"{name.capitalize():<{name_w}}  {self.rows[name]:>{len(header)}.1f}")
        if self.mpjpe_px is not None:
            lines.append("")
            lines.append(f"MPJPE (px):    {self.mpjpe_px:.3f}")
            if self.pa_mpjpe_px is not None:
                lines.append(f"PA-MPJPE (px): {self.pa_mpjpe_px:.3f}")
        return "\n".join(lines)


def score_predictions(records, predictions, threshold: float = 0.25,
                      chain: KinematicChain | None = None,
                      metadata: dict | None = None) -> EvalReport:
    """PCKh report for per-record predicted 2D joints, in label pixel space.

    predictions holds one (J, 2) array per manifest record, aligned by index.
    Group and total counts accumulate over the whole set; every record must
    carry a head box.
    """
    chain = chain or KinematicChain.default()
    if len(predictions) != len(records):
        raise SkeletonError("need exactly one prediction per record")
    counts = {name: {"correct": 0, "counted": 0} for name in PCKH_GROUPS}
    total_correct = 0
    total_counted = 0
    samples = []
    for rec, coords in zip(records, predictions):
        if rec.head_size is None:
            raise SkeletonError(f"record {rec.image_id} lacks a head box")
        gt = rec.pose2d()
        pred = Pose2D(np.asarray(coords, dtype=np.float64), gt.visibility.copy())
        res = pckh(pred, gt, rec.head_size, threshold, chain)
        for name, g in res.groups.items():
            counts[name]["correct"] += g["correct"]
            counts[name]["counted"] += g["counted"]
        total_correct += res.total_correct
        total_counted += res.total_counted
        dist = np.linalg.norm(pred.coords - gt.coords, axis=1)
        samples.append({
            "image_id": rec.image_id,
            "head_size": rec.head_size,
            "distances": [float(d) for d in dist],
            "visible": [bool(v) for v in gt.visibility],
        })
    rows = {}
    for name, c in counts.items():
        rows[name] = 100.0 * c["correct"] / c["counted"] if c["counted"] else 0.0
    rows["total"] = (100.0 * total_correct / total_counted
                     if total_counted else 0.0)
    counts["total"] = {"correct": total_correct, "counted": total_counted}
    return EvalReport(threshold=float(threshold), rows=rows, counts=counts,
                      samples=samples, metadata=dict(metadata or {}))


def average_predictions(per_model: list) -> list:
    """Coordinate mean across models, per record and joint.

    Fusion happens on raw 2D coordinates, before any thresholding, so
    symmetric errors cancel exactly.
    """
    if not per_model:
        raise SkeletonError("no predictions to average")
    n_records = len(per_model[0])
    if any(len(p) != n_records for p in per_model):
        raise SkeletonError("models predicted differing record counts")
    return [np.mean([np.asarray(m[i], dtype=np.float64) for m in per_model],
                    axis=0)
            for i in range(n_records)]


def _predict_records(nets: dict, records, base_dir: Path, chain):
    """Per-record 2D predictions in each record's own pixel space.

    Returns (scaled, raw): raw keeps the network-input-pixel coordinates the
    depth branch consumes.
    """
    pose_net = nets.get("pose2d")
    if pose_net is None:
        raise SkeletonError("checkpoint holds no 2D pose net")
    size = pose_net.config.input_size
    scaled, raw = [], []
    for rec in records:
        img = load_image(base_dir / rec.image_path)
        orig = rec.image_size or (img.shape[2], img.shape[1])
        with torch.no_grad():
            _, coords = pose_forward(pose_net, preprocess(img, size))
        net_coords = coords.numpy()
        raw.append(net_coords)
        scaled.append(scale_keypoints(net_coords, (size, size), orig))
    return scaled, raw


def _metrics_3d(nets: dict, meta: dict, records, raw_coords, chain,
                spec: BoneMapSpec):
    """Mean MPJPE and PA-MPJPE in network input pixels, or (None, None).

    Runs only when the checkpoint has a depth net with stored bone statistics
    and every record carries depth labels.
    """
    if "depth" not in nets or "bone_mean" not in meta:
        return None, None
    if not all(r.depth_rel is not None for r in records):
        return None, None
    size = nets["pose2d"].config.input_size
    mean = np.asarray(meta["bone_mean"], dtype=np.float64)
    std = np.asarray(meta["bone_std"], dtype=np.float64)
    errs, errs_pa = [], []
    for rec, coords in zip(records, raw_coords):
        pose = Pose2D.all_visible(coords)
        bmap = render_hard(pose, chain, spec, size, size)
        bmap = bmap.astype(np.float32).transpose(2, 0, 1) / 255.0
        with torch.no_grad():
            _, pose3d = depth_forward(nets["depth"], bmap, coords, mean, std,
                                      chain)
        orig = rec.image_size or (size, size)
        factor = size / float(orig[0])
        kp = scale_keypoints(rec.keypoints_2d[:, :2], orig, (size, size))
        gt3 = Pose3D(np.concatenate([kp, (rec.depth_rel * factor)[:, None]],
                                    axis=1))
        errs.append(mpjpe(pose3d, gt3, align=False))
        errs_pa.append(mpjpe(pose3d, gt3, align=True, allow_scale=True))
    return float(np.mean(errs)), float(np.mean(errs_pa))


def _load_spec(path) -> BoneMapSpec:
    if path is None:
        return BoneMapSpec()
    p = Path(path)
    if not p.is_file():
        raise SkeletonError(f"bone map config not found: {p}")
    return BoneMapSpec.from_json(p.read_text())


def _spec_near_manifest(manifest: Path, explicit) -> BoneMapSpec:
    """Explicit --config wins; otherwise pick up the spec the dataset was
    rendered with, if it sits next to the manifest; otherwise defaults."""
    if explicit:
        return _load_spec(explicit)
    sibling = manifest.parent / SPEC_FILENAME
    if sibling.is_file():
        return _load_spec(sibling)
    return BoneMapSpec()


def _input_images(path) -> list:
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir()
                       if f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise SkeletonError(f"no images under {p}")
        return files
    if p.is_file():
        return [p]
    raise SkeletonError(f"input not found: {p}")


def _emit_report(report: EvalReport, out, command: str, inputs: dict) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    table = report.text_table()
    (out / "report.txt").write_text(table + "\n")
    write_sidecar(out, command, inputs=inputs,
                  config={"threshold": report.threshold,
                          "metadata": report.metadata})
    print(table)


def cmd_synth(args) -> int:
    spec = _load_spec(args.config)
    out = Path(args.out)
    manifest = synth_dataset(args.count, args.seed, spec, out, size=args.size)
    (out / SPEC_FILENAME).write_text(spec.to_json())
    if args.styles:
        synth_styles(args.styles, args.seed, out / "styles", size=args.size)
    write_sidecar(out, "synth",
                  inputs={"out": out, "manifest": manifest},
                  config={"count": args.count, "seed": args.seed,
                          "size": args.size, "styles": args.styles,
                          "spec": json.loads(spec.to_json())})
    print(manifest)
    return 0


def cmd_render_bonemap(args) -> int:
    manifest = Path(args.manifest)
    records = load_manifest(manifest)
    spec = _spec_near_manifest(manifest, args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chain = KinematicChain.default()
    for rec in records:
        if rec.image_size is not None:
            w, h = rec.image_size
        else:
            img = load_image(manifest.parent / rec.image_path)
            h, w = img.shape[1], img.shape[2]
        image = render_hard(rec.pose2d(), chain, spec, h, w)
        write_png(out / f"{rec.image_id}.png", image)
    write_sidecar(out, "render-bonemap",
                  inputs={"manifest": manifest, "out": out},
                  config={"spec": json.loads(spec.to_json()),
                          "count": len(records)})
    print(out)
    return 0


def cmd_stylize(args) -> int:
    ckpt = Path(args.checkpoint)
    if args.style and (ckpt / args.style / "metadata.json").is_file():
        ckpt = ckpt / args.style
    meta, nets = nets_from_checkpoint(ckpt)
    net = nets.get("stylizer")
    if net is None:
        raise SkeletonError(f"checkpoint {ckpt} holds no stylizer")
    net.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _input_images(args.input)
    for f in files:
        img = preprocess(load_image(f), net.config.input_size)
        with torch.no_grad():
            result = stylize(net, img)
        write_png(out / f"{f.stem}.png", soft_to_uint8(result))
    write_sidecar(out, "stylize",
                  inputs={"checkpoint": ckpt, "input": args.input, "out": out},
                  config={"seed": args.seed, "style": args.style,
                          "stylizer": meta.get("configs", {}).get("stylizer", {}),
                          "files": [f.name for f in files]})
    print(out)
    return 0


def cmd_train(args) -> int:
    if args.config:
        config = StageConfig.load(args.config)
        if args.stage is not None and args.stage != config.stage:
            raise SkeletonError("--stage and --config disagree on the stage")
    elif args.stage is not None:
        config = StageConfig(stage=args.stage)
    else:
        raise SkeletonError("pass --stage or --config")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if overrides:
        config = replace(config, **overrides)

    styles = _input_images(args.styles)
    data = train_data_from_manifest(args.manifest, styles, size=args.size)
    spec = _spec_near_manifest(Path(args.manifest), None)
    result = run_stage(config, data, args.out, prev_checkpoint=args.prev,
                       spec=spec)
    write_sidecar(Path(args.out), "train",
                  inputs={"manifest": args.manifest, "styles": args.styles,
                          "prev": args.prev or "",
                          "checkpoint": result.checkpoint},
                  config=json.loads(config.to_json()))
    print(result.checkpoint)
    return 0


def cmd_evaluate(args) -> int:
    chain = KinematicChain.default()
    manifest = Path(args.manifest)
    records = load_manifest(manifest)
    meta, nets = nets_from_checkpoint(Path(args.checkpoint))
    for n in nets.values():
        n.eval()
    preds, raw = _predict_records(nets, records, manifest.parent, chain)
    report = score_predictions(records, preds, args.threshold, chain,
                               metadata={"checkpoint": str(args.checkpoint),
                                         "manifest": str(manifest),
                                         "stage": meta.get("stage")})
    spec = _spec_near_manifest(manifest, args.config)
    report.mpjpe_px, report.pa_mpjpe_px = _metrics_3d(
        nets, meta, records, raw, chain, spec)
    _emit_report(report, args.out, "evaluate",
                 inputs={"checkpoint": args.checkpoint, "manifest": manifest})
    return 0


def cmd_ensemble(args) -> int:
    chain = KinematicChain.default()
    manifest = Path(args.manifest)
    records = load_manifest(manifest)
    per_model = []
    for ckpt in args.checkpoints:
        _, nets = nets_from_checkpoint(Path(ckpt))
        for n in nets.values():
            n.eval()
        preds, _ = _predict_records(nets, records, manifest.parent, chain)
        per_model.append(preds)
    merged = average_predictions(per_model)
    report = score_predictions(
        records, merged, args.threshold, chain,
        metadata={"checkpoints": [str(c) for c in args.checkpoints],
                  "manifest": str(manifest)})
    _emit_report(report, args.out, "ensemble",
                 inputs={"checkpoints": args.checkpoints, "manifest": manifest})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="napa",
        description="Stick-figure pose pipeline: synthesize data, render bone "
                    "maps, stylize images, train stages, and score PCKh.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth",
                       help="render a labeled synthetic stick-figure dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=16, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=224, help="square image side")
    p.add_argument("--styles", type=int, default=0,
                   help="also render this many style textures under styles/")
    p.add_argument("--config", help="bone map rendering settings (JSON file)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("render-bonemap",
                       help="render hard bone maps for every manifest record")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="bone map rendering settings (JSON file); "
                                    f"defaults to {SPEC_FILENAME} next to the "
                                    "manifest when present")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render_bonemap)

    p = sub.add_parser("stylize",
                       help="run a trained stylizer over an image or directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--style", help="pick this per-style sub-checkpoint if the "
                                   "checkpoint directory contains one")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("train", help="optimize one protocol stage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--styles", required=True,
                   help="style image file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, help="stage number (1-4)")
    p.add_argument("--config", help="full stage configuration (JSON file)")
    p.add_argument("--prev", help="previous stage's checkpoint directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override the step budget")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--size", type=int,
                   help="resize training images to this square side")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate",
                       help="score a checkpoint's 2D predictions with PCKh")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.25,
                   help="PCKh threshold as a fraction of head size")
    p.add_argument("--config", help="bone map settings for the depth branch")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble",
                       help="average several checkpoints' 2D predictions, "
                            "then score once")
    p.add_argument("--checkpoints", required=True, nargs="+")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ensemble)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SkeletonError, OSError) as e:
        print(f"napa {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
