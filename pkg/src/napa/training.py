"""Staged optimization of the stylization and pose networks.

Stage 1 fits the stylizer (and, unless frozen, the perceptual feature
extractor) against a style pool. Stage 2 warms up the 2D and depth
regressors on stylized inputs with the stylizer fixed. Stage 3 unfreezes the
stylizer and trains it jointly with both regressors while the feature
extractor stays fixed. Stage 4 adds the reconstruction branch: a second
stylizer initialized from the first, plus its own feature extractor, closing
the loop from predicted keypoints back to the stylized image.

Each stage writes a JSONL loss log (one record per step, every weighted term
included) and a checkpoint bundle; frozen nets are hash-checked so a stage
can never silently mutate weights it does not own.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bonemap import BoneMapSpec, render_hard, render_soft
from .data import load_image, load_manifest, preprocess, scale_keypoints
from .losses import (
    FeatureExtractor,
    LossWeights,
    cent_loss,
    content_loss,
    cos_feature_loss,
    cos_sup_loss,
    feat_loss,
    feat_sup_loss,
    hsv_loss,
    integral_2d_loss,
    depth_loss,
    sent_loss,
    srgb_loss,
    style_loss,
    style_sup_loss,
    total_loss,
    tv_loss,
)
from .nets import (
    DepthNet,
    DepthNetConfig,
    PoseNet,
    PoseNetConfig,
    TransformNet,
    TransformNetConfig,
    config_to_dict,
    load_bundle,
    pose_forward,
    reconstruct,
    save_bundle,
    stylize,
)
from .skeleton import (
    KinematicChain,
    Pose2D,
    Pose3D,
    SkeletonError,
    bone_vectors,
    standardize_bones,
)

# Net roles. The reconstruction branch (reconstructor + loss_net_sup) only
# exists from stage 4 on; earlier stages list it frozen, vacuously.
CORE_NETS = ("stylizer", "pose2d", "depth", "loss_net")
SUP_NETS = ("reconstructor", "loss_net_sup")

# Loss terms that compare the stylization against the style image.
STYLE_SIDE_TERMS = ("style", "sent", "srgb", "hsv")

DEFAULT_BATCH = {1: 2, 2: 3, 3: 3, 4: 22}


def stage_sets(stage: int, freeze_loss_net: bool = False):
    """(trainable, frozen) net-role names for one protocol stage.

    The feature extractor is tunable in stage 1 by default; pass
    freeze_loss_net=True for the conventional fixed-perceptual-loss setup.
    """
    if stage == 1:
        trainable = ["stylizer", "loss_net"]
        frozen = ["pose2d", "depth", "reconstructor"]
        if freeze_loss_net:
            trainable.remove("loss_net")
            frozen.append("loss_net")
    elif stage == 2:
        trainable = ["pose2d", "depth"]
        frozen = ["stylizer", "loss_net", "reconstructor"]
    elif stage == 3:
        trainable = ["stylizer", "pose2d", "depth"]
        frozen = ["loss_net"]
    elif stage == 4:
        trainable = ["stylizer", "pose2d", "depth",
                     "reconstructor", "loss_net_sup"]
        frozen = ["loss_net"]
    else:
        raise SkeletonError("stage must be one of 1, 2, 3, 4")
    return tuple(trainable), tuple(frozen)


@dataclass
class StageConfig:
    """One stage of the protocol: membership sets plus optimizer settings."""
    stage: int
    batch_size: int | None = None  # None -> per-stage preset
    max_steps: int = 200
    lr: float = 1e-4
    weight_decay: float = 1e-5
    momentum: float = 0.9
    plateau_patience: int = 200
    plateau_factor: float = 0.5
    real_fraction: float = 0.0  # chance a pose-net slot sees the original image
    seed: int = 0
    freeze_loss_net: bool = False
    trainable: tuple = ()
    frozen: tuple = ()

    def __post_init__(self):
        want_t, want_f = stage_sets(self.stage, self.freeze_loss_net)
        if not self.trainable and not self.frozen:
            self.trainable, self.frozen = want_t, want_f
        self.trainable = tuple(self.trainable)
        self.frozen = tuple(self.frozen)
        if set(self.trainable) & set(self.frozen):
            raise SkeletonError("trainable and frozen sets must be disjoint")
        if set(self.trainable) != set(want_t) or set(self.frozen) != set(want_f):
            raise SkeletonError(
                f"stage {self.stage} requires trainable {sorted(want_t)} "
                f"and frozen {sorted(want_f)}")
        if self.batch_size is None:
            self.batch_size = DEFAULT_BATCH[self.stage]
        if self.batch_size < 1:
            raise SkeletonError("batch_size must be >= 1")
        if self.max_steps < 1:
            raise SkeletonError("max_steps must be >= 1")
        if not 0.0 <= self.real_fraction <= 1.0:
            raise SkeletonError("real_fraction must lie in [0, 1]")
        if self.lr <= 0 or self.plateau_patience < 1 or not 0 < self.plateau_factor <= 1:
            raise SkeletonError("invalid optimizer settings")

    def to_json(self) -> str:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        d["frozen"] = list(self.frozen)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StageConfig":
        d = json.loads(text)
        d["trainable"] = tuple(d.get("trainable", ()))
        d["frozen"] = tuple(d.get("frozen", ()))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "StageConfig":
        return cls.from_json(Path(path).read_text())


@dataclass
class MixPolicy:
    """Per-slot chance that a training batch slot uses the original image."""
    real_fraction: float
    seed: int = 0
    _rng: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.real_fraction <= 1.0:
            raise SkeletonError("real_fraction must lie in [0, 1]")
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)


def mix_batch(real_pool, stylized_pool, policy: MixPolicy, batch_size: int,
              rng: np.random.Generator | None = None):
    """Draw a batch mixing the two pools.

    Each slot is independently real with probability policy.real_fraction,
    stylized otherwise, then filled with a uniform draw from the chosen
    pool. Returns (items, real_mask). Reproducible under the policy seed.
    """
    if batch_size < 1:
        raise SkeletonError("batch_size must be >= 1")
    if policy.real_fraction > 0.0 and len(real_pool) == 0:
        raise SkeletonError("real pool is empty but real_fraction > 0")
    if policy.real_fraction < 1.0 and len(stylized_pool) == 0:
        raise SkeletonError("stylized pool is empty but real_fraction < 1")
    rng = rng if rng is not None else policy._rng
    mask = rng.random(batch_size) < policy.real_fraction
    items = []
    for use_real in mask:
        pool = real_pool if use_real else stylized_pool
        items.append(pool[int(rng.integers(0, len(pool)))])
    return items, mask


def bone_stats(poses, chain: KinematicChain | None = None,
               min_std: float = 1e-6):
    """Elementwise (mean, std) of bone vectors over a pose collection.

    The std is floored at min_std so standardization stays well defined for
    components with no variance (the pelvis-pinned z of root bones, say).
    """
    chain = chain or KinematicChain.default()
    if len(poses) == 0:
        raise SkeletonError("bone_stats needs at least one pose")
    vecs = []
    for p in poses:
        pose = p if isinstance(p, Pose3D) else Pose3D(np.asarray(p))
        vecs.append(bone_vectors(pose, chain).vectors)
    stacked = np.stack(vecs)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), min_std)
    return mean, std


@dataclass
class TrainData:
    """In-memory training set: person images, style pool, optional labels."""
    images: list
    styles: list
    keypoints: list | None = None  # per image: (J, 3) array of (u, v, visible)
    depths: list | None = None     # per image: (J,) pelvis-relative depths

    def __post_init__(self):
        self.images = [self._tensor(i) for i in self.images]
        self.styles = [self._tensor(s) for s in self.styles]
        if not self.images:
            raise SkeletonError("training data needs at least one image")
        if not self.styles:
            raise SkeletonError("training data needs at least one style image")
        shape = self.images[0].shape
        for t in self.images + self.styles:
            if t.shape != shape:
                raise SkeletonError("all images and styles must share one shape")
        if len(shape) != 3 or shape[0] != 3 or shape[1] != shape[2]:
            raise SkeletonError(f"expected square (3, S, S) images, got {tuple(shape)}")
        if self.keypoints is not None:
            if len(self.keypoints) != len(self.images):
                raise SkeletonError("keypoints and images must align one to one")
            self.keypoints = [np.asarray(k, dtype=np.float64) for k in self.keypoints]
        if self.depths is not None:
            if len(self.depths) != len(self.images):
                raise SkeletonError("depths and images must align one to one")
            self.depths = [np.asarray(d, dtype=np.float64) for d in self.depths]

    @staticmethod
    def _tensor(image):
        if torch.is_tensor(image):
            return image.float()
        return torch.from_numpy(np.asarray(image)).float()

    @property
    def size(self) -> int:
        return int(self.images[0].shape[-1])


def train_data_from_manifest(manifest_path, style_paths,
                             size: int | None = None) -> TrainData:
    """Load a JSONL manifest plus a style list into training tensors.

    Images are resized to `size` (default: keep the first image's size) with
    keypoints and depths rescaled by the same factor.
    """
    records = load_manifest(manifest_path)
    if not records:
        raise SkeletonError("manifest holds no samples")
    base = Path(manifest_path).parent
    first = load_image(base / records[0].image_path)
    size = size if size is not None else int(first.shape[-1])
    images, kps, depths = [], [], []
    all_depth = all(r.depth_rel is not None for r in records)
    for rec in records:
        raw = load_image(base / rec.image_path)
        from_size = (raw.shape[2], raw.shape[1])
        images.append(preprocess(raw, size))
        kp = np.asarray(rec.keypoints_2d, dtype=np.float64).copy()
        kp[:, :2] = scale_keypoints(kp[:, :2], from_size, (size, size))
        kps.append(kp)
        if all_depth:
            depths.append(np.asarray(rec.depth_rel, dtype=np.float64)
                          * (size / from_size[0]))
    styles = [preprocess(load_image(p), size) for p in style_paths]
    return TrainData(images=images, styles=styles, keypoints=kps,
                     depths=depths if all_depth else None)


def param_hash(net: torch.nn.Module) -> str:
    """SHA-256 over the net's state dict (sorted keys, raw tensor bytes)."""
    h = hashlib.sha256()
    state = net.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(
            state[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def default_net_configs(size: int, seed: int = 0) -> dict:
    return {
        "stylizer": TransformNetConfig(input_size=size, seed=seed),
        "pose2d": PoseNetConfig(input_size=size, heatmap_size=size // 4,
                                seed=seed),
        "depth": DepthNetConfig(input_size=size, seed=seed),
    }


def build_nets(size: int, seed: int = 0, configs: dict | None = None) -> dict:
    """Fresh core nets keyed by role."""
    cfg = configs or default_net_configs(size, seed)
    return {
        "stylizer": TransformNet(cfg["stylizer"]),
        "pose2d": PoseNet(cfg["pose2d"]),
        "depth": DepthNet(cfg["depth"]),
        "loss_net": FeatureExtractor(seed=seed),
    }


def _net_meta(nets: dict) -> dict:
    out = {}
    for name, net in nets.items():
        if isinstance(net, FeatureExtractor):
            out[name] = {"kind": "feature", "seed": net.seed}
        elif isinstance(net, TransformNet):
            out[name] = {"kind": "transform", **config_to_dict(net.config)}
        elif isinstance(net, PoseNet):
            out[name] = {"kind": "pose", **config_to_dict(net.config)}
        elif isinstance(net, DepthNet):
            out[name] = {"kind": "depth", **config_to_dict(net.config)}
        else:
            raise SkeletonError(f"cannot serialize net role '{name}'")
    return out


_NET_CLASSES = {
    "transform": (TransformNet, TransformNetConfig),
    "pose": (PoseNet, PoseNetConfig),
    "depth": (DepthNet, DepthNetConfig),
}


def nets_from_checkpoint(path):
    """(metadata, {role: net}) rebuilt from a checkpoint bundle."""
    meta, states = load_bundle(path)
    nets = {}
    for name, desc in meta.get("configs", {}).items():
        desc = dict(desc)
        kind = desc.pop("kind")
        if kind == "feature":
            net = FeatureExtractor(seed=desc.get("seed", 0))
        else:
            net_cls, cfg_cls = _NET_CLASSES[kind]
            net = net_cls(cfg_cls(**desc))
        net.load_state_dict(states[name])
        nets[name] = net
    return meta, nets


def _style_terms(out, content, style_batch, extractor: FeatureExtractor) -> dict:
    return {
        "style": style_loss(out, style_batch, extractor),
        "content": content_loss(out, content, extractor),
        "feat": feat_loss(out, content, extractor),
        "tv": tv_loss(out),
        "sent": sent_loss(out, style_batch, extractor),
        "cent": cent_loss(out, content, extractor),
        "srgb": srgb_loss(out, style_batch),
        "hsv": hsv_loss(out, style_batch),
        "cos": cos_feature_loss(out, content, extractor),
    }


@dataclass
class StageResult:
    checkpoint: Path
    log: Path
    steps: int
    final_total: float


def run_stage(config: StageConfig, data: TrainData, out_dir, *,
              prev_checkpoint=None, nets: dict | None = None,
              weights: LossWeights | None = None,
              net_configs: dict | None = None,
              chain: KinematicChain | None = None,
              spec: BoneMapSpec | None = None,
              step_callback=None) -> StageResult:
    """Optimize one protocol stage; write a checkpoint and a JSONL loss log.

    Stages past the first refuse to run without the previous stage's
    checkpoint (pass prev_checkpoint, or hand the loaded nets in directly
    alongside it). Frozen nets are hash-checked before and after the loop.
    step_callback, when given, receives each log record and may return a
    truthy value to stop early.
    """
    chain = chain or KinematicChain.default()
    spec = spec or BoneMapSpec()
    weights = weights or LossWeights()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    size = data.size

    prev_meta = None
    if config.stage > 1:
        if prev_checkpoint is None:
            raise SkeletonError(
                f"stage {config.stage} requires a stage {config.stage - 1} checkpoint")
        prev_meta, loaded = nets_from_checkpoint(prev_checkpoint)
        found = prev_meta.get("stage")
        if found != config.stage - 1:
            raise SkeletonError(
                f"stage {config.stage} requires a stage {config.stage - 1} "
                f"checkpoint, found stage {found}")
        if nets is None:
            nets = loaded
    nets = dict(nets) if nets is not None else build_nets(size, config.seed,
                                                          net_configs)
    for role in CORE_NETS:
        if role not in nets:
            raise SkeletonError(f"net role '{role}' is missing")

    if config.stage == 4:
        if "reconstructor" not in nets:
            rec = TransformNet(nets["stylizer"].config)
            rec.load_state_dict(nets["stylizer"].state_dict())
            nets["reconstructor"] = rec
        if "loss_net_sup" not in nets:
            sup = FeatureExtractor(seed=nets["loss_net"].seed)
            sup.load_state_dict(nets["loss_net"].state_dict())
            nets["loss_net_sup"] = sup

    trainable = [n for n in config.trainable if n in nets]
    frozen = [n for n in nets if n not in trainable]
    for name, net in nets.items():
        wanted = name in trainable
        net.requires_grad_(wanted)
        # eval() keeps any running statistics of frozen nets untouched
        net.train(wanted)
    pre_hashes = {n: param_hash(nets[n]) for n in frozen}

    params = [p for n in trainable for p in nets[n].parameters()]
    opt = torch.optim.RMSprop(params, lr=config.lr, momentum=config.momentum,
                              weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=config.plateau_factor,
        patience=config.plateau_patience)

    needs_pose = config.stage >= 2
    if needs_pose and data.keypoints is None:
        raise SkeletonError("stages past 1 need keypoint labels")
    use_depth = needs_pose and data.depths is not None
    bone_mean = bone_std = None
    gt_std: list = []
    depth_inputs: list = []
    if use_depth:
        poses3d = [Pose3D(np.column_stack([kp[:, :2], z]))
                   for kp, z in zip(data.keypoints, data.depths)]
        bone_mean, bone_std = bone_stats(poses3d, chain)
        for pose, kp in zip(poses3d, data.keypoints):
            vecs = bone_vectors(pose, chain, bone_mean, bone_std)
            gt_std.append(torch.from_numpy(
                standardize_bones(vecs)).float())
            bm = render_hard(Pose2D.all_visible(kp[:, :2]), chain, spec,
                             size, size)
            depth_inputs.append(
                torch.from_numpy(bm.transpose(2, 0, 1)).float() / 255.0)

    log_path = out_dir / f"stage{config.stage}_log.jsonl"
    steps_run = 0
    final_total = float("nan")
    with log_path.open("w") as log_f:
        for step in range(config.max_steps):
            idx = [int(i) for i in
                   rng.integers(0, len(data.images), size=config.batch_size)]
            batch = torch.stack([data.images[i] for i in idx])
            style = data.styles[int(rng.integers(0, len(data.styles)))]
            style_b = style.unsqueeze(0).expand(len(idx), -1, -1, -1)

            terms = {}
            if config.stage == 1:
                out = stylize(nets["stylizer"], batch)
                terms = _style_terms(out, batch, style_b, nets["loss_net"])
            else:
                if config.stage == 2:
                    # stage-1 stylizations: fixed stylizer, no gradient
                    with torch.no_grad():
                        out = stylize(nets["stylizer"], batch)
                else:
                    out = stylize(nets["stylizer"], batch)
                    terms.update(_style_terms(out, batch, style_b,
                                              nets["loss_net"]))
                mask = rng.random(len(idx)) < config.real_fraction
                pose_in = torch.stack([
                    batch[k] if mask[k] else out[k] for k in range(len(idx))])
                _, coords = pose_forward(nets["pose2d"], pose_in)
                per_sample = []
                for k, i in enumerate(idx):
                    kp = data.keypoints[i]
                    gt = torch.as_tensor(kp[:, :2], dtype=coords.dtype)
                    per_sample.append(
                        integral_2d_loss(coords[k], gt, kp[:, 2] > 0))
                terms["pose_2d"] = torch.stack(per_sample).mean()
                if use_depth:
                    din = torch.stack([depth_inputs[i] for i in idx])
                    pred = nets["depth"](din)
                    target = torch.stack([gt_std[i] for i in idx])
                    terms["depth"] = depth_loss(pred, target.to(pred.dtype))
                if config.stage == 4:
                    maps = torch.stack([
                        render_soft(coords[k], chain, spec, size, size)
                        for k in range(len(idx))])
                    recon = reconstruct(nets["reconstructor"], maps, style_b)
                    sup = nets["loss_net_sup"]
                    terms["style_sup"] = style_sup_loss(recon, out, sup)
                    terms["cos_sup"] = cos_sup_loss(recon, out, sup)
                    terms["feat_sup"] = feat_sup_loss(recon, out, sup)

            total, report = total_loss(terms, weights)
            opt.zero_grad()
            total.backward()
            opt.step()
            sched.step(float(total.detach()))

            record = {
                "step": step,
                "stage": config.stage,
                "lr": opt.param_groups[0]["lr"],
                "total": report["total"],
                "terms": report["terms"],
            }
            if any(n in report["terms"] for n in STYLE_SIDE_TERMS):
                record["style_side"] = sum(
                    report["terms"][n]["weighted"]
                    for n in STYLE_SIDE_TERMS if n in report["terms"])
            log_f.write(json.dumps(record, sort_keys=True) + "\n")
            steps_run = step + 1
            final_total = report["total"]
            if step_callback is not None and step_callback(record):
                break

    for name in frozen:
        if param_hash(nets[name]) != pre_hashes[name]:
            raise SkeletonError(
                f"frozen net '{name}' changed during stage {config.stage}")

    meta = {"stage": config.stage, "seed": config.seed,
            "configs": _net_meta(nets)}
    if bone_mean is not None:
        meta["bone_mean"] = bone_mean.tolist()
        meta["bone_std"] = bone_std.tolist()
    elif prev_meta and "bone_mean" in prev_meta:
        meta["bone_mean"] = prev_meta["bone_mean"]
        meta["bone_std"] = prev_meta["bone_std"]
    ckpt = out_dir / f"stage{config.stage}"
    save_bundle(ckpt, nets, meta)
    return StageResult(checkpoint=ckpt, log=log_path, steps=steps_run,
                       final_total=final_total)


@dataclass
class PerStyleModel:
    style_index: int
    stylizer: TransformNet
    pose2d: PoseNet
    log: Path | None


def train_per_style(styles, data: TrainData, out_dir=None, *,
                    steps: int = 50, lr: float = 1e-3, batch_size: int = 4,
                    seed: int = 0, weights: LossWeights | None = None,
                    extractor: FeatureExtractor | None = None,
                    chain: KinematicChain | None = None) -> list:
    """One independent (stylizer, pose net) pair per style.

    Each style gets its own seed (base + index), its own optimizer state,
    and its own log; no parameters are shared across styles. The stylizer is
    fitted with an adaptive-moment optimizer against a fixed perceptual
    extractor; the pose net is returned freshly initialized with the same
    per-style seed, ready for stage-2 style warm-up.
    """
    weights = weights or LossWeights()
    extractor = extractor or FeatureExtractor(seed=seed)
    extractor.requires_grad_(False)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    size = data.size
    models = []
    for si, style in enumerate(styles):
        style_t = TrainData._tensor(style)
        if style_t.shape != (3, size, size):
            raise SkeletonError(
                f"style {si} must be (3, {size}, {size}), got {tuple(style_t.shape)}")
        torch.manual_seed(seed + si)
        rng = np.random.default_rng(seed + si)
        net = TransformNet(TransformNetConfig(input_size=size, seed=seed + si))
        pose = PoseNet(PoseNetConfig(input_size=size, heatmap_size=size // 4,
                                     seed=seed + si))
        opt = torch.optim.Adam(net.parameters(), lr=lr)
        log_path = out_dir / f"style{si:03d}_log.jsonl" if out_dir else None
        log_f = log_path.open("w") if log_path else None
        try:
            for step in range(steps):
                idx = [int(i) for i in
                       rng.integers(0, len(data.images), size=batch_size)]
                batch = torch.stack([data.images[i] for i in idx])
                style_b = style_t.unsqueeze(0).expand(len(idx), -1, -1, -1)
                out = stylize(net, batch)
                terms = _style_terms(out, batch, style_b, extractor)
                total, report = total_loss(terms, weights)
                opt.zero_grad()
                total.backward()
                opt.step()
                if log_f:
                    log_f.write(json.dumps(
                        {"style": si, "step": step, "total": report["total"],
                         "terms": report["terms"]}, sort_keys=True) + "\n")
        finally:
            if log_f:
                log_f.close()
        models.append(PerStyleModel(si, net, pose, log_path))
    return models
