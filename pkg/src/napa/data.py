"""Manifests, preprocessing, style pool, and the synthetic dataset generator.

Manifests are JSON lines, one sample record per line. Images travel as
(3, H, W) float32 arrays in [0, 1]; uint8 (H, W, 3) is the on-disk form.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .bonemap import BoneMapSpec, render_hard, write_png
from .skeleton import (
    NUM_JOINTS,
    AngleLimitTable,
    KinematicChain,
    Pose2D,
    Pose3D,
    SkeletonError,
    check_angle_limits,
)

DOMAINS = ("real", "art", "stylized")
INPUT_SIZE = 224


@dataclass
class SampleRecord:
    """One annotated sample: image reference plus 2D (and optional 3D) labels."""
    image_id: str
    image_path: str
    keypoints_2d: np.ndarray  # (18, 3): u, v, visible
    depth_rel: np.ndarray | None = None  # (18,), pelvis entry 0
    head_box: tuple | None = None  # (x, y, w, h)
    domain: str = "real"
    style_id: str | None = None
    image_size: tuple | None = None  # (width, height), enables bounds checks

    def __post_init__(self):
        self.keypoints_2d = np.asarray(self.keypoints_2d, dtype=np.float64)
        if self.keypoints_2d.shape != (NUM_JOINTS, 3):
            raise SkeletonError(
                f"keypoints_2d must be ({NUM_JOINTS},3), got {self.keypoints_2d.shape}")
        if self.domain not in DOMAINS:
            raise SkeletonError(f"domain must be one of {DOMAINS}, got '{self.domain}'")
        for j in range(NUM_JOINTS):
            u, v, vis = self.keypoints_2d[j]
            if vis:
                if u < 0 or v < 0:
                    raise SkeletonError(
                        f"visible joint {j} at ({u},{v}) lies outside the image")
                if self.image_size is not None:
                    w, h = self.image_size
                    if u >= w or v >= h:
                        raise SkeletonError(
                            f"visible joint {j} at ({u},{v}) lies outside the image")
        if self.depth_rel is not None:
            self.depth_rel = np.asarray(self.depth_rel, dtype=np.float64)
            if self.depth_rel.shape != (NUM_JOINTS,):
                raise SkeletonError(f"depth_rel must be ({NUM_JOINTS},)")
            if abs(self.depth_rel[0]) > 1e-9:
                raise SkeletonError("pelvis depth must be 0")
        if self.head_box is not None:
            self.head_box = tuple(float(v) for v in self.head_box)
            if len(self.head_box) != 4 or self.head_box[2] <= 0 or self.head_box[3] <= 0:
                raise SkeletonError("head_box must be (x, y, w, h) with w, h > 0")
        if self.image_size is not None:
            self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    @property
    def head_size(self) -> float | None:
        if self.head_box is None:
            return None
        return math.hypot(self.head_box[2], self.head_box[3])

    def pose2d(self) -> Pose2D:
        return Pose2D(self.keypoints_2d[:, :2], self.keypoints_2d[:, 2] > 0.5)

    def to_dict(self) -> dict:
        d = {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "keypoints_2d": self.keypoints_2d.tolist(),
            "domain": self.domain,
        }
        if self.depth_rel is not None:
            d["depth_rel"] = self.depth_rel.tolist()
        if self.head_box is not None:
            d["head_box"] = list(self.head_box)
        if self.style_id is not None:
            d["style_id"] = self.style_id
        if self.image_size is not None:
            d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(
            image_id=d["image_id"],
            image_path=d["image_path"],
            keypoints_2d=np.asarray(d["keypoints_2d"], dtype=np.float64),
            depth_rel=np.asarray(d["depth_rel"], dtype=np.float64)
            if d.get("depth_rel") is not None else None,
            head_box=tuple(d["head_box"]) if d.get("head_box") is not None else None,
            domain=d.get("domain", "real"),
            style_id=d.get("style_id"),
            image_size=tuple(d["image_size"]) if d.get("image_size") is not None else None,
        )


def load_manifest(path) -> list:
    """Parse a JSONL manifest; errors carry 1-based line numbers."""
    path = Path(path)
    if not path.is_file():
        raise SkeletonError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise SkeletonError(f"{path}:{lineno}: malformed JSON: {e}") from None
        try:
            records.append(SampleRecord.from_dict(d))
        except (KeyError, TypeError, ValueError, SkeletonError) as e:
            raise SkeletonError(f"{path}:{lineno}: invalid record: {e}") from None
    return records


def save_manifest(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(r.to_dict()) for r in records]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_image(path) -> np.ndarray:
    """PNG/JPEG file -> (3, H, W) float32 in [0,1]."""
    try:
        with Image.open(Path(path)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as e:
        raise SkeletonError(f"cannot read image {path}: {e}") from None
    return arr.transpose(2, 0, 1)


def preprocess(image, size: int = INPUT_SIZE) -> np.ndarray:
    """Bilinear-resize any image to (3, size, size) float32 in [0, 1].

    Accepts a path, a PIL image, an (H, W, 3) uint8 array, or a (3, H, W)
    float array. Already-conforming inputs pass through unchanged.
    """
    if isinstance(image, (str, Path)):
        image = load_image(image)
    if isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    image = np.asarray(image)
    if image.ndim != 3:
        raise SkeletonError("expected an image with 3 dimensions")
    if image.shape[0] != 3 and image.shape[2] == 3:
        image = image.transpose(2, 0, 1)
        if image.dtype == np.uint8:
            image = image.astype(np.float32) / 255.0
    if image.shape[0] != 3:
        raise SkeletonError(f"cannot interpret image shape {image.shape}")
    image = np.clip(image.astype(np.float32), 0.0, 1.0)
    if image.shape[1] == size and image.shape[2] == size:
        return image
    pil = Image.fromarray(
        (image.transpose(1, 2, 0) * 255.0).round().astype(np.uint8), mode="RGB")
    resized = pil.resize((size, size), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32).transpose(2, 0, 1) / 255.0


def scale_keypoints(coords: np.ndarray, from_size, to_size) -> np.ndarray:
    """Rescale (J, 2) keypoints by the same factors as an image resize."""
    w0, h0 = from_size
    w1, h1 = to_size
    out = np.asarray(coords, dtype=np.float64).copy()
    out[:, 0] *= w1 / w0
    out[:, 1] *= h1 / h0
    return out


@dataclass
class StylePool:
    """Ordered set of style image paths with a seeded sampling stream."""
    paths: list
    seed: int = 0
    _rng: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.paths = [Path(p) for p in self.paths]
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)

    @classmethod
    def from_dir(cls, directory, seed: int = 0) -> "StylePool":
        directory = Path(directory)
        paths = sorted(p for p in directory.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        return cls(paths, seed)

    def __len__(self):
        return len(self.paths)


def sample_style(pool: StylePool, rng: np.random.Generator | None = None):
    """Uniformly draw one style image from the pool; reproducible under seed."""
    if not pool.paths:
        raise SkeletonError("style pool is empty")
    rng = rng if rng is not None else pool._rng
    idx = int(rng.integers(0, len(pool.paths)))
    return load_image(pool.paths[idx]), pool.paths[idx]


def _canonical_pose(chain: KinematicChain) -> np.ndarray:
    """Reference figure in abstract units, y up, pelvis at the origin.

    Knees and elbows are pre-bent 30-35 degrees toward the flexion side of
    the signed-angle convention, so small jitter cannot cross the straight
    (180 degree) boundary of the hinge limit intervals.
    """
    s30, c30 = math.sin(math.radians(30.0)), math.cos(math.radians(30.0))
    base = {
        "pelvis": (0.0, 0.0), "spine": (0.0, 20.0), "thorax": (0.0, 40.0),
        "neck": (0.0, 50.0), "head": (0.0, 58.0), "head_top": (0.0, 66.0),
        "r_hip": (-10.0, 0.0), "l_hip": (10.0, 0.0),
        "r_knee": (-10.0, -40.0), "l_knee": (10.0, -40.0),
        "r_shoulder": (-18.0, 40.0), "l_shoulder": (18.0, 40.0),
    }
    # Flexion side is +x for the right shin, -x for the left.
    base["r_ankle"] = (base["r_knee"][0] + 40.0 * s30,
                       base["r_knee"][1] - 40.0 * c30)
    base["l_ankle"] = (base["l_knee"][0] - 40.0 * s30,
                       base["l_knee"][1] - 40.0 * c30)
    # Upper arms droop 10 degrees below horizontal; forearms bend 35 more.
    for side, sx in (("r", -1.0), ("l", 1.0)):
        shoulder = np.asarray(base[side + "_shoulder"])
        drop = math.radians(10.0)
        bend = math.radians(45.0)
        elbow = shoulder + 22.0 * np.array([sx * math.cos(drop), -math.sin(drop)])
        wrist = elbow + 22.0 * np.array([sx * math.cos(bend), -math.sin(bend)])
        base[side + "_elbow"] = tuple(elbow)
        base[side + "_wrist"] = tuple(wrist)
    return np.array([[*base[n], 0.0] for n in chain.joint_names])


def _random_pose3d(rng: np.random.Generator, size: int,
                   chain: KinematicChain, limits: AngleLimitTable) -> Pose3D:
    """Rejection-sample a jittered figure that satisfies the angle limits and
    fits inside the frame with a margin."""
    canon = _canonical_pose(chain)
    for _ in range(200):
        coords = canon + rng.uniform(-2.5, 2.5, size=canon.shape)
        pose = Pose3D(coords)
        result = check_angle_limits(pose, chain, limits)
        if result.violations or result.indeterminate:
            continue
        # Turn about the vertical axis: foreshortens x and gives the depth
        # labels structure. Joint angles are rotation invariant, so the
        # accepted pose stays within its limits.
        psi = rng.uniform(-0.35, 0.35)
        x = coords[:, 0] * math.cos(psi) + coords[:, 2] * math.sin(psi)
        z = coords[:, 2] * math.cos(psi) - coords[:, 0] * math.sin(psi)
        coords = np.stack([x, coords[:, 1], z], axis=1)
        # Map into the frame: v grows downward, figure occupies ~70% of it.
        span = 170.0
        scale = rng.uniform(0.55, 0.75) * size / span
        cu = size / 2.0 + rng.uniform(-0.05, 0.05) * size
        cv = size / 2.0 + rng.uniform(-0.05, 0.05) * size
        u = cu + coords[:, 0] * scale
        v = cv - coords[:, 1] * scale
        zs = coords[:, 2] * scale
        zs = zs - zs[chain.root]
        margin = 4.0
        if u.min() < margin or u.max() > size - margin:
            continue
        if v.min() < margin or v.max() > size - margin:
            continue
        return Pose3D(np.stack([u, v, zs], axis=1))
    raise SkeletonError("pose sampling failed to satisfy the limits")


def synth_dataset(n: int, seed: int, spec: BoneMapSpec, out_dir,
                  size: int = INPUT_SIZE,
                  chain: KinematicChain | None = None,
                  limits: AngleLimitTable | None = None) -> Path:
    """Render n random stick figures with exact labels; returns manifest path.

    Images are hard bone maps; 2D keypoints, relative depths, and head boxes
    are exact by construction, and every pose satisfies the angle limits.
    The same (n, seed, spec, size) yields byte-identical output.
    """
    chain = chain or KinematicChain.default()
    limits = limits or AngleLimitTable.default(chain)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        pose3d = _random_pose3d(rng, size, chain, limits)
        pose2d = Pose2D.all_visible(pose3d.coords[:, :2])
        image = render_hard(pose2d, chain, spec, size, size)
        name = f"synth_{i:05d}.png"
        write_png(out_dir / name, image)
        head = pose3d.coords[[chain.index("head"), chain.index("head_top")], :2]
        pad = spec.width / 2.0
        x0, y0 = head.min(axis=0) - pad
        x1, y1 = head.max(axis=0) + pad
        kp = np.concatenate([pose2d.coords, np.ones((NUM_JOINTS, 1))], axis=1)
        records.append(SampleRecord(
            image_id=f"synth_{i:05d}",
            image_path=name,
            keypoints_2d=kp,
            depth_rel=pose3d.coords[:, 2] - pose3d.coords[chain.root, 2],
            head_box=(x0, y0, x1 - x0, y1 - y0),
            domain="real",
            image_size=(size, size),
        ))
    manifest = out_dir / "manifest.jsonl"
    save_manifest(records, manifest)
    return manifest


def synth_styles(n: int, seed: int, out_dir, size: int = INPUT_SIZE) -> list:
    """Small seeded texture images usable as a style pool in tests and demos."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        base = rng.uniform(0.0, 1.0, size=(3, 1, 1))
        lo = rng.uniform(2, 6)
        grid_y, grid_x = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (grid_x + grid_y) / (size / lo))
        img = np.clip(base * 0.6 + 0.4 * stripes[None, :, :], 0, 1)
        arr = (img.transpose(1, 2, 0) * 255).round().astype(np.uint8)
        path = out_dir / f"style_{i:03d}.png"
        write_png(path, arr)
        paths.append(path)
    return paths
