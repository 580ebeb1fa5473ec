"""Bone-map rendering: filled ovals per bone, hard and differentiable.

A bone from p1 to p2 covers the elliptical region whose major axis is the
bone segment (semi-axis L/2) and whose minor semi-axis is half the bone
width d. A pixel at point x is inside iff

    q(x) = dist(x, axis line)^2 / (d/2)^2
         + dist(x, perpendicular bisector)^2 / (L/2)^2  <= 1,

boundary inclusive, so both endpoints are always covered. Bones are drawn in
chain order and later bones overwrite earlier ones where they overlap.

The soft renderer replaces the inside test with sigmoid(k * (1 - q)) and
alpha-composites the bones in the same order, which reproduces the hard
layering in the large-k limit while staying differentiable in the joint
coordinates.

Pixel (row y, col x) is sampled at image point (u, v) = (x, y).
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .skeleton import KinematicChain, Pose2D, SkeletonError

DEGENERATE_L2 = 1e-8


def spaced_palette(n: int = 17) -> tuple:
    """n fully saturated colors with evenly spaced hues."""
    colors = []
    for k in range(n):
        r, g, b = colorsys.hsv_to_rgb(k / n, 1.0, 1.0)
        colors.append((round(r * 255), round(g * 255), round(b * 255)))
    return tuple(colors)


@dataclass
class BoneMapSpec:
    """Rendering parameters shared by the hard and soft renderers."""
    width: float = 9.0  # bone width d, pixels
    soft_sharpness: float = 20.0  # k in sigmoid(k * (1 - q))
    palette: tuple = field(default_factory=spaced_palette)  # RGB uint8 per bone
    background: tuple = (0, 0, 0)

    def __post_init__(self):
        if self.width <= 0:
            raise SkeletonError("bone width must be positive")
        if self.soft_sharpness <= 0:
            raise SkeletonError("soft_sharpness must be positive")
        self.palette = tuple(tuple(int(v) for v in c) for c in self.palette)

    def to_json(self) -> str:
        return json.dumps({
            "width": self.width,
            "soft_sharpness": self.soft_sharpness,
            "palette": [list(c) for c in self.palette],
            "background": list(self.background),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BoneMapSpec":
        d = json.loads(text)
        return cls(
            width=float(d["width"]),
            soft_sharpness=float(d["soft_sharpness"]),
            palette=tuple(tuple(c) for c in d["palette"]),
            background=tuple(d["background"]),
        )


def bone_quadratic(p1, p2, width: float, points: np.ndarray) -> np.ndarray:
    """q(x) for an array of points (..., 2); q <= 1 means inside the oval.

    Degenerate bones (coincident endpoints) return +inf everywhere.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    w = p2 - p1
    l2 = float(w @ w)
    if l2 < DEGENERATE_L2:
        return np.full(points.shape[:-1], np.inf)
    mid = (p1 + p2) / 2.0
    rel = points - mid
    along = rel @ w  # |rel . w| = dist-to-bisector * L
    across = rel[..., 0] * w[1] - rel[..., 1] * w[0]  # |rel x w| = dist-to-axis * L
    return (4.0 / l2) * (along ** 2 / l2 + across ** 2 / width ** 2)


def bone_region_test(p1, p2, width: float, point) -> bool:
    """True iff point lies inside (or on) the bone's oval."""
    q = bone_quadratic(p1, p2, width, np.asarray(point, dtype=np.float64))
    return bool(q <= 1.0)


def _pixel_grid(height: int, width: int) -> np.ndarray:
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)  # (H, W, 2) of (u, v)


def render_hard_labels(pose: Pose2D, chain: KinematicChain, spec: BoneMapSpec,
                       height: int, width: int) -> np.ndarray:
    """Per-pixel bone index, -1 for background; later bones overwrite earlier."""
    grid = _pixel_grid(height, width)
    labels = np.full((height, width), -1, dtype=np.int32)
    for k, (p, c) in enumerate(chain.bones):
        q = bone_quadratic(pose.coords[p], pose.coords[c], spec.width, grid)
        labels[q <= 1.0] = k
    return labels


def colorize(labels: np.ndarray, spec: BoneMapSpec) -> np.ndarray:
    """Map a bone-index image to RGB uint8 using the spec palette."""
    lut = np.array([spec.background] + [spec.palette[k % len(spec.palette)]
                                        for k in range(int(labels.max()) + 1 if labels.size else 0)],
                   dtype=np.uint8)
    return lut[labels + 1]


def render_hard(pose: Pose2D, chain: KinematicChain, spec: BoneMapSpec,
                height: int, width: int) -> np.ndarray:
    """RGB uint8 bone map (H, W, 3)."""
    labels = render_hard_labels(pose, chain, spec, height, width)
    return colorize(labels, spec)


def loop_point(p1, p2, amplitude: float, t: float, orientation: int = 1) -> np.ndarray:
    """Point on the closed oval around the bone at loop parameter t in [0, 1].

    The loop starts and ends at p1 (t = 0 and t = 1), reaches p2 at t = 1/2,
    and traverses one side of the oval on the way out and the other on the
    way back. amplitude is the cross-axis semi-width; orientation (+1 or -1)
    picks which side is traversed first. The point is

        midpoint + s * u_hat + orientation * c * v_hat,

    with u_hat the unit bone direction, v_hat = (u_hat.y, -u_hat.x), and per
    quarter of t: the cross offset c ramps linearly 0 -> a -> 0 -> -a -> 0
    while the along offset s = +-(L/2) * sqrt(1 - (c/a)^2) walks from -L/2
    (at p1) through +L/2 (at p2) and back.
    """
    if not 0.0 <= t <= 1.0:
        raise SkeletonError("loop parameter t must lie in [0, 1]")
    if amplitude <= 0:
        raise SkeletonError("loop amplitude must be positive")
    if orientation not in (1, -1):
        raise SkeletonError("orientation must be +1 or -1")
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    w = p2 - p1
    length = float(np.linalg.norm(w))
    if length ** 2 < DEGENERATE_L2:
        raise SkeletonError("loop undefined for a zero-length bone")
    u_hat = w / length
    v_hat = np.array([u_hat[1], -u_hat[0]])
    if t <= 0.25:
        c = 4.0 * t * amplitude
        sign = -1.0
    elif t <= 0.5:
        c = (2.0 - 4.0 * t) * amplitude
        sign = 1.0
    elif t <= 0.75:
        c = -(4.0 * t - 2.0) * amplitude
        sign = 1.0
    else:
        c = -(4.0 - 4.0 * t) * amplitude
        sign = -1.0
    s = sign * (length / 2.0) * math.sqrt(max(0.0, 1.0 - (c / amplitude) ** 2))
    mid = (p1 + p2) / 2.0
    return mid + s * u_hat + orientation * c * v_hat


def render_soft(keypoints: torch.Tensor, chain: KinematicChain, spec: BoneMapSpec,
                height: int, width: int,
                sharpness: float | None = None) -> torch.Tensor:
    """Differentiable bone map (3, H, W) in [0, 1].

    keypoints: (J, 2) tensor of (u, v); gradients flow to it. Per bone,
    alpha = sigmoid(k * (1 - q)) with the same q as the hard test; bones are
    alpha-composited in chain order over the background. Bones shorter than
    the degeneracy threshold contribute nothing.
    """
    if keypoints.ndim != 2 or keypoints.shape[1] != 2:
        raise SkeletonError(f"keypoints must be (J,2), got {tuple(keypoints.shape)}")
    k = spec.soft_sharpness if sharpness is None else sharpness
    dtype = keypoints.dtype if keypoints.is_floating_point() else torch.float32
    device = keypoints.device
    xs = torch.arange(width, dtype=dtype, device=device)
    ys = torch.arange(height, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")

    bg = torch.tensor([c / 255.0 for c in spec.background], dtype=dtype, device=device)
    out = bg.view(3, 1, 1).expand(3, height, width).clone()
    d2 = float(spec.width) ** 2
    for bone_k, (p, c) in enumerate(chain.bones):
        w = keypoints[c] - keypoints[p]
        l2 = (w * w).sum()
        mid = (keypoints[p] + keypoints[c]) / 2.0
        relx = gx - mid[0]
        rely = gy - mid[1]
        along = relx * w[0] + rely * w[1]
        across = relx * w[1] - rely * w[0]
        l2_safe = torch.clamp(l2, min=DEGENERATE_L2)
        q = (4.0 / l2_safe) * (along ** 2 / l2_safe + across ** 2 / d2)
        alpha = torch.sigmoid(k * (1.0 - q))
        if bool(l2 < DEGENERATE_L2):
            alpha = alpha * 0.0
        color = torch.tensor([v / 255.0 for v in spec.palette[bone_k % len(spec.palette)]],
                             dtype=dtype, device=device).view(3, 1, 1)
        out = out * (1.0 - alpha) + color * alpha
    return out


def soft_to_uint8(soft: torch.Tensor) -> np.ndarray:
    """(3, H, W) float in [0,1] -> (H, W, 3) uint8."""
    arr = soft.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def write_png(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as PNG; the single PNG writer for the
    package so that every producer emits byte-identical files for identical
    pixel content."""
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise SkeletonError("expected (H, W, 3) uint8 image")
    Image.fromarray(image, mode="RGB").save(Path(path), format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
