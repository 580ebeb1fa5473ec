"""Trainable networks: stylizer F, pose net G, depth net G', reconstructor F'.

All nets consume float images in [0, 1] shaped (B, 3, H, W) and are built
from seeded generators, so identical configs and seeds give identical
parameters. Checkpoints are directory bundles: one .pt per net plus a
metadata.json carrying stage, configs, and seeds.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .losses import soft_argmax
from .skeleton import (
    BoneVectors,
    KinematicChain,
    Pose3D,
    SkeletonError,
    destandardize_bones,
    pose_from_bones,
)

LOGIT_EPS = 1e-4


def make_norm(mode: str, channels: int) -> nn.Module:
    """Normalization layer factory: per-sample (instance) or per-batch."""
    if mode == "instance":
        # Small eps keeps per-sample normalization scale-invariant to well
        # below 1e-5 (the default 1e-5 eps perturbs sigma noticeably when
        # inputs are rescaled).
        return nn.InstanceNorm2d(channels, affine=True,
                                 track_running_stats=False, eps=1e-9)
    if mode == "batch":
        return nn.BatchNorm2d(channels)
    raise SkeletonError(f"unknown normalization mode '{mode}'")


def _init_conv(conv: nn.Module, gen: torch.Generator, zero: bool = False) -> None:
    with torch.no_grad():
        if zero:
            conv.weight.zero_()
        else:
            fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                              * math.sqrt(2.0 / fan_in))
        if conv.bias is not None:
            conv.bias.zero_()


def _init_linear(fc: nn.Linear, gen: torch.Generator) -> None:
    with torch.no_grad():
        fc.weight.copy_(torch.randn(fc.weight.shape, generator=gen)
                        * math.sqrt(1.0 / fc.in_features))
        fc.bias.zero_()


@dataclass
class TransformNetConfig:
    normalization: str = "instance"  # instance | batch
    residual_blocks: int = 3
    base_channels: int = 16
    input_size: int = 224
    seed: int = 0

    def __post_init__(self):
        if self.normalization not in ("instance", "batch"):
            raise SkeletonError("normalization must be 'instance' or 'batch'")
        if self.residual_blocks < 0 or self.base_channels < 1:
            raise SkeletonError("invalid transform net size")
        if self.input_size % 4 != 0:
            raise SkeletonError("input_size must be divisible by 4 (two downsamples)")

    def param_count(self) -> int:
        """Closed-form parameter count for this architecture."""
        c, r = self.base_channels, self.residual_blocks

        def conv(cin, cout, k):
            return cout * cin * k * k + cout

        def norm(ch):
            return 2 * ch

        total = conv(3, c, 9) + norm(c)
        total += conv(c, 2 * c, 3) + norm(2 * c)
        total += conv(2 * c, 4 * c, 3) + norm(4 * c)
        total += r * (2 * conv(4 * c, 4 * c, 3) + 2 * norm(4 * c))
        total += conv(4 * c, 2 * c, 3) + norm(2 * c)
        total += conv(2 * c, c, 3) + norm(c)
        total += conv(c, 3, 9)
        return total


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm_mode: str, gen: torch.Generator):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = make_norm(norm_mode, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = make_norm(norm_mode, channels)
        _init_conv(self.conv1, gen)
        _init_conv(self.conv2, gen)

    def forward(self, x):
        h = torch.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return x + h


class TransformNet(nn.Module):
    """Encoder/residual/decoder image-to-image net with a logit-space skip.

    The final convolution is zero-initialized and its output is added to the
    logit of the (clamped) input before the sigmoid, so a freshly built net
    is the identity map up to the clamp epsilon.
    """

    def __init__(self, config: TransformNetConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        gen = torch.Generator().manual_seed(config.seed)
        m = config.normalization
        self.enc1 = nn.Conv2d(3, c, 9, padding=4)
        self.norm1 = make_norm(m, c)
        self.enc2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.norm2 = make_norm(m, 2 * c)
        self.enc3 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.norm3 = make_norm(m, 4 * c)
        self.blocks = nn.ModuleList(
            _ResidualBlock(4 * c, m, gen) for _ in range(config.residual_blocks))
        self.dec1 = nn.Conv2d(4 * c, 2 * c, 3, padding=1)
        self.norm4 = make_norm(m, 2 * c)
        self.dec2 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.norm5 = make_norm(m, c)
        self.out_conv = nn.Conv2d(c, 3, 9, padding=4)
        for conv in (self.enc1, self.enc2, self.enc3, self.dec1, self.dec2):
            _init_conv(conv, gen)
        _init_conv(self.out_conv, gen, zero=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.norm1(self.enc1(x)))
        h = torch.relu(self.norm2(self.enc2(h)))
        h = torch.relu(self.norm3(self.enc3(h)))
        for block in self.blocks:
            h = block(h)
        h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        h = torch.relu(self.norm4(self.dec1(h)))
        h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        h = torch.relu(self.norm5(self.dec2(h)))
        delta = self.out_conv(h)
        base = x.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS)
        return torch.sigmoid(torch.log(base / (1.0 - base)) + delta)


def stylize(net: TransformNet, image) -> torch.Tensor:
    """Run the stylizer on a [0,1] image; shape is preserved."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image).float()
    single = image.ndim == 3
    if single:
        image = image.unsqueeze(0)
    size = net.config.input_size
    if image.shape[-2:] != (size, size) or image.shape[1] != 3:
        raise SkeletonError(
            f"stylize expects (3,{size},{size}) input, got {tuple(image.shape[1:])}")
    out = net(image.clamp(0.0, 1.0))
    return out.squeeze(0) if single else out


@dataclass
class PoseNetConfig:
    input_size: int = 224
    heatmap_size: int = 56
    base_channels: int = 16
    extra_convs: int = 1  # stride-1 convs after the downsampling stack
    joints: int = 18
    seed: int = 0

    def __post_init__(self):
        if self.input_size % self.heatmap_size != 0:
            raise SkeletonError("heatmap size must divide input size evenly")
        stride = self.input_size // self.heatmap_size
        if stride & (stride - 1) != 0:
            raise SkeletonError("input/heatmap ratio must be a power of two")
        if self.extra_convs < 0:
            raise SkeletonError("extra_convs must be >= 0")

    @property
    def stride(self) -> int:
        return self.input_size // self.heatmap_size

    def param_count(self) -> int:
        c = self.base_channels
        downs = int(math.log2(self.stride))

        def conv(cin, cout, k):
            return cout * cin * k * k + cout

        total = conv(3, c, 3)
        total += max(0, downs - 1) * conv(c, c, 3)
        total += self.extra_convs * conv(c, c, 3)
        total += conv(c, self.joints, 1)
        return total


class PoseNet(nn.Module):
    """Conv stack emitting per-joint spatial-softmax heatmaps."""

    def __init__(self, config: PoseNetConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        gen = torch.Generator().manual_seed(config.seed)
        downs = int(math.log2(config.stride))
        layers = []
        in_ch = 3
        for _ in range(max(1, downs)):
            conv = nn.Conv2d(in_ch, c, 3, stride=2 if downs else 1, padding=1)
            _init_conv(conv, gen)
            layers.append(conv)
            in_ch = c
        # When there is more than one downsample, the loop above built them
        # all at stride 2; when stride == 1 a single stride-1 conv stands in.
        for _ in range(config.extra_convs):
            conv = nn.Conv2d(c, c, 3, padding=1)
            _init_conv(conv, gen)
            layers.append(conv)
        self.body = nn.ModuleList(layers)
        self.head = nn.Conv2d(c, config.joints, 1)
        _init_conv(self.head, gen)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Logit maps (B, J, Hh, Wh)."""
        h = image
        for conv in self.body:
            h = torch.relu(conv(h))
        return self.head(h)


def pose_forward(net: PoseNet, image):
    """(normalized heatmaps (B,J,Hh,Wh), coords (B,J,2) in input pixels).

    Heatmaps are spatially softmaxed (each slice sums to 1); coordinates are
    the heatmap expectation mapped to input pixel centers:
    u_img = (u_hm + 0.5) * stride - 0.5.
    """
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image).float()
    single = image.ndim == 3
    if single:
        image = image.unsqueeze(0)
    size = net.config.input_size
    if image.shape[-2:] != (size, size):
        raise SkeletonError(
            f"pose_forward expects {size}x{size} input, got {tuple(image.shape[-2:])}")
    logits = net(image)
    b, j, hh, ww = logits.shape
    heatmaps = torch.softmax(logits.reshape(b, j, hh * ww), dim=2).reshape(b, j, hh, ww)
    stride = float(net.config.stride)
    coords = torch.stack([soft_argmax(heatmaps[i]) for i in range(b)])
    coords = (coords + 0.5) * stride - 0.5
    if single:
        return heatmaps.squeeze(0), coords.squeeze(0)
    return heatmaps, coords


@dataclass
class DepthNetConfig:
    input_size: int = 224
    base_channels: int = 16
    depth: int = 4  # stride-2 conv count in the encoder
    bones: int = 17
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise SkeletonError("encoder depth must be >= 1")
        if self.input_size % (2 ** self.depth) != 0:
            raise SkeletonError("input size must survive the downsampling stack")

    def widths(self) -> list:
        return [self.base_channels * (2 ** min(i, 3)) for i in range(self.depth)]

    def param_count(self) -> int:
        def conv(cin, cout, k):
            return cout * cin * k * k + cout

        total = 0
        in_ch = 3
        for w in self.widths():
            total += conv(in_ch, w, 3)
            in_ch = w
        total += (in_ch + 1) * self.bones * 3  # fc head
        return total


class DepthNet(nn.Module):
    """Conv encoder + one fully connected head -> 17x3 standardized bones."""

    def __init__(self, config: DepthNetConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        layers = []
        in_ch = 3
        for w in config.widths():
            conv = nn.Conv2d(in_ch, w, 3, stride=2, padding=1)
            _init_conv(conv, gen)
            layers.append(conv)
            in_ch = w
        self.encoder = nn.ModuleList(layers)
        self.head = nn.Linear(in_ch, config.bones * 3)
        _init_linear(self.head, gen)

    def forward(self, bone_map: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) bone-map image -> (B, 17, 3) standardized bones."""
        h = bone_map
        for conv in self.encoder:
            h = torch.relu(conv(h))
        h = h.mean(dim=(2, 3))
        out = self.head(h)
        return out.reshape(-1, self.config.bones, 3)


def depth_forward(net: DepthNet, bone_map, pose2d_coords, bone_mean, bone_std,
                  chain: KinematicChain | None = None):
    """Standardized bone prediction plus the assembled 3D pose.

    The returned pose keeps (u, v) exactly as given by the 2D branch; only z
    is taken from the depth net: de-standardize the bones, then accumulate
    bone z components root-to-leaf with the pelvis pinned at z = 0.
    """
    chain = chain or KinematicChain.default()
    if isinstance(bone_map, np.ndarray):
        bone_map = torch.from_numpy(bone_map).float()
    single = bone_map.ndim == 3
    if single:
        bone_map = bone_map.unsqueeze(0)
    bones_std = net(bone_map)
    if not single:
        raise SkeletonError("depth_forward assembles one pose at a time")
    bones_std_np = bones_std[0].detach().cpu().numpy().astype(np.float64)
    vecs = destandardize_bones(bones_std_np, bone_mean, bone_std)
    coords2d = np.asarray(pose2d_coords, dtype=np.float64)
    z_bones = np.zeros((len(chain.bones), 3))
    z_bones[:, 2] = vecs[:, 2]
    z_pose = pose_from_bones(np.zeros(3), BoneVectors(z_bones), chain)
    coords = np.zeros((len(chain.joint_names), 3))
    coords[:, :2] = coords2d
    coords[:, 2] = z_pose.coords[:, 2]
    return bones_std[0], Pose3D(coords)


def composite_over(bone_map: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    """Overlay a bone map on a style image: out = P + (1 - coverage) * S with
    coverage the per-pixel channel maximum of P. Fully differentiable, and
    the result has the same 3 channels as any stylizer input, so F' can be
    initialized by copying F's weights."""
    if bone_map.shape != style.shape:
        raise SkeletonError("bone map and style image shapes must match")
    coverage = bone_map.max(dim=-3, keepdim=True).values
    return bone_map + (1.0 - coverage) * style


def reconstruct(fprime: TransformNet, bone_map, style) -> torch.Tensor:
    """O' = F'(bone map composited over the style image)."""
    if isinstance(bone_map, np.ndarray):
        bone_map = torch.from_numpy(bone_map).float()
    if isinstance(style, np.ndarray):
        style = torch.from_numpy(style).float()
    return stylize(fprime, composite_over(bone_map, style))


def clone_net(src: nn.Module, make):
    """Fresh net from `make()` with src's weights copied in."""
    dst = make()
    dst.load_state_dict(src.state_dict())
    return dst


CONFIG_TYPES = {
    "transform": TransformNetConfig,
    "pose": PoseNetConfig,
    "depth": DepthNetConfig,
}


def save_bundle(path, nets: dict, metadata: dict) -> None:
    """Write a checkpoint directory: one .pt per net + metadata.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, net in nets.items():
        torch.save(net.state_dict(), path / f"{name}.pt")
    meta = dict(metadata)
    meta["nets"] = sorted(nets.keys())
    (path / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_bundle(path):
    """(metadata, {net name: state_dict}) from a checkpoint directory."""
    path = Path(path)
    meta_path = path / "metadata.json"
    if not meta_path.is_file():
        raise SkeletonError(f"no checkpoint bundle at {path}")
    metadata = json.loads(meta_path.read_text())
    states = {}
    for name in metadata.get("nets", []):
        states[name] = torch.load(path / f"{name}.pt", weights_only=True)
    return metadata, states


def config_to_dict(config) -> dict:
    return asdict(config)


def config_from_dict(kind: str, d: dict):
    return CONFIG_TYPES[kind](**d)
