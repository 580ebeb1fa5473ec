"""Loss network and the full training objective.

All image losses operate on float tensors in [0, 1], shaped (3, H, W) or
(B, 3, H, W), and return 0-dim torch tensors so they can be backpropagated.
Numpy inputs are converted. The feature extractor is a fixed-seed randomly
initialized VGG-style stack with named relu activations; it carries no
running statistics, so evaluation is deterministic and reentrant.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .skeleton import Pose2D, SkeletonError

SENT_LAYERS = ("relu1_1", "relu1_2", "relu2_1")
CENT_LAYERS = ("relu5_2", "relu5_3", "relu5_4")
STYLE_LAYERS = ("relu1_2", "relu2_1", "relu3_2", "relu4_2")
CONTENT_LAYER = "relu4_2"
FEAT_LAYERS = ("relu3_2",)

SRGB_LINEAR_THRESHOLD = 0.0031308
SRGB_LINEAR_SLOPE = 12.92
SRGB_EXPONENT = 1.0 / 2.4


class FeatureExtractor(nn.Module):
    """VGG-19-layout conv stack with named relu taps (relu1_1 .. relu5_4).

    Blocks of 2, 2, 4, 4, 4 convolutions (3x3, pad 1) with channel widths
    16, 32, 64, 128, 128, each block followed by a 2x2 max pool with
    ceil_mode so 8x8 inputs still reach the deepest block. Weights are drawn
    from a seeded generator: two extractors built with the same seed are
    identical, and the same input always yields the same features.
    """

    BLOCK_CONVS = (2, 2, 4, 4, 4)
    BLOCK_WIDTHS = (16, 32, 64, 128, 128)

    def __init__(self, seed: int = 0, trainable: bool = False,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self._order: list[tuple[str, nn.Module]] = []
        convs = nn.ModuleDict()
        in_ch = 3
        for b, (n_convs, width) in enumerate(zip(self.BLOCK_CONVS,
                                                 self.BLOCK_WIDTHS), start=1):
            for i in range(1, n_convs + 1):
                conv = nn.Conv2d(in_ch, width, kernel_size=3, padding=1, dtype=dtype)
                fan_in = in_ch * 9
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen,
                                                  dtype=dtype) * math.sqrt(2.0 / fan_in))
                    conv.bias.zero_()
                name = f"relu{b}_{i}"
                convs[name] = conv
                self._order.append((name, conv))
                in_ch = width
            self._order.append((f"pool{b}", nn.MaxPool2d(2, ceil_mode=True)))
        self.convs = convs
        self.seed = seed
        self.trainable = trainable
        self.requires_grad_(trainable)
        self.eval()

    @property
    def layer_names(self) -> tuple:
        return tuple(name for name, _ in self._order if name.startswith("relu"))

    def forward(self, image: torch.Tensor, layers) -> dict:
        """Run the stack and return {layer_name: activation} for `layers`."""
        layers = tuple(layers)
        known = set(self.layer_names)
        for name in layers:
            if name not in known:
                raise SkeletonError(f"unknown feature layer '{name}'")
        x = _as_batch(image)
        if x.dtype != next(self.parameters()).dtype:
            x = x.to(next(self.parameters()).dtype)
        remaining = set(layers)
        out = {}
        for name, module in self._order:
            if name.startswith("relu"):
                x = torch.relu(module(x))
            else:
                x = module(x)
            if name in remaining:
                out[name] = x
                remaining.discard(name)
                if not remaining:
                    break
        return out


def _as_batch(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image)
    if not torch.is_tensor(image):
        raise SkeletonError("expected a tensor or numpy image")
    if image.ndim == 3:
        image = image.unsqueeze(0)
    if image.ndim != 4 or image.shape[1] != 3:
        raise SkeletonError(f"expected (3,H,W) or (B,3,H,W), got {tuple(image.shape)}")
    return image.float() if not image.is_floating_point() else image


def gram(features: torch.Tensor) -> torch.Tensor:
    """G = F Ft / (C*H*W) with F the C x (H*W) flattening; batched if 4-D."""
    if isinstance(features, np.ndarray):
        features = torch.from_numpy(features)
    squeeze = features.ndim == 3
    if squeeze:
        features = features.unsqueeze(0)
    if features.ndim != 4:
        raise SkeletonError("gram expects (C,H,W) or (B,C,H,W) features")
    b, c, h, w = features.shape
    if h * w == 0 or c == 0:
        raise SkeletonError("gram expects a nonempty feature map")
    flat = features.reshape(b, c, h * w)
    g = flat @ flat.transpose(1, 2) / (c * h * w)
    return g.squeeze(0) if squeeze else g


def style_loss(output, style, extractor: FeatureExtractor,
               layers=STYLE_LAYERS) -> torch.Tensor:
    """Sum over style layers of the squared Frobenius gram difference."""
    fo = extractor(_as_batch(output), layers)
    fs = extractor(_as_batch(style), layers)
    total = None
    for name in layers:
        diff = gram(fo[name]) - gram(fs[name])
        term = (diff ** 2).sum(dim=(-2, -1)).mean()
        total = term if total is None else total + term
    return total


def feature_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise SkeletonError("feature shapes must match")
    return ((a - b) ** 2).mean()


def content_loss(output, content, extractor: FeatureExtractor,
                 layer: str = CONTENT_LAYER) -> torch.Tensor:
    """Mean squared feature difference at the content layer."""
    fo = extractor(_as_batch(output), (layer,))[layer]
    fc = extractor(_as_batch(content), (layer,))[layer]
    return feature_mse(fo, fc)


def feat_loss(output, content, extractor: FeatureExtractor,
              layers=FEAT_LAYERS) -> torch.Tensor:
    """Feature reconstruction: mean over layers of the feature MSE."""
    fo = extractor(_as_batch(output), layers)
    fc = extractor(_as_batch(content), layers)
    total = None
    for name in layers:
        term = feature_mse(fo[name], fc[name])
        total = term if total is None else total + term
    return total / len(layers)


def tv_loss(image) -> torch.Tensor:
    """Sum of squared horizontal and vertical neighbor differences."""
    x = _as_batch(image)
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise SkeletonError("tv_loss needs H, W >= 2")
    dh = x[..., :, 1:] - x[..., :, :-1]
    dv = x[..., 1:, :] - x[..., :-1, :]
    return (dh ** 2).sum() + (dv ** 2).sum()


def js_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Jensen-Shannon divergence between probability vectors, natural log."""
    if isinstance(p, np.ndarray):
        p = torch.from_numpy(np.asarray(p, dtype=np.float64))
    if isinstance(q, np.ndarray):
        q = torch.from_numpy(np.asarray(q, dtype=np.float64))
    m = (p + q) / 2.0

    def kl(a, b):
        # 0 * log(0/x) = 0; a > 0 forces b > 0 since b >= a/2 on the mixture.
        mask = a > 0
        safe_a = torch.where(mask, a, torch.ones_like(a))
        safe_b = torch.where(mask, b, torch.ones_like(b))
        return (safe_a * (torch.log(safe_a) - torch.log(safe_b))).where(
            mask, torch.zeros_like(a)).sum()

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def js_entropy_loss(a, b, extractor: FeatureExtractor, layers) -> torch.Tensor:
    """Mean over layers of JS between softmax-flattened feature activations."""
    fa = extractor(_as_batch(a), layers)
    fb = extractor(_as_batch(b), layers)
    total = None
    for name in layers:
        pa = torch.softmax(fa[name].reshape(fa[name].shape[0], -1), dim=1)
        pb = torch.softmax(fb[name].reshape(fb[name].shape[0], -1), dim=1)
        js = torch.stack([js_divergence(pa[i], pb[i]) for i in range(pa.shape[0])]).mean()
        total = js if total is None else total + js
    return total / len(layers)


def sent_loss(a, b, extractor: FeatureExtractor) -> torch.Tensor:
    return js_entropy_loss(a, b, extractor, SENT_LAYERS)


def cent_loss(a, b, extractor: FeatureExtractor) -> torch.Tensor:
    return js_entropy_loss(a, b, extractor, CENT_LAYERS)


def srgb_encode(image: torch.Tensor) -> torch.Tensor:
    """Gamma-encode a linear [0,1] image: linear toe below the threshold,
    pure power x^(1/2.4) above it."""
    x = image.clamp(0.0, 1.0)
    safe = x.clamp(min=SRGB_LINEAR_THRESHOLD)
    return torch.where(x <= SRGB_LINEAR_THRESHOLD,
                       SRGB_LINEAR_SLOPE * x,
                       safe ** SRGB_EXPONENT)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity of the flattened tensors; 1 if either is zero."""
    fa = a.reshape(-1)
    fb = b.reshape(-1)
    na = torch.linalg.vector_norm(fa)
    nb = torch.linalg.vector_norm(fb)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        return torch.ones((), dtype=a.dtype, device=a.device)
    return 1.0 - (fa @ fb) / (na * nb)


def srgb_loss(output, style) -> torch.Tensor:
    """1 - cosine similarity of the gamma-encoded images."""
    o = srgb_encode(_as_batch(output))
    s = srgb_encode(_as_batch(style))
    return cosine_distance(o, s)


def _rgb_to_hsv(image: torch.Tensor) -> torch.Tensor:
    """(B,3,H,W) RGB in [0,1] -> HSV with h, s, v in [0,1]. Differentiable
    away from channel ties; hue of gray pixels is 0 by convention."""
    r, g, b = image[:, 0], image[:, 1], image[:, 2]
    v, _ = image.max(dim=1)
    mn, _ = image.min(dim=1)
    c = v - mn
    eps = 1e-12
    c_safe = c.clamp(min=eps)
    h_r = ((g - b) / c_safe) % 6.0
    h_g = (b - r) / c_safe + 2.0
    h_b = (r - g) / c_safe + 4.0
    h = torch.where(v == r, h_r, torch.where(v == g, h_g, h_b)) / 6.0
    h = torch.where(c > eps, h, torch.zeros_like(h))
    s = torch.where(v > eps, c / v.clamp(min=eps), torch.zeros_like(v))
    return torch.stack([h, s, v], dim=1)


def hsv_loss(output, style) -> torch.Tensor:
    """Sum over H, S, V of mean absolute per-pixel differences; the hue
    difference is circular: min(|dh|, 1 - |dh|)."""
    ho = _rgb_to_hsv(_as_batch(output))
    hs = _rgb_to_hsv(_as_batch(style))
    dh = (ho[:, 0] - hs[:, 0]).abs()
    dh = torch.minimum(dh, 1.0 - dh)
    ds = (ho[:, 1] - hs[:, 1]).abs()
    dv = (ho[:, 2] - hs[:, 2]).abs()
    return dh.mean() + ds.mean() + dv.mean()


def cos_feature_loss(a, b, extractor: FeatureExtractor,
                     layer: str = CONTENT_LAYER) -> torch.Tensor:
    """1 - cosine similarity of the flattened features at one layer."""
    fa = extractor(_as_batch(a), (layer,))[layer]
    fb = extractor(_as_batch(b), (layer,))[layer]
    return cosine_distance(fa, fb)


def style_sup_loss(recon, output, extractor: FeatureExtractor) -> torch.Tensor:
    """style_loss applied to (reconstruction, stylized output)."""
    return style_loss(recon, output, extractor)


def feat_sup_loss(recon, output, extractor: FeatureExtractor) -> torch.Tensor:
    """Content-layer feature reconstruction applied to (recon, output)."""
    return content_loss(recon, output, extractor)


def cos_sup_loss(recon, output, extractor: FeatureExtractor) -> torch.Tensor:
    return cos_feature_loss(recon, output, extractor)


def soft_argmax(heatmap, normalize: bool = False):
    """Expected (u, v) per joint under the (optionally softmaxed) heatmap.

    heatmap: (J, Hh, Ww); returns a (J, 2) tensor of (u, v) in heatmap pixel
    units. Without normalize, slices must be non-negative and sum to ~1
    (small drift is renormalized; an all-zero slice is an error).
    """
    if isinstance(heatmap, np.ndarray):
        heatmap = torch.from_numpy(heatmap)
    if heatmap.ndim != 3:
        raise SkeletonError(f"heatmap must be (J,H,W), got {tuple(heatmap.shape)}")
    j, h, w = heatmap.shape
    flat = heatmap.reshape(j, h * w)
    if normalize:
        p = torch.softmax(flat, dim=1)
    else:
        if bool((flat < 0).any()):
            raise SkeletonError("heatmap values must be non-negative")
        sums = flat.sum(dim=1, keepdim=True)
        if bool((sums <= 1e-12).any()):
            raise SkeletonError("all-zero heatmap slice cannot be normalized")
        if bool(((sums - 1.0).abs() > 1e-4).any()):
            raise SkeletonError("heatmap slices must sum to 1 (pass normalize=True)")
        p = flat / sums
    dtype = p.dtype
    xs = torch.arange(w, dtype=dtype, device=p.device)
    ys = torch.arange(h, dtype=dtype, device=p.device)
    grid = p.reshape(j, h, w)
    u = (grid.sum(dim=1) * xs).sum(dim=1)
    v = (grid.sum(dim=2) * ys).sum(dim=1)
    return torch.stack([u, v], dim=1)


def integral_2d_loss(pred, gt, visibility=None) -> torch.Tensor:
    """Mean absolute coordinate error over visible joints."""
    if isinstance(pred, Pose2D):
        pred = pred.coords
    if isinstance(gt, Pose2D):
        if visibility is None:
            visibility = gt.visibility
        gt = gt.coords
    pred_t = pred if torch.is_tensor(pred) else torch.as_tensor(pred, dtype=torch.float64)
    gt_t = gt if torch.is_tensor(gt) else torch.as_tensor(gt, dtype=pred_t.dtype)
    if visibility is None:
        vis = torch.ones(pred_t.shape[0], dtype=torch.bool, device=pred_t.device)
    else:
        vis = torch.as_tensor(np.asarray(visibility), dtype=torch.bool,
                              device=pred_t.device)
    if not bool(vis.any()):
        raise SkeletonError("integral_2d_loss needs at least one visible joint")
    return (pred_t[vis] - gt_t[vis]).abs().mean()


def depth_loss(pred_bones_std, gt_bones_std) -> torch.Tensor:
    """Mean squared difference of standardized bone vectors (17x3)."""
    p = pred_bones_std if torch.is_tensor(pred_bones_std) else \
        torch.as_tensor(np.asarray(pred_bones_std), dtype=torch.float64)
    g = gt_bones_std if torch.is_tensor(gt_bones_std) else \
        torch.as_tensor(np.asarray(gt_bones_std), dtype=p.dtype)
    if p.shape != g.shape:
        raise SkeletonError("bone vector shapes must match")
    return ((p - g) ** 2).mean()


@dataclass
class LossWeights:
    """Per-term weights of the total training objective."""
    style: float = 1.0
    feat: float = 1.0
    tv: float = 1.0
    sent: float = 1e9
    cent: float = 1e6
    srgb: float = 200.0
    hsv: float = 300.0
    cos: float = 1000.0
    content: float = 1.0
    pose_2d: float = 1.0
    depth: float = 1000.0
    style_sup: float = 0.0035
    cos_sup: float = 0.0035
    feat_sup: float = 0.0035

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise SkeletonError(f"loss weight '{f.name}' must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LossWeights":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path) -> "LossWeights":
        return cls.from_json(Path(path).read_text())


def total_loss(components: dict, weights: LossWeights):
    """Weighted sum of named loss components plus a per-term report.

    components: name -> scalar (tensor or float); names must be LossWeights
    fields. Returns (total, report) where report maps each provided term to
    its raw value, weight, and weighted contribution.
    """
    known = {f.name for f in fields(LossWeights)}
    report = {}
    total = None
    for name, value in components.items():
        if name not in known:
            raise SkeletonError(f"unknown loss component '{name}'")
        weight = getattr(weights, name)
        weighted = weight * value
        raw = float(value.detach()) if torch.is_tensor(value) else float(value)
        report[name] = {
            "raw": raw,
            "weight": weight,
            "weighted": float(weighted.detach()) if torch.is_tensor(weighted) else float(weighted),
        }
        total = weighted if total is None else total + weighted
    if total is None:
        total = torch.zeros(())
    report_total = float(total.detach()) if torch.is_tensor(total) else float(total)
    return total, {"total": report_total, "terms": report}
