"""Backbone, feature aggregation, prediction branches, and the full model.

The backbone is a lightweight iterative-aggregation net: a stem plus four
residual stages emit features at strides 4/8/16 with channel widths
(base, 2*base, 4*base); upsample-and-concat blocks fuse them back to a
single stride-4 map. Two corner branches (top-left / bottom-right) pool,
refine with a guiding-shift-driven deformable convolution, and predict
heatmaps, sub-cell offsets, and centripetal shifts. A third, center
branch regularizes training and is pruned before deployment; eval-mode
outputs never depend on it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .modules import BatchNorm2d, Conv2d, ConvBN, ConvBNReLU, Module, TransposeConv2d
from .pooling import CenterPool, make_corner_pool
from .tensor import Parameter, Tensor, record_kink_signature

STRIDE = 4  # downsample ratio between the input image and every head map

# Initial heatmap activation ~0.1 keeps the focal loss stable early on.
HEATMAP_BIAS_INIT = float(np.log(0.1 / 0.9))


@dataclass
class ModelConfig:
    num_classes: int = 5
    channel_base: int = 16
    head_channels: int = 16
    deform_kernel: int = 3
    pooling_variant: str = "vhcp"
    with_center_branch: bool = True
    input_size: tuple[int, int] = (96, 96)

    def validate(self) -> "ModelConfig":
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ValueError(f"input_size {self.input_size} must be divisible by 16")
        if self.head_channels % 2:
            raise ValueError(f"head_channels {self.head_channels} must be even")
        if self.pooling_variant not in ("cp", "ccp", "vhcp"):
            raise ValueError(f"unknown pooling variant {self.pooling_variant!r}")
        if self.num_classes < 1 or self.channel_base < 1:
            raise ValueError("num_classes and channel_base must be positive")
        return self

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "channel_base": self.channel_base,
            "head_channels": self.head_channels,
            "deform_kernel": self.deform_kernel,
            "pooling_variant": self.pooling_variant,
            "with_center_branch": self.with_center_branch,
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d).validate()


@dataclass
class FeaturePyramid:
    f4: Tensor  # stride 4, base channels
    f5: Tensor  # stride 8, 2*base
    f6: Tensor  # stride 16, 4*base


@dataclass
class CornerOutputs:
    heatmap: Tensor      # (N, C, h, w), sigmoid activations in (0, 1)
    offset: Tensor       # (N, 2, h, w), sub-cell (x, y) residuals
    centripetal: Tensor  # (N, 2, h, w), log half-extents in feature units
    guiding: Tensor      # (N, 2, h, w), same encoding, drives the deform offsets


@dataclass
class CenterOutputs:
    heatmap: Tensor    # (N, C, h, w)
    offset: Tensor     # (N, 2, h, w)
    bc_vector: Tensor  # (N, 2, h, w), log half-extents in feature units


@dataclass
class RawPredictions:
    tl: CornerOutputs
    br: CornerOutputs
    center: Optional[CenterOutputs]
    stride: int = STRIDE


# ---------------------------------------------------------------------------
# Deformable convolution
# ---------------------------------------------------------------------------


def deform_conv2d(features: Tensor, offsets: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 (or kxk) convolution whose taps are displaced per cell.

    ``offsets`` has 2*k*k channels: pairs (dx, dy) per tap in row-major
    tap order. Samples are bilinear with border-zero out-of-bounds, so an
    all-zero offset field reduces exactly to a standard zero-padded
    convolution with the same weights.
    """
    n, c, h, w = features.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"deform_conv2d: features {features.shape} vs weight {weight.shape}")
    if offsets.shape != (n, 2 * kh * kw, h, w):
        raise ValueError(
            f"deform_conv2d: offsets shape {offsets.shape}, expected {(n, 2 * kh * kw, h, w)}"
        )
    pad = (kh - 1) // 2
    k2 = kh * kw

    off = offsets.data.reshape(n, k2, 2, h, w)
    tap_i, tap_j = np.divmod(np.arange(k2), kw)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    py = yy[None, None] + (tap_i - pad)[None, :, None, None] + off[:, :, 1]
    px = xx[None, None] + (tap_j - pad)[None, :, None, None] + off[:, :, 0]

    y0 = np.floor(py).astype(np.intp)
    x0 = np.floor(px).astype(np.intp)
    if T._kink_signatures is not None:
        record_kink_signature(hash(y0.tobytes()) ^ hash(x0.tobytes()))
    fy = py - y0
    fx = px - x0

    feat_t = np.ascontiguousarray(features.data.transpose(0, 2, 3, 1)).reshape(n, h * w, c)
    n_idx = np.arange(n)[:, None, None, None]

    corners = []
    sampled = np.zeros((n, k2, h, w, c))
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            yc = y0 + dy
            xc = x0 + dx
            valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
            flat = np.where(valid, yc * w + xc, 0)
            vals = feat_t[n_idx, flat] * valid[..., None]
            wgt = wy * wx
            sampled += wgt[..., None] * vals
            corners.append((dy, dx, flat, valid, vals, wgt))

    wmat = weight.data.reshape(cout, c * k2)
    s_mat = sampled.transpose(0, 2, 3, 4, 1).reshape(n * h * w, c * k2)
    out = (s_mat @ wmat.T).reshape(n, h, w, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out) + bias.data[None, :, None, None]

    def bwd(g, features=features, offsets=offsets, weight=weight, bias=bias):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, cout)
        if weight.requires_grad:
            dw = (gmat.T @ s_mat).reshape(cout, c, k2).reshape(cout, c, kh, kw)
            T._accumulate(weight, dw)
        if bias.requires_grad:
            T._accumulate(bias, g.sum(axis=(0, 2, 3)))
        need_feat = features.requires_grad
        need_off = offsets.requires_grad
        if not (need_feat or need_off):
            return
        dsamp = (gmat @ wmat).reshape(n, h, w, c, k2).transpose(0, 4, 1, 2, 3)
        if need_feat:
            dfeat_t = np.zeros_like(feat_t)
            for dy, dx, flat, valid, vals, wgt in corners:
                contrib = dsamp * (wgt * valid)[..., None]
                np.add.at(dfeat_t, (n_idx, flat), contrib)
            dfeat = dfeat_t.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            T._accumulate(features, np.ascontiguousarray(dfeat))
        if need_off:
            v00, v01, v10, v11 = (corners[i][4] for i in range(4))
            ddy = (1.0 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01)
            ddx = (1.0 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10)
            dpy = (dsamp * ddy).sum(axis=-1)
            dpx = (dsamp * ddx).sum(axis=-1)
            doff = np.stack([dpx, dpy], axis=2).reshape(n, 2 * k2, h, w)
            T._accumulate(offsets, doff)

    return T._node(out, [features, offsets, weight, bias], bwd)


class DeformConv2d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel_size: int):
        super().__init__()
        std = np.sqrt(2.0 / (cin * kernel_size * kernel_size))
        self.weight = Parameter(
            rng.normal(0.0, std, size=(cout, cin, kernel_size, kernel_size)), "weight"
        )
        self.bias = Parameter(np.zeros(cout), "bias")

    def forward(self, features: Tensor, offsets: Tensor) -> Tensor:
        return deform_conv2d(features, offsets, self.weight, self.bias)


# ---------------------------------------------------------------------------
# Backbone and aggregation
# ---------------------------------------------------------------------------


class ResidualBlock(Module):
    def __init__(self, rng, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = Conv2d(rng, cin, cout, 3, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = ConvBN(rng, cin, cout, 1, stride=stride)

    def forward(self, x: Tensor) -> Tensor:
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.downsample is None else self.downsample(x)
        return T.relu(y + skip)


class Backbone(Module):
    """Stem plus four two-unit residual stages, each halving resolution."""

    def __init__(self, rng, base: int):
        super().__init__()
        self.stem = ConvBNReLU(rng, 3, base, 7)
        self.stage1 = [ResidualBlock(rng, base, base, 2), ResidualBlock(rng, base, base)]
        self.stage2 = [ResidualBlock(rng, base, base, 2), ResidualBlock(rng, base, base)]
        self.stage3 = [ResidualBlock(rng, base, 2 * base, 2), ResidualBlock(rng, 2 * base, 2 * base)]
        self.stage4 = [ResidualBlock(rng, 2 * base, 4 * base, 2), ResidualBlock(rng, 4 * base, 4 * base)]

    def forward(self, image: Tensor) -> FeaturePyramid:
        x = self.stem(image)
        for block in self.stage1:
            x = block(x)
        for block in self.stage2:
            x = block(x)
        f4 = x
        for block in self.stage3:
            x = block(x)
        f5 = x
        for block in self.stage4:
            x = block(x)
        return FeaturePyramid(f4=f4, f5=f5, f6=x)


class UpsampleBlock(Module):
    """Conv-BN-ReLU then a stride-2 transpose conv halving the channels."""

    def __init__(self, rng, channels: int):
        super().__init__()
        self.refine = ConvBNReLU(rng, channels, channels, 3)
        self.up = TransposeConv2d(rng, channels, channels // 2, 2, 2)

    def forward(self, x: Tensor) -> Tensor:
        return self.up(self.refine(x))


class ConcatFuse(Module):
    """Channel concat followed by a 1x1 Conv-BN-ReLU to a fixed width."""

    def __init__(self, rng, cin: int, cout: int):
        super().__init__()
        self.fuse = ConvBNReLU(rng, cin, cout, 1)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        return self.fuse(T.concat_channels(a, b))


class Aggregator(Module):
    """Iteratively combines {F4, F5, F6} into one stride-4 map."""

    def __init__(self, rng, base: int, head: int):
        super().__init__()
        self.up_f5 = UpsampleBlock(rng, 2 * base)
        self.fuse_low = ConcatFuse(rng, base + base, head)
        self.up_f6 = UpsampleBlock(rng, 4 * base)
        self.fuse_high = ConcatFuse(rng, 2 * base + 2 * base, head)
        self.up_high = UpsampleBlock(rng, head)
        self.fuse_out = ConcatFuse(rng, head + head // 2, head)

    def forward(self, pyr: FeaturePyramid) -> Tensor:
        low = self.fuse_low(self.up_f5(pyr.f5), pyr.f4)
        high = self.fuse_high(self.up_f6(pyr.f6), pyr.f5)
        return self.fuse_out(low, self.up_high(high))


# ---------------------------------------------------------------------------
# Prediction branches
# ---------------------------------------------------------------------------


class PredictionHead(Module):
    def __init__(self, rng, cin: int, cout: int, bias_init: float = 0.0):
        super().__init__()
        self.feat = ConvBNReLU(rng, cin, cin, 3)
        self.out = Conv2d(rng, cin, cout, 1, bias=True, bias_init=bias_init)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(self.feat(x))


class CornerBranch(Module):
    def __init__(self, rng, cfg: ModelConfig, corner_type: str):
        super().__init__()
        ch = cfg.head_channels
        k = cfg.deform_kernel
        self.pool = make_corner_pool(cfg.pooling_variant, rng, ch, corner_type)
        self.guide_feat = ConvBNReLU(rng, ch, ch, 3)
        self.guide_out = Conv2d(rng, ch, 2, 1)
        self.offset_field = Conv2d(rng, 2, 2 * k * k, 3)
        self.deform = DeformConv2d(rng, ch, ch, k)
        self.heat_head = PredictionHead(rng, ch, cfg.num_classes, bias_init=HEATMAP_BIAS_INIT)
        self.offset_head = PredictionHead(rng, ch, 2)
        self.shift_head = PredictionHead(rng, ch, 2)

    def forward(self, fused: Tensor) -> CornerOutputs:
        pooled = self.pool(fused)
        guiding = self.guide_out(self.guide_feat(pooled))
        offsets = self.offset_field(guiding)
        enhanced = T.relu(self.deform(pooled, offsets))
        return CornerOutputs(
            heatmap=T.sigmoid(self.heat_head(enhanced)),
            offset=self.offset_head(enhanced),
            centripetal=self.shift_head(enhanced),
            guiding=guiding,
        )


class CenterBranch(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        ch = cfg.head_channels
        self.pool = CenterPool(rng, ch)
        self.heat_head = PredictionHead(rng, ch, cfg.num_classes, bias_init=HEATMAP_BIAS_INIT)
        self.offset_head = PredictionHead(rng, ch, 2)
        self.extent_head = PredictionHead(rng, ch, 2)

    def forward(self, fused: Tensor) -> CenterOutputs:
        pooled = self.pool(fused)
        return CenterOutputs(
            heatmap=T.sigmoid(self.heat_head(pooled)),
            offset=self.offset_head(pooled),
            bc_vector=self.extent_head(pooled),
        )


class Model(Module):
    def __init__(self, config: ModelConfig, seed: int):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        shared_seq, center_seq = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(shared_seq)
        self.backbone = Backbone(rng, config.channel_base)
        self.aggregator = Aggregator(rng, config.channel_base, config.head_channels)
        self.tl_branch = CornerBranch(rng, config, "top_left")
        self.br_branch = CornerBranch(rng, config, "bottom_right")
        self.center_branch = (
            CenterBranch(np.random.default_rng(center_seq), config)
            if config.with_center_branch
            else None
        )
        self._assign_parameter_names()

    def _assign_parameter_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise RuntimeError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    @property
    def center_branch_present(self) -> bool:
        return self.center_branch is not None

    def extract_features(self, image: Tensor) -> FeaturePyramid:
        if image.data.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected an (N, 3, H, W) image, got {image.shape}")
        if image.shape[2] % 16 or image.shape[3] % 16:
            raise ValueError(f"image dims {image.shape[2:]} must be divisible by 16")
        return self.backbone(image)

    def aggregate_features(self, pyr: FeaturePyramid) -> Tensor:
        return self.aggregator(pyr)

    def forward(self, image: Tensor) -> RawPredictions:
        fused = self.aggregate_features(self.extract_features(image))
        center = None
        if self.training and self.center_branch is not None:
            center = self.center_branch(fused)
        return RawPredictions(
            tl=self.tl_branch(fused),
            br=self.br_branch(fused),
            center=center,
        )


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Deterministically initialized model; the center branch draws from an
    independent seed stream so shared weights match across the
    with/without-center-branch configurations."""
    return Model(config, seed)


def param_count(model: Model) -> int:
    return model.param_count()


def prune_center_branch(model: Model) -> Model:
    """Drop the training-only center branch in place.

    Eval-mode outputs are bitwise unchanged; the parameter count drops to
    that of a model built without the branch. Pruning twice is a no-op.
    """
    if model.center_branch is None:
        warnings.warn("center branch already pruned; nothing to do")
        return model
    model.center_branch = None
    model.config.with_center_branch = False
    return model
