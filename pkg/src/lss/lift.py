"""Lift images into per-camera frustum feature clouds.

A small per-image CNN predicts, at every feature pixel, a categorical
distribution over depth bins plus a context vector; the two combine by outer
product so each frustum point carries the pixel's context scaled by the
probability of its depth bin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .cameras import DepthBinSpec
from .engine import Parameters, Tensor
from .layers import Conv, ConvBnRelu

LIFT_MODES = ("learned", "uniform", "oracle")


@dataclass(frozen=True)
class LiftConfig:
    depth_bins: int = 8
    context_channels: int = 16
    enc_widths: tuple[int, ...] = (16, 32, 64, 128)

    @property
    def downsample(self) -> int:
        """Feature stride: one stride-2 block per encoder width."""
        return 2 ** len(self.enc_widths)


@dataclass
class LiftOutput:
    alpha: Tensor    # (M, |D|, H_f, W_f), rows sum to 1 over the bin axis
    context: Tensor  # (M, C, H_f, W_f)


@dataclass
class FrustumFeatures:
    features: Tensor    # (M, |D|, H_f, W_f, C)
    coords: np.ndarray  # (M, |D|, H_f, W_f, 3) ego metres


class ImageEncoder:
    """Stride-2 conv blocks followed by 1x1 depth and context heads."""

    def __init__(self, cfg: LiftConfig, params: Parameters, rng: np.random.Generator,
                 name: str = "encoder", dtype=np.float32):
        self.cfg = cfg
        self.blocks = []
        cin = 3
        for i, w in enumerate(cfg.enc_widths):
            self.blocks.append(ConvBnRelu(params, f"{name}.block{i}", cin, w, 3, stride=2, rng=rng, dtype=dtype))
            cin = w
        self.depth_head = Conv(params, f"{name}.depth_head", cin, cfg.depth_bins, 1, bias=True, rng=rng, dtype=dtype)
        self.context_head = Conv(params, f"{name}.context_head", cin, cfg.context_channels, 1, bias=True,
                                 rng=rng, dtype=dtype)

    def __call__(self, images: Tensor, training: bool) -> LiftOutput:
        if images.data.ndim != 4 or images.data.shape[1] != 3:
            raise engine.ShapeError(f"encoder expects (M, 3, H, W), got {images.data.shape}")
        h = images
        for block in self.blocks:
            h = block(h, training)
        alpha = engine.softmax(self.depth_head(h), axis=1)
        context = self.context_head(h)
        return LiftOutput(alpha=alpha, context=context)


def lift_features(lo: LiftOutput, coords: np.ndarray) -> FrustumFeatures:
    """features[m, d, i, j, :] = alpha[m, d, i, j] * context[m, :, i, j]."""
    m, nd, hf, wf = lo.alpha.data.shape
    mc, c, hc, wc = lo.context.data.shape
    if (m, hf, wf) != (mc, hc, wc):
        raise engine.ShapeError(f"alpha {lo.alpha.data.shape} vs context {lo.context.data.shape}")
    if coords.shape != (m, nd, hf, wf, 3):
        raise engine.ShapeError(f"coords {coords.shape} vs alpha {lo.alpha.data.shape}")
    a5 = engine.reshape(lo.alpha, (m, nd, 1, hf, wf))
    c5 = engine.reshape(lo.context, (m, 1, c, hf, wf))
    prod = engine.mul_broadcast(a5, c5)                      # (M, D, C, H_f, W_f)
    feats = engine.permute(prod, (0, 1, 3, 4, 2))            # (M, D, H_f, W_f, C)
    return FrustumFeatures(features=feats, coords=coords)


def feature_cell_depth(depth_maps: np.ndarray, downsample: int) -> np.ndarray:
    """Ground-truth depth sampled at feature-cell centers, (M, H_f, W_f)."""
    m, h, w = depth_maps.shape
    hi = np.minimum(((np.arange(h // downsample) + 0.5) * downsample).astype(np.int64), h - 1)
    wi = np.minimum(((np.arange(w // downsample) + 0.5) * downsample).astype(np.int64), w - 1)
    return depth_maps[:, hi[:, None], wi[None, :]]


def lift_mode_override(lo: LiftOutput, mode: str, bins: DepthBinSpec | None = None,
                       true_depth: np.ndarray | None = None) -> LiftOutput:
    """Replace the depth distribution for the uniform / oracle ablations.

    uniform spreads mass evenly over the bins; oracle puts all mass on the bin
    nearest the true depth (clamped at the ends). Both are constants, so no
    gradient reaches the depth head in those modes.
    """
    if mode not in LIFT_MODES:
        raise ValueError(f"unknown lift mode {mode!r}")
    if mode == "learned":
        return lo
    shape = lo.alpha.data.shape
    dt = lo.alpha.data.dtype
    if mode == "uniform":
        alpha = Tensor(np.full(shape, 1.0 / shape[1], dtype=dt))
        return LiftOutput(alpha=alpha, context=lo.context)
    if true_depth is None or bins is None:
        raise ValueError("oracle mode needs depth maps and the depth bin spec")
    if true_depth.shape != (shape[0], shape[2], shape[3]):
        raise engine.ShapeError(f"true depth {true_depth.shape} vs alpha {shape}")
    idx = bins.nearest_bin(true_depth)
    onehot = np.zeros(shape, dtype=dt)
    m, hf, wf = true_depth.shape
    mi, ii, ji = np.meshgrid(np.arange(m), np.arange(hf), np.arange(wf), indexing="ij")
    onehot[mi, idx, ii, ji] = 1.0
    return LiftOutput(alpha=Tensor(onehot), context=lo.context)
