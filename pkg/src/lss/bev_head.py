"""Bird's-eye-view networks: the multi-scale head, losses, and IOU.

The head downsamples three times, upsamples the deepest stage by 4, fuses it
with the first stage through a residual block, and upsamples back to the input
grid. All its convolutions are averaged over the four quarter-turn rotations
(`c4`), which makes the whole head exactly equivariant to 90-degree rotations
of the pillar tensor; combined with the geometric splat this gives the full
pipeline its ego-frame rotation equivariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Parameters, Tensor
from .layers import BatchNorm, Conv, ConvBnRelu, ResBlock, upsample2x
from .splat import BevGridSpec, BevTensor


@dataclass(frozen=True)
class BevHeadConfig:
    in_channels: int = 16
    widths: tuple[int, int, int] = (32, 64, 128)
    fuse_width: int = 64
    out_channels: int = 1
    upsample: str = "bilinear"
    zero_init_output: bool = True
    c4: bool = True


@dataclass
class CostMap:
    values: Tensor  # (B, 1, X, Y)
    spec: BevGridSpec


class BevHead:
    def __init__(self, cfg: BevHeadConfig, params: Parameters, rng: np.random.Generator,
                 name: str = "bev", dtype=np.float32):
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        c4 = cfg.c4
        # Even-kernel stride-2 stem and downsamplers keep the sampling grid
        # symmetric under rotation (odd kernels would shift it off-center).
        self.stem = Conv(params, f"{name}.stem", cfg.in_channels, w1, 4, stride=2, padding=1,
                         rng=rng, c4=c4, dtype=dtype)
        self.stem_bn = BatchNorm(params, f"{name}.stem_bn", w1, dtype=dtype)
        self.stage1 = ResBlock(params, f"{name}.stage1", w1, w1, rng, c4=c4, dtype=dtype)
        self.down2 = ConvBnRelu(params, f"{name}.down2", w1, w2, 4, stride=2, padding=1, rng=rng, c4=c4, dtype=dtype)
        self.stage2 = ResBlock(params, f"{name}.stage2", w2, w2, rng, c4=c4, dtype=dtype)
        self.down3 = ConvBnRelu(params, f"{name}.down3", w2, w3, 4, stride=2, padding=1, rng=rng, c4=c4, dtype=dtype)
        self.stage3 = ResBlock(params, f"{name}.stage3", w3, w3, rng, c4=c4, dtype=dtype)
        self.fuse = ResBlock(params, f"{name}.fuse", w3 + w1, cfg.fuse_width, rng, c4=c4, dtype=dtype)
        self.out_conv = Conv(params, f"{name}.out", cfg.fuse_width, cfg.out_channels, 1, bias=True,
                             rng=rng, zero_init=cfg.zero_init_output, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        up = self.cfg.upsample
        h = engine.relu(self.stem_bn(self.stem(x), training))
        x1 = self.stage1(h, training)
        x2 = self.stage2(self.down2(x1, training), training)
        x3 = self.stage3(self.down3(x2, training), training)
        deep = upsample2x(upsample2x(x3, up), up)
        fused = self.fuse(engine.concat([deep, x1], axis=1), training)
        full = upsample2x(fused, up)
        return self.out_conv(full)


def bev_forward(bev: BevTensor, head: BevHead, training: bool = False) -> Tensor:
    """Run the head over a pooled pillar tensor, validating the grid."""
    b, c, x, y = bev.values.data.shape
    if c != head.cfg.in_channels:
        raise engine.ShapeError(f"bev tensor has {c} channels, head expects {head.cfg.in_channels}")
    if x != bev.spec.nx or y != bev.spec.ny:
        raise engine.ShapeError(f"bev tensor {x}x{y} does not match grid {bev.spec.nx}x{bev.spec.ny}")
    if x % 8 or y % 8:
        raise engine.ShapeError(f"grid {x}x{y} must be divisible by 8 for the three stride-2 stages")
    return head(bev.values, training)


class NoGeometryCnn:
    """Baseline without 3-d structure: per-image encoder features are
    concatenated across the (fixed) camera rig and upsampled straight to the
    output grid."""

    def __init__(self, num_cameras: int, enc_widths, feat_hw: tuple[int, int], grid_hw: tuple[int, int],
                 out_channels: int, params: Parameters, rng: np.random.Generator,
                 mix_width: int = 64, name: str = "cnn", dtype=np.float32):
        hf, wf = feat_hw
        gx, gy = grid_hw
        steps_x, steps_y = np.log2(gx / hf), np.log2(gy / wf)
        if steps_x != steps_y or steps_x != int(steps_x) or steps_x < 0:
            raise ValueError(f"grid {grid_hw} not a power-of-two upsample of features {feat_hw}")
        self.num_cameras = num_cameras
        self.blocks = []
        cin = 3
        for i, w in enumerate(enc_widths):
            self.blocks.append(ConvBnRelu(params, f"{name}.block{i}", cin, w, 3, stride=2, rng=rng, dtype=dtype))
            cin = w
        self.mix = ConvBnRelu(params, f"{name}.mix", cin * num_cameras, mix_width, 1, rng=rng, dtype=dtype)
        self.body = ResBlock(params, f"{name}.body", mix_width, mix_width, rng, dtype=dtype)
        self.ups = [ConvBnRelu(params, f"{name}.up{i}", mix_width, mix_width, 3, rng=rng, dtype=dtype)
                    for i in range(int(steps_x))]
        self.out_conv = Conv(params, f"{name}.out", mix_width, out_channels, 1, bias=True,
                             rng=rng, zero_init=True, dtype=dtype)

    def __call__(self, images: Tensor, batch: int, training: bool) -> Tensor:
        h = images
        for block in self.blocks:
            h = block(h, training)
        m, c, hf, wf = h.data.shape
        if m != batch * self.num_cameras:
            raise engine.ShapeError(f"{m} images vs batch {batch} x {self.num_cameras} cameras")
        h = engine.reshape(h, (batch, self.num_cameras * c, hf, wf))
        h = self.body(self.mix(h, training), training)
        for up in self.ups:
            h = up(engine.upsample_bilinear2x(h), training)
        return self.out_conv(h)


POSITIVE_WEIGHTS = {"vehicle": 1.0, "drivable": 1.0, "lane": 5.0}


def segmentation_loss(logits: Tensor, targets: Tensor, task: str) -> Tensor:
    if task not in POSITIVE_WEIGHTS:
        raise ValueError(f"unknown segmentation task {task!r}; expected one of {sorted(POSITIVE_WEIGHTS)}")
    return engine.weighted_bce_with_logits(logits, targets, POSITIVE_WEIGHTS[task])


def iou_metric(logits, targets, threshold: float = 0.5) -> float:
    """Intersection over union of thresholded probabilities; 1.0 if both empty."""
    ld = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    td = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if ld.shape != td.shape:
        raise engine.ShapeError(f"iou: logits {ld.shape} vs targets {td.shape}")
    pred = 1.0 / (1.0 + np.exp(-ld)) > threshold
    gt = td > 0.5
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)
