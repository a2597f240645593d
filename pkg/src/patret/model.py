"""Retrieval network: convnet backbone, GeM pooling, FC+BN neck, heads.

The backbone is a plain stack of 3x3 conv+ReLU stages (stride 2 on each
stage's first conv) sized by ``stage_channels`` and ``blocks_per_stage``.
Pooled features pass through an FC layer whose output is the retrieval
feature; a BatchNorm on top feeds the classification head.  Training
uses either plain softmax cross-entropy or the additive angular margin
head; retrieval never touches the head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from patret import tensor as T
from patret.tensor import ShapeError, Tensor

__all__ = [
    "BackboneConfig",
    "ModelConfig",
    "ConvBlock",
    "GemParams",
    "NeckParams",
    "HeadParams",
    "ModelParams",
    "init_params",
    "backbone_forward",
    "gem_pool",
    "neck_forward",
    "model_forward",
    "softmax_ce_loss",
    "arcface_loss",
    "compute_loss",
]

GEM_P_INIT = 3.0
GEM_P_MIN = 0.05
GEM_EPS = 1e-6


@dataclass
class BackboneConfig:
    stage_channels: list
    blocks_per_stage: int = 1
    input_size: int = 256

    def __post_init__(self):
        if len(self.stage_channels) < 2:
            raise ValueError("backbone needs at least 2 stages")
        if any(int(c) <= 0 for c in self.stage_channels):
            raise ValueError("stage channel counts must be positive")
        self.stage_channels = [int(c) for c in self.stage_channels]
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.input_size < 2 ** len(self.stage_channels):
            raise ValueError(
                f"input_size {self.input_size} underflows "
                f"{len(self.stage_channels)} stride-2 stages"
            )


@dataclass
class ModelConfig:
    backbone: BackboneConfig
    num_classes: int
    embed_dim: int = 512
    head_kind: str = "arcface"
    s: float = 20.0
    margin: float = 0.5

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if self.head_kind not in ("softmax", "arcface"):
            raise ValueError(f"unknown head_kind {self.head_kind!r}")
        if self.s <= 0:
            raise ValueError("scale s must be > 0")
        if not 0.0 <= self.margin < math.pi:
            raise ValueError("margin must be in [0, pi)")

    def to_dict(self) -> dict:
        return {
            "backbone": {
                "stage_channels": self.backbone.stage_channels,
                "blocks_per_stage": self.backbone.blocks_per_stage,
                "input_size": self.backbone.input_size,
            },
            "num_classes": self.num_classes,
            "embed_dim": self.embed_dim,
            "head_kind": self.head_kind,
            "s": self.s,
            "margin": self.margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig(**d["backbone"]),
            num_classes=int(d["num_classes"]),
            embed_dim=int(d["embed_dim"]),
            head_kind=d["head_kind"],
            s=float(d["s"]),
            margin=float(d["margin"]),
        )


@dataclass
class ConvBlock:
    weight: Tensor
    bias: Tensor
    stride: int


@dataclass
class GemParams:
    p: Tensor
    eps: float = GEM_EPS


@dataclass
class NeckParams:
    fc_weight: Tensor
    fc_bias: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray


@dataclass
class HeadParams:
    head_kind: str
    W: Tensor
    b: Optional[Tensor] = None
    s: float = 20.0
    margin: float = 0.5

    def __post_init__(self):
        if self.head_kind == "arcface" and self.b is not None:
            raise ValueError("arcface head takes no bias term")
        if self.s <= 0:
            raise ValueError("scale s must be > 0")
        if not 0.0 <= self.margin < math.pi:
            raise ValueError("margin must be in [0, pi)")


@dataclass
class ModelParams:
    config: ModelConfig
    blocks: list
    gem: GemParams
    neck: NeckParams
    head: HeadParams

    def named_parameters(self) -> list:
        out = []
        for i, blk in enumerate(self.blocks):
            out.append((f"backbone.{i}.weight", blk.weight))
            out.append((f"backbone.{i}.bias", blk.bias))
        out.append(("gem.p", self.gem.p))
        out.append(("neck.fc_weight", self.neck.fc_weight))
        out.append(("neck.fc_bias", self.neck.fc_bias))
        out.append(("neck.bn_gamma", self.neck.bn_gamma))
        out.append(("neck.bn_beta", self.neck.bn_beta))
        out.append(("head.W", self.head.W))
        if self.head.b is not None:
            out.append(("head.b", self.head.b))
        return out

    def named_buffers(self) -> list:
        return [
            ("neck.bn_running_mean", self.neck.bn_running_mean),
            ("neck.bn_running_var", self.neck.bn_running_var),
        ]

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in uniform weights, zero biases, GeM p=3, identity BN; seeded."""
    rng = np.random.default_rng(seed)
    blocks = []
    in_ch = 1
    for ch in config.backbone.stage_channels:
        for b in range(config.backbone.blocks_per_stage):
            stride = 2 if b == 0 else 1
            blocks.append(
                ConvBlock(
                    weight=_kaiming_uniform(rng, (ch, in_ch, 3, 3), in_ch * 9),
                    bias=_zeros(ch),
                    stride=stride,
                )
            )
            in_ch = ch
    n = config.backbone.stage_channels[-1]
    d = config.embed_dim
    gem = GemParams(p=Tensor(np.full(n, GEM_P_INIT, dtype=np.float32), requires_grad=True))
    neck = NeckParams(
        fc_weight=_kaiming_uniform(rng, (n, d), n),
        fc_bias=_zeros(d),
        bn_gamma=Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
        bn_beta=_zeros(d),
        bn_running_mean=np.zeros(d, dtype=np.float32),
        bn_running_var=np.ones(d, dtype=np.float32),
    )
    head = HeadParams(
        head_kind=config.head_kind,
        W=_kaiming_uniform(rng, (d, config.num_classes), d),
        b=_zeros(config.num_classes) if config.head_kind == "softmax" else None,
        s=config.s,
        margin=config.margin,
    )
    return ModelParams(config=config, blocks=blocks, gem=gem, neck=neck, head=head)


# ---------------------------------------------------------------------------
# forward passes


def backbone_forward(batch: Tensor, params: ModelParams) -> Tensor:
    """(N,1,H,W) -> ReLU feature maps (N,n,h,w); n = last stage width."""
    if batch.ndim != 4:
        raise ShapeError(f"backbone expects (N,1,H,W), got {batch.shape}")
    stages = len(params.config.backbone.stage_channels)
    if min(batch.shape[2], batch.shape[3]) < 2 ** stages:
        raise ShapeError(
            f"input {batch.shape[2]}x{batch.shape[3]} underflows {stages} "
            "stride-2 stages"
        )
    x = batch
    for blk in params.blocks:
        x = T.relu(T.conv2d(x, blk.weight, blk.bias, stride=blk.stride, pad=1))
    return x


def gem_pool(featmaps: Tensor, gem: GemParams) -> Tensor:
    """Generalized-mean pool: f_k = (mean(max(x, eps)^p_k))^(1/p_k) per channel.

    Computed as M * (mean((x/M)^p))^(1/p) with M the per-map spatial max,
    which is the same function but never overflows at large p.  M enters
    as a constant; since the expression is algebraically independent of
    M, holding it fixed in backward changes no gradient.
    """
    if featmaps.ndim != 4:
        raise ShapeError(f"gem_pool expects (N,n,h,w), got {featmaps.shape}")
    if featmaps.data.min() < 0:
        raise ValueError("gem_pool requires nonnegative feature maps")
    n_ch = featmaps.shape[1]
    if gem.p.shape != (n_ch,):
        raise ShapeError(f"gem p has shape {gem.p.shape}, expected ({n_ch},)")
    floored = T.clip(featmaps, gem.eps, np.inf)
    peak = floored.data.max(axis=(2, 3), keepdims=True)
    p_col = T.reshape(gem.p, (1, n_ch, 1, 1))
    powered = T.power(T.mul(floored, 1.0 / peak), p_col)
    pooled = T.mean(powered, axis=(2, 3))
    inv_p = T.reshape(T.power(gem.p, -1.0), (1, n_ch))
    return T.mul(T.power(pooled, inv_p), peak[:, :, 0, 0])


def neck_forward(pooled: Tensor, neck: NeckParams, mode: str) -> tuple:
    """FC then BN; returns (retrieval_feature, head_input).

    The retrieval feature is the FC output before BN.  Eval-mode callers
    must use only the first element.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    feat = T.add(T.matmul(pooled, neck.fc_weight), neck.fc_bias)
    head_input = T.batchnorm(
        feat,
        neck.bn_gamma,
        neck.bn_beta,
        neck.bn_running_mean,
        neck.bn_running_var,
        training=(mode == "train"),
    )
    return feat, head_input


def model_forward(params: ModelParams, batch: Tensor, mode: str) -> tuple:
    """Backbone -> GeM -> neck; returns (retrieval_feature, head_input)."""
    feats = backbone_forward(batch, params)
    pooled = gem_pool(feats, params.gem)
    return neck_forward(pooled, params.neck, mode)


# ---------------------------------------------------------------------------
# classification heads


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label out of range [0, {num_classes}): "
            f"min {labels.min()}, max {labels.max()}"
        )
    return labels.astype(np.int64)


def _cross_entropy_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target logit, max-stabilized.

    The rowwise max enters as a constant: log-sum-exp is exactly
    invariant to the shift, so values and gradients are unaffected.
    """
    n, c = logits.shape
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = T.sub(logits, shift)
    log_denom = T.log(T.sum(T.exp(z), axis=1, keepdims=True))
    onehot = np.zeros((n, c), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    target = T.sum(T.mul(z, Tensor(onehot)), axis=1, keepdims=True)
    return T.mean(T.sub(log_denom, target))


def softmax_ce_loss(head_input: Tensor, labels, head: HeadParams) -> Tensor:
    """Cross-entropy over affine logits W^T x + b, averaged over the batch."""
    if head.head_kind != "softmax":
        raise ValueError(f"softmax_ce_loss on a {head.head_kind!r} head")
    labels = _check_labels(labels, head.W.shape[1])
    logits = T.add(T.matmul(head_input, head.W), head.b)
    return _cross_entropy_from_logits(logits, labels)


def arcface_loss(head_input: Tensor, labels, head: HeadParams) -> Tensor:
    """Additive angular margin loss.

    Features and classifier columns are L2-normalized; the target-class
    logit becomes s*cos(theta_y + margin) via the exact expansion
    cos(theta)cos(m) - sin(theta)sin(m), which stays the literal formula
    for any theta in [0, pi] (no easy-margin special case).  The arccos
    argument is clamped to [-1+1e-7, 1-1e-7].
    """
    if head.head_kind != "arcface":
        raise ValueError(f"arcface_loss on a {head.head_kind!r} head")
    labels = _check_labels(labels, head.W.shape[1])
    n, c = head_input.shape[0], head.W.shape[1]
    xhat = T.l2_normalize(head_input, axis=1)
    what = T.l2_normalize(head.W, axis=0)
    cos = T.matmul(xhat, what)
    cos_clamped = T.clip(cos, -1.0 + 1e-7, 1.0 - 1e-7)
    sin = T.power(T.sub(1.0, T.mul(cos_clamped, cos_clamped)), 0.5)
    cos_m, sin_m = math.cos(head.margin), math.sin(head.margin)
    phi = T.sub(T.mul(cos_clamped, cos_m), T.mul(sin, sin_m))
    onehot = np.zeros((n, c), dtype=head_input.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    mixed = T.add(T.mul(phi, Tensor(onehot)), T.mul(cos, Tensor(1.0 - onehot)))
    logits = T.mul(mixed, head.s)
    return _cross_entropy_from_logits(logits, labels)


def compute_loss(params: ModelParams, batch: Tensor, labels, mode: str = "train") -> Tensor:
    """Full forward to the configured head's scalar training loss."""
    _, head_input = model_forward(params, batch, mode)
    if params.head.head_kind == "softmax":
        return softmax_ce_loss(head_input, labels, params.head)
    return arcface_loss(head_input, labels, params.head)
