"""Single-stage classification training with AdamW and checkpointing.

One optimizer, one loss, no schedule: constant learning rate AdamW
(beta1=0.9, beta2=0.999, eps=1e-8) with decoupled weight decay applied
to every trainable tensor.  Each iteration samples a batch without
replacement, augments, runs forward/backward, and steps; the loop
periodically embeds the val split and records leave-one-out mAP,
keeping the best-scoring checkpoint alongside the final one.

Checkpoints are self-describing binary files (magic ``PRKT``): a JSON
header carries the model architecture and eval-time sizing, followed by
named little-endian float32 sections for parameters and BN buffers.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from patret.augment import AugmentPolicy, apply_policy
from patret.dataset import DatasetManifest, load_image, load_manifest
from patret.evaluation import MetricsReport, evaluate
from patret.model import (
    GEM_P_MIN,
    BackboneConfig,
    ModelConfig,
    ModelParams,
    compute_loss,
    init_params,
)
from patret.retrieval import EmbeddingStore, embed_images
from patret.tensor import Tensor

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainResult",
    "CheckpointBundle",
    "CheckpointError",
    "toy_train_config",
    "init_optimizer",
    "adamw_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

PRKT_MAGIC = b"PRKT"
PRKT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class CheckpointError(ValueError):
    """Checkpoint file is malformed, truncated, or incompatible."""


@dataclass
class TrainConfig:
    """Everything one experiment needs; serializes to/from JSON."""

    manifest_path: str
    policy: AugmentPolicy
    backbone: BackboneConfig
    embed_dim: int = 512
    head_kind: str = "arcface"
    s: float = 20.0
    margin: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 128
    max_iters: int = 20000
    seed: int = 0
    checkpoint_path: str = "model.prkt"
    log_path: str = "train_log.csv"
    log_every: int = 50
    eval_every: int = 500

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (BatchNorm needs batch stats)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.log_every < 1 or self.eval_every < 1:
            raise ValueError("log_every and eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = {
            "manifest_path": self.manifest_path,
            "policy": {
                "crop_size": self.policy.crop_size,
                "translate_max": self.policy.translate_max,
                "hflip_prob": self.policy.hflip_prob,
                "pad_value": self.policy.pad_value,
                "eval_size": self.policy.eval_size,
                "ablation_random_resized_crop": self.policy.ablation_random_resized_crop,
                "ablation_rrc_scale": list(self.policy.ablation_rrc_scale),
                "ablation_random_rotation_deg": self.policy.ablation_random_rotation_deg,
            },
            "backbone": {
                "stage_channels": self.backbone.stage_channels,
                "blocks_per_stage": self.backbone.blocks_per_stage,
                "input_size": self.backbone.input_size,
            },
        }
        for key in (
            "embed_dim", "head_kind", "s", "margin", "lr", "weight_decay",
            "batch_size", "max_iters", "seed", "checkpoint_path", "log_path",
            "log_every", "eval_every",
        ):
            d[key] = getattr(self, key)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        pol = dict(d.pop("policy"))
        if "ablation_rrc_scale" in pol:
            pol["ablation_rrc_scale"] = tuple(pol["ablation_rrc_scale"])
        d["policy"] = AugmentPolicy(**pol)
        d["backbone"] = BackboneConfig(**d.pop("backbone"))
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValueError(f"bad train config {path}: {e}") from e

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            backbone=replace(self.backbone),
            num_classes=num_classes,
            embed_dim=self.embed_dim,
            head_kind=self.head_kind,
            s=self.s,
            margin=self.margin,
        )


def toy_train_config(manifest_path, **overrides) -> TrainConfig:
    """Desk-scale preset: 64 px inputs, small 4-stage backbone, 2000 iters."""
    base = dict(
        manifest_path=str(manifest_path),
        policy=AugmentPolicy(crop_size=56, translate_max=4, eval_size=64),
        backbone=BackboneConfig([16, 32, 64, 128], input_size=64),
        batch_size=64,
        max_iters=2000,
        eval_every=500,
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def init_optimizer(params: ModelParams) -> OptimizerState:
    named = params.named_parameters()
    return OptimizerState(
        m={name: np.zeros_like(p.data) for name, p in named},
        v={name: np.zeros_like(p.data) for name, p in named},
    )


def adamw_step(params: ModelParams, state: OptimizerState, lr: float, wd: float) -> None:
    """In-place update: theta -= lr*mhat/(sqrt(vhat)+eps) + lr*wd*theta."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.named_parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        denom = np.sqrt(v)
        denom /= np.float32(np.sqrt(bc2))
        denom += np.float32(state.eps)
        np.divide(m, denom, out=denom)
        denom *= np.float32(lr / bc1)
        denom += np.float32(lr * wd) * p.data
        p.data -= denom
    np.maximum(params.gem.p.data, GEM_P_MIN, out=params.gem.p.data)


# ---------------------------------------------------------------------------
# checkpoint format


@dataclass
class CheckpointBundle:
    params: ModelParams
    eval_size: int
    pad_value: int
    meta: dict = field(default_factory=dict)
    fingerprint: Optional[str] = None


def _write_section(f, name: str, arr: np.ndarray) -> None:
    payload = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode()
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<B", payload.ndim))
    f.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
    f.write(payload.tobytes())


def save_checkpoint(
    params: ModelParams,
    path,
    eval_size: int,
    pad_value: int = 255,
    meta: Optional[dict] = None,
) -> Path:
    """Self-describing binary checkpoint; see module docstring for layout."""
    path = Path(path)
    sections = params.named_parameters() + [
        (name, Tensor(buf)) for name, buf in params.named_buffers()
    ]
    header = json.dumps(
        {
            "model": params.config.to_dict(),
            "eval_size": int(eval_size),
            "pad_value": int(pad_value),
            "meta": meta or {},
        }
    ).encode()
    buf = io.BytesIO()
    buf.write(PRKT_MAGIC)
    buf.write(struct.pack("<I", PRKT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(sections)))
    for name, tensor in sections:
        _write_section(buf, name, tensor.data)
    path.write_bytes(buf.getvalue())
    return path


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expect_embed_dim: Optional[int] = None) -> CheckpointBundle:
    path = Path(path)
    blob = path.read_bytes()
    r = _Reader(blob, path)
    if r.take(4) != PRKT_MAGIC:
        raise CheckpointError(f"{path}: not a PRKT checkpoint")
    version = r.u32()
    if version != PRKT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (expected {PRKT_VERSION})"
        )
    try:
        header = json.loads(r.take(r.u32()).decode())
        config = ModelConfig.from_dict(header["model"])
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: bad checkpoint header: {e}") from e
    if expect_embed_dim is not None and config.embed_dim != expect_embed_dim:
        raise CheckpointError(
            f"{path}: checkpoint embed_dim {config.embed_dim} does not match "
            f"expected {expect_embed_dim}"
        )
    sections = {}
    for _ in range(r.u32()):
        name = r.take(struct.unpack("<H", r.take(2))[0]).decode()
        ndim = r.take(1)[0]
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        sections[name] = data.astype(np.float32)

    params = init_params(config, seed=0)
    expected = dict(params.named_parameters())
    for name, tensor in expected.items():
        if name not in sections:
            raise CheckpointError(f"{path}: missing parameter section {name!r}")
        if sections[name].shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: section {name!r} has shape {sections[name].shape}, "
                f"architecture wants {tensor.data.shape}"
            )
        tensor.data = sections[name].copy()
    params.neck.bn_running_mean = sections["neck.bn_running_mean"].copy()
    params.neck.bn_running_var = sections["neck.bn_running_var"].copy()
    return CheckpointBundle(
        params=params,
        eval_size=int(header["eval_size"]),
        pad_value=int(header["pad_value"]),
        meta=header.get("meta", {}),
        fingerprint=hashlib.sha256(blob).hexdigest(),
    )


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    checkpoint_path: Path
    best_checkpoint_path: Optional[Path]
    log_path: Path
    losses: list
    val_reports: dict
    best_val_map: Optional[float]


def _val_report(
    params: ModelParams, manifest: DatasetManifest, policy: AugmentPolicy
) -> Optional[MetricsReport]:
    entries = manifest.split_entries("val")
    if not entries:
        return None
    eval_policy = AugmentPolicy(
        crop_size=policy.eval_size,
        translate_max=0,
        hflip_prob=0.0,
        pad_value=policy.pad_value,
        eval_size=policy.eval_size,
    )
    drawings = [load_image(manifest, e) for e in entries]
    vectors = embed_images(params, drawings, eval_policy)
    store = EmbeddingStore(
        vectors=vectors,
        labels=[e.patent_id for e in entries],
        refs=[e.image_path for e in entries],
    )
    return evaluate(store)


def train(config: TrainConfig, progress=None) -> TrainResult:
    """Run the full loop; returns trained params plus artifact paths.

    ``progress`` is an optional callable ``(iteration, loss)`` invoked at
    every logging point (the CLI uses it to print).
    """
    manifest = load_manifest(config.manifest_path)
    train_entries = manifest.split_entries("train")
    if len(train_entries) < config.batch_size:
        raise ValueError(
            f"train split has {len(train_entries)} images but batch_size is "
            f"{config.batch_size}; use a smaller batch_size"
        )
    classes = sorted({e.patent_id for e in train_entries})
    class_index = {pid: i for i, pid in enumerate(classes)}
    labels = np.array([class_index[e.patent_id] for e in train_entries], dtype=np.int64)
    drawings = [load_image(manifest, e) for e in train_entries]

    params = init_params(config.model_config(len(classes)), config.seed)
    state = init_optimizer(params)
    rng = np.random.default_rng(config.seed)

    ckpt_path = Path(config.checkpoint_path)
    best_path = ckpt_path.with_name(ckpt_path.name + ".best")
    log_rows = []
    losses = []
    val_reports = {}
    best_map = None
    wrote_best = False

    for it in range(1, config.max_iters + 1):
        idx = rng.choice(len(train_entries), size=config.batch_size, replace=False)
        batch = np.stack(
            [apply_policy(drawings[i], config.policy, rng, train=True).data for i in idx]
        )
        params.zero_grad()
        loss = compute_loss(params, Tensor(batch), labels[idx], "train")
        loss_value = loss.item()
        loss.backward()
        adamw_step(params, state, config.lr, config.weight_decay)
        losses.append(loss_value)

        at_log = it % config.log_every == 0 or it == config.max_iters
        at_eval = it % config.eval_every == 0 or it == config.max_iters
        row = {"iter": it, "loss": f"{loss_value:.6f}", "val_mAP": "", "val_rank1": ""}
        if at_eval:
            report = _val_report(params, manifest, config.policy)
            if report is not None:
                val_reports[it] = report
                row["val_mAP"] = f"{report.mean_ap:.6f}"
                row["val_rank1"] = f"{report.rank_accuracy[1]:.6f}"
                if best_map is None or report.mean_ap > best_map:
                    best_map = report.mean_ap
                    save_checkpoint(
                        params,
                        best_path,
                        eval_size=config.policy.eval_size,
                        pad_value=config.policy.pad_value,
                        meta={"iter": it, "val_mAP": report.mean_ap},
                    )
                    wrote_best = True
        if at_log or at_eval:
            log_rows.append(row)
            if progress is not None:
                progress(it, loss_value)

    save_checkpoint(
        params,
        ckpt_path,
        eval_size=config.policy.eval_size,
        pad_value=config.policy.pad_value,
        meta={"iter": config.max_iters, "val_mAP": best_map},
    )
    log_path = Path(config.log_path)
    with open(log_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["iter", "loss", "val_mAP", "val_rank1"])
        writer.writeheader()
        writer.writerows(log_rows)

    return TrainResult(
        params=params,
        checkpoint_path=ckpt_path,
        best_checkpoint_path=best_path if wrote_best else None,
        log_path=log_path,
        losses=losses,
        val_reports=val_reports,
        best_val_map=best_map,
    )
