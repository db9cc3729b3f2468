"""Pretraining and fine-tuning loops, SGD with momentum, the polynomial
learning-rate schedule, and binary checkpoint persistence."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError, NumericError
from .geometry import farthest_point_sampling, knn_indices, sample_transform, \
    apply_transform
from .nncore import (
    EncoderParams,
    encoder_backward,
    encoder_forward,
    encoder_params_dict,
    init_encoder,
)
from .pcio import PointCloud, SparseLabelSet
from .vbloss import VbConfig, cross_correlation, vb_loss_backward

CHECKPOINT_MAGIC = b"VPBK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Hyperparameters for one training phase.

    Large-scale settings (20000/30000 iterations, H = 1024, D up to 1024,
    2 cm voxels, lr 0.1 with momentum 0.99) are valid values; the defaults
    here are desk-scale.
    """

    phase: str = "pretrain"            # pretrain | finetune
    iterations: int = 2000
    batch_size: int = 1
    lr0: float = 0.1
    momentum: float = 0.99
    poly_power: float = 0.9
    off_diagonal_weight: float = 1.0 / 64.0
    fps_count: int = 256               # H
    feature_dim: int = 32              # D
    hidden_widths: tuple[int, ...] = (64, 64)
    knn: int = 16
    seed: int = 0
    voxel_size: float = 0.05
    labels_per_scene: int = 20
    num_classes: int = 4
    squared_norm: bool = False

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise DataError(f"unknown phase '{self.phase}'")
        if self.iterations < 1 or self.batch_size < 1:
            raise DataError("iterations and batch_size must be >= 1")
        if self.lr0 <= 0 or not 0.0 <= self.momentum < 1.0:
            raise DataError("need lr0 > 0 and momentum in [0, 1)")
        if self.fps_count < 2:
            raise DataError("fps_count must be >= 2")

    def vb_config(self) -> VbConfig:
        return VbConfig(
            off_diagonal_weight=self.off_diagonal_weight,
            squared_norm=self.squared_norm,
        )


@dataclass
class HeadParams:
    """Affine classification head mapping D features to S class logits."""

    weight: np.ndarray  # (D, S)
    bias: np.ndarray    # (S,)

    def copy(self) -> "HeadParams":
        return HeadParams(self.weight.copy(), self.bias.copy())


@dataclass
class TrainState:
    """Everything a run owns: parameters, momentum buffers, step, RNG."""

    encoder: EncoderParams
    head: HeadParams | None
    momentum_buffers: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator
    skipped_scenes: int = 0

    def param_dict(self) -> dict[str, np.ndarray]:
        params = encoder_params_dict(self.encoder)
        if self.head is not None:
            params["head.w"] = self.head.weight
            params["head.b"] = self.head.bias
        return params


def init_state(cfg: TrainConfig, with_head: bool = False) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    encoder = init_encoder(rng, cfg.feature_dim, cfg.hidden_widths, cfg.knn)
    head = None
    if with_head:
        head = HeadParams(
            rng.normal(0.0, np.sqrt(1.0 / cfg.feature_dim),
                       size=(cfg.feature_dim, cfg.num_classes)),
            np.zeros(cfg.num_classes),
        )
    return TrainState(encoder, head, {}, 0, rng)


def attach_head(state: TrainState, cfg: TrainConfig) -> None:
    """Add a fresh classification head (used when fine-tuning a pretrained
    encoder) and drop stale momentum buffers."""
    state.head = HeadParams(
        state.rng.normal(0.0, np.sqrt(1.0 / cfg.feature_dim),
                         size=(cfg.feature_dim, cfg.num_classes)),
        np.zeros(cfg.num_classes),
    )
    state.momentum_buffers = {}
    state.step = 0
    state.skipped_scenes = 0


def poly_lr(step: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - step/K)^p polynomial decay."""
    if not 0 <= step <= cfg.iterations:
        raise DataError(f"step {step} outside [0, {cfg.iterations}]")
    return cfg.lr0 * (1.0 - step / cfg.iterations) ** cfg.poly_power


def sgd_momentum_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """Heavy-ball update in place: buf = m*buf + g; p -= lr*buf."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DataError(f"gradient shape mismatch for {name}")
        buf = buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
            buffers[name] = buf
        buf *= momentum
        buf += g
        p -= lr * buf


def _apply_update(state: TrainState, grads: dict[str, np.ndarray],
                  cfg: TrainConfig) -> None:
    lr = poly_lr(state.step, cfg)
    sgd_momentum_step(state.param_dict(), grads, state.momentum_buffers,
                      lr, cfg.momentum)
    state.step += 1


def pretrain_grads(
    state: TrainState,
    cloud: PointCloud,
    cfg: TrainConfig,
    neighbors: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for one cloud, without updating.

    Two augmented views share one farthest-point index set computed on the
    untransformed cloud, so correlated rows describe the same points.
    """
    m = len(cloud)
    h = min(cfg.fps_count, m)
    t_p = sample_transform(state.rng, m)
    t_q = sample_transform(state.rng, m)
    start = int(state.rng.integers(m))
    view_p = apply_transform(cloud, t_p)
    view_q = apply_transform(cloud, t_q)
    if neighbors is None:
        neighbors = knn_indices(cloud.positions, cfg.knn)
    feats_p, tape_p = encoder_forward(state.encoder, view_p, neighbors)
    feats_q, tape_q = encoder_forward(state.encoder, view_q, neighbors)
    sample = farthest_point_sampling(cloud, h, start).indices
    loss, grad_p, grad_q = vb_loss_backward(
        feats_p[sample], feats_q[sample], cfg.vb_config()
    )
    if not np.isfinite(loss):
        z = cross_correlation(feats_p[sample], feats_q[sample]).z
        raise NumericError(
            f"non-finite pretrain loss at step {state.step}; "
            f"cross-correlation extrema [{np.nanmin(z)}, {np.nanmax(z)}]"
        )
    upstream_p = np.zeros_like(feats_p)
    upstream_p[sample] = grad_p
    upstream_q = np.zeros_like(feats_q)
    upstream_q[sample] = grad_q
    grads = encoder_backward(tape_p, upstream_p).grads
    for name, g in encoder_backward(tape_q, upstream_q).grads.items():
        grads[name] += g
    if state.head is not None:
        grads["head.w"] = np.zeros_like(state.head.weight)
        grads["head.b"] = np.zeros_like(state.head.bias)
    return loss, grads


def pretrain_step(
    state: TrainState,
    cloud: PointCloud,
    cfg: TrainConfig,
    neighbors: np.ndarray | None = None,
) -> float:
    """One self-supervised optimizer step on a (voxel-downsampled) cloud."""
    loss, grads = pretrain_grads(state, cloud, cfg, neighbors)
    _apply_update(state, grads, cfg)
    return loss


def masked_cross_entropy(
    logits: np.ndarray, labels: SparseLabelSet
) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy averaged over labeled rows.

    Unlabeled rows contribute nothing to the loss or gradient; the
    log-sum-exp is max-shifted for stability.
    """
    if logits.shape != (len(labels), labels.num_classes):
        raise DataError(
            f"logits shape {logits.shape} does not match "
            f"({len(labels)}, {labels.num_classes})"
        )
    rows = np.flatnonzero(labels.present_mask)
    if len(rows) == 0:
        raise DataError("no labeled points")
    sub = logits[rows]
    shifted = sub - sub.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - log_z
    targets = labels.labels[rows]
    loss = -float(np.mean(log_probs[np.arange(len(rows)), targets]))
    grad_rows = np.exp(log_probs)
    grad_rows[np.arange(len(rows)), targets] -= 1.0
    grad = np.zeros_like(logits)
    grad[rows] = grad_rows / len(rows)
    return loss, grad


def finetune_grads(
    state: TrainState,
    cloud: PointCloud,
    labels: SparseLabelSet,
    cfg: TrainConfig,
    neighbors: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]] | None:
    """Loss and gradients for one voxelized scene, or None when the scene
    has no labeled voxels (the skip is counted)."""
    if state.head is None:
        raise DataError("finetune requires a classification head")
    if not labels.present_mask.any():
        state.skipped_scenes += 1
        return None
    features, tape = encoder_forward(state.encoder, cloud, neighbors)
    logits = features @ state.head.weight + state.head.bias
    loss, dlogits = masked_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite fine-tune loss at step {state.step}")
    grads = encoder_backward(tape, dlogits @ state.head.weight.T).grads
    grads["head.w"] = features.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    return loss, grads


def finetune_step(
    state: TrainState,
    cloud: PointCloud,
    labels: SparseLabelSet,
    cfg: TrainConfig,
    neighbors: np.ndarray | None = None,
) -> float | None:
    """One pointly-supervised optimizer step; returns None on a skipped scene."""
    result = finetune_grads(state, cloud, labels, cfg, neighbors)
    if result is None:
        return None
    loss, grads = result
    _apply_update(state, grads, cfg)
    return loss


# ---------------------------------------------------------------------------
# checkpoint format: magic "VPBK", u32 version, length-prefixed UTF-8 JSON
# metadata, u32 tensor count, per tensor (length-prefixed name, u32 ndim,
# u64 dims, float64 little-endian data), trailing CRC32 of all prior bytes.
# ---------------------------------------------------------------------------


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = dict(state.param_dict())
    for name, buf in state.momentum_buffers.items():
        tensors[f"momentum.{name}"] = buf
    return tensors


def save_checkpoint(state: TrainState, cfg: TrainConfig, path: str | Path) -> None:
    meta = {
        "config": {**asdict(cfg), "hidden_widths": list(cfg.hidden_widths)},
        "step": state.step,
        "skipped_scenes": state.skipped_scenes,
        "rng_state": state.rng.bit_generator.state,
        "has_head": state.head is not None,
        "encoder_knn": state.encoder.knn,
        "encoder_layers": len(state.encoder.weights),
    }
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    tensors = _state_tensors(state)
    blob += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        tensor = np.ascontiguousarray(tensors[name], dtype=np.float64)
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<I", tensor.ndim)
        for dim in tensor.shape:
            blob += struct.pack("<Q", dim)
        blob += tensor.astype("<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointError(f"{path}: checksum failure")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    (meta_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(
            raw, dtype="<f8", count=size, offset=pos
        ).reshape(shape).copy()
        pos += 8 * size

    cfg_dict = dict(meta["config"])
    cfg_dict["hidden_widths"] = tuple(cfg_dict["hidden_widths"])
    cfg = TrainConfig(**cfg_dict)
    layers = meta["encoder_layers"]
    encoder = EncoderParams(
        [tensors[f"enc.w{i}"] for i in range(layers)],
        [tensors[f"enc.b{i}"] for i in range(layers)],
        meta["encoder_knn"],
    )
    head = None
    if meta["has_head"]:
        head = HeadParams(tensors["head.w"], tensors["head.b"])
    buffers = {
        name[len("momentum."):]: tensor
        for name, tensor in tensors.items()
        if name.startswith("momentum.")
    }
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(encoder, head, buffers, meta["step"], rng,
                       meta["skipped_scenes"])
    return state, cfg
