"""Experiment orchestration: dataset preparation, the two training phases,
evaluation, and CSV/checkpoint emission."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .config import train_config
from .errors import DataError
from .geometry import knn_indices, voxel_downsample
from .metrics import RunReport, evaluate
from .pcio import (
    SceneSet,
    generate_synthetic_scene,
    load_scene_set,
    subsample_labels,
    write_scene_set,
)
from .training import (
    TrainConfig,
    TrainState,
    attach_head,
    finetune_grads,
    init_state,
    load_checkpoint,
    poly_lr,
    pretrain_grads,
    save_checkpoint,
    sgd_momentum_step,
)


def make_synthetic_dataset(
    seed: int, num_scenes: int, points_per_scene: int, num_classes: int,
    split: str = "train",
) -> SceneSet:
    """Deterministic set of fully labeled synthetic scenes."""
    base = seed * 1_000_003 + (0 if split == "train" else 500_000)
    scenes = [
        generate_synthetic_scene(base + i, points_per_scene, num_classes)
        for i in range(num_scenes)
    ]
    return SceneSet(scenes, split=split,
                    scene_ids=[f"{split}{i:04d}" for i in range(num_scenes)])


class VoxelizedScenes:
    """Per-scene voxelized clouds with cached kNN graphs for training."""

    def __init__(self, scenes: SceneSet, cfg: TrainConfig):
        self.clouds = []
        self.labels = []
        self.mappings = []
        self.neighbors = []
        for cloud, labels in scenes.scenes:
            voxels, merged, mapping = voxel_downsample(cloud, labels,
                                                       cfg.voxel_size)
            self.clouds.append(voxels)
            self.labels.append(merged)
            self.mappings.append(mapping)
            self.neighbors.append(knn_indices(voxels.positions, cfg.knn))

    def __len__(self) -> int:
        return len(self.clouds)


def _accumulated_step(state: TrainState, cfg: TrainConfig, compute) -> float | None:
    """Run `compute(scene_index)` over a batch, average grads, update once."""
    total: dict[str, np.ndarray] | None = None
    losses = []
    for _ in range(cfg.batch_size):
        result = compute()
        if result is None:
            continue
        loss, grads = result
        losses.append(loss)
        if total is None:
            total = grads
        else:
            for name in total:
                total[name] += grads[name]
    if total is None:
        return None
    scale = 1.0 / len(losses)
    for name in total:
        total[name] *= scale
    lr = poly_lr(state.step, cfg)
    sgd_momentum_step(state.param_dict(), total, state.momentum_buffers, lr,
                      cfg.momentum)
    state.step += 1
    return float(np.mean(losses))


def pretrain(
    state: TrainState, data: VoxelizedScenes, cfg: TrainConfig
) -> list[tuple[int, float, float]]:
    """Run cfg.iterations self-supervised steps; returns (step, lr, loss)."""
    trace = []
    while state.step < cfg.iterations:
        step = state.step
        lr = poly_lr(step, cfg)

        def compute():
            i = int(state.rng.integers(len(data)))
            return pretrain_grads(state, data.clouds[i], cfg, data.neighbors[i])

        loss = _accumulated_step(state, cfg, compute)
        trace.append((step, lr, loss))
    return trace


def finetune(
    state: TrainState,
    data: VoxelizedScenes,
    cfg: TrainConfig,
) -> list[tuple[int, float, float]]:
    """Run cfg.iterations supervised steps; scenes without labeled voxels
    are skipped and counted."""
    if not any(lbl.present_mask.any() for lbl in data.labels):
        raise DataError("no scene carries any labeled voxel")
    trace = []
    while state.step < cfg.iterations:
        step = state.step
        lr = poly_lr(step, cfg)

        def compute():
            i = int(state.rng.integers(len(data)))
            return finetune_grads(state, data.clouds[i], data.labels[i], cfg,
                                  data.neighbors[i])

        loss = _accumulated_step(state, cfg, compute)
        if loss is not None:
            trace.append((step, lr, loss))
    return trace


def sparsify_scenes(scenes: SceneSet, k: int, seed: int) -> SceneSet:
    """Replace every scene's labels with a k-point uniform subsample."""
    sparse = [
        (cloud, subsample_labels(labels, k, seed * 7919 + i))
        for i, (cloud, labels) in enumerate(scenes.scenes)
    ]
    return SceneSet(sparse, split=scenes.split, scene_ids=list(scenes.scene_ids))


def write_trace_csv(trace, path: Path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in trace:
            fh.write(f"{step},{lr:.17g},{loss:.17g}\n")


def write_report_csv(report: RunReport, path: Path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("class,iou\n")
        for cls, iou in enumerate(report.per_class_iou):
            fh.write(f"{cls},{'' if iou is None else format(iou, '.17g')}\n")
        fh.write(f"mean,{report.mean_iou:.17g}\n")


def _load_or_generate(values: dict) -> tuple[SceneSet, SceneSet]:
    if values["data_dir"]:
        root = Path(values["data_dir"])
        train = load_scene_set(root / "train", values["num_classes"], "train")
        val = load_scene_set(root / "val", values["num_classes"], "val")
        return train, val
    train = make_synthetic_dataset(
        values["seed"], values["num_scenes"], values["points_per_scene"],
        values["num_classes"], "train",
    )
    val = make_synthetic_dataset(
        values["seed"], values["val_scenes"], values["points_per_scene"],
        values["num_classes"], "val",
    )
    return train, val


def generate_dataset(values: dict, out_dir: Path) -> None:
    """`synth` subcommand: write train/val manifests to disk."""
    train, val = _load_or_generate({**values, "data_dir": ""})
    write_scene_set(train, out_dir / "train")
    write_scene_set(val, out_dir / "val")


def run_experiment(values: dict, out_dir: str | Path) -> RunReport:
    """Execute pretrain and/or finetune per config, evaluate, emit reports.

    Writes trace.csv (per-phase loss traces), report.csv (per-class and
    mean IoU), and checkpoint files under out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    train_scenes, val_scenes = _load_or_generate(values)

    trace = []
    state = None
    if values["init_checkpoint"]:
        state, _ = load_checkpoint(values["init_checkpoint"])

    if values["pretrain"] and not values["init_checkpoint"]:
        pre_cfg = train_config(values, "pretrain")
        pre_data = VoxelizedScenes(train_scenes, pre_cfg)
        state = init_state(pre_cfg)
        pre_trace = pretrain(state, pre_data, pre_cfg)
        trace.extend(pre_trace)
        write_trace_csv(pre_trace, out / "pretrain_trace.csv")
        save_checkpoint(state, pre_cfg, out / "pretrain.ckpt")

    fine_cfg = train_config(values, "finetune")
    if values["finetune"]:
        sparse = sparsify_scenes(train_scenes, values["labels_per_scene"],
                                 values["seed"])
        fine_data = VoxelizedScenes(sparse, fine_cfg)
        if state is None:
            state = init_state(fine_cfg, with_head=True)
        elif state.head is None:
            attach_head(state, fine_cfg)
        else:
            state.step = 0
        fine_trace = finetune(state, fine_data, fine_cfg)
        trace.extend(fine_trace)
        write_trace_csv(fine_trace, out / "finetune_trace.csv")
        save_checkpoint(state, fine_cfg, out / "final.ckpt")
    if state is None:
        raise DataError("config enables neither pretraining nor fine-tuning "
                        "and provides no init_checkpoint")
    if state.head is None:
        raise DataError("no classification head trained; cannot evaluate")

    report = evaluate(state, val_scenes, fine_cfg)
    report.config = dict(values)
    report.config["hidden_widths"] = list(values["hidden_widths"])
    report.loss_trace = trace
    report.wall_time = time.perf_counter() - started
    write_trace_csv(trace, out / "trace.csv")
    write_report_csv(report, out / "report.csv")
    return report
