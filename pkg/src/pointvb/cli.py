"""Command-line interface.

Subcommands: synth, pretrain, finetune, eval, gradcheck, run. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import default_config, load_config, train_config
from .errors import DataError, NumericError, UsageError
from .experiment import (
    VoxelizedScenes,
    _load_or_generate,
    finetune,
    generate_dataset,
    pretrain,
    run_experiment,
    sparsify_scenes,
    write_report_csv,
    write_trace_csv,
)
from .metrics import evaluate
from .nncore import encoder_forward, encoder_backward, gradient_check
from .pcio import generate_synthetic_scene
from .training import (
    attach_head,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from .vbloss import vb_loss_backward


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pointvb", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "pretrain", "finetune", "eval", "gradcheck", "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="experiment config file (key = value lines)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", type=Path, default=None,
                       help="override the config output directory")
        p.add_argument("--deterministic", action="store_true", default=None,
                       help="force fully serialized deterministic execution")
        if name in ("finetune", "eval"):
            p.add_argument("--checkpoint", type=Path, default=None,
                           help="checkpoint to start from / evaluate")
    return parser


def _values(args) -> dict:
    values = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["out_dir"] = str(args.out)
    if args.deterministic is not None:
        values["deterministic"] = args.deterministic
    return values


def _cmd_synth(args) -> int:
    values = _values(args)
    out = Path(values["data_dir"] or Path(values["out_dir"]) / "data")
    generate_dataset(values, out)
    print(f"wrote synthetic dataset to {out}")
    return 0


def _cmd_pretrain(args) -> int:
    values = _values(args)
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg = train_config(values, "pretrain")
    train_scenes, _ = _load_or_generate(values)
    data = VoxelizedScenes(train_scenes, cfg)
    state = init_state(cfg)
    trace = pretrain(state, data, cfg)
    write_trace_csv(trace, out / "pretrain_trace.csv")
    save_checkpoint(state, cfg, out / "pretrain.ckpt")
    print(f"pretrained {cfg.iterations} steps; final loss "
          f"{trace[-1][2]:.6f}; checkpoint at {out / 'pretrain.ckpt'}")
    return 0


def _cmd_finetune(args) -> int:
    values = _values(args)
    if args.checkpoint is not None:
        values["init_checkpoint"] = str(args.checkpoint)
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg = train_config(values, "finetune")
    train_scenes, _ = _load_or_generate(values)
    sparse = sparsify_scenes(train_scenes, values["labels_per_scene"],
                             values["seed"])
    data = VoxelizedScenes(sparse, cfg)
    if values["init_checkpoint"]:
        state, _ = load_checkpoint(values["init_checkpoint"])
        if state.head is None:
            attach_head(state, cfg)
        else:
            state.step = 0
    else:
        state = init_state(cfg, with_head=True)
    trace = finetune(state, data, cfg)
    write_trace_csv(trace, out / "finetune_trace.csv")
    save_checkpoint(state, cfg, out / "final.ckpt")
    print(f"fine-tuned {cfg.iterations} steps; final loss "
          f"{trace[-1][2]:.6f}; checkpoint at {out / 'final.ckpt'}")
    return 0


def _cmd_eval(args) -> int:
    values = _values(args)
    if args.checkpoint is None:
        raise UsageError("eval requires --checkpoint")
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    state, _ = load_checkpoint(args.checkpoint)
    cfg = train_config(values, "finetune")
    _, val_scenes = _load_or_generate(values)
    report = evaluate(state, val_scenes, cfg)
    write_report_csv(report, out / "report.csv")
    print(f"mIoU {report.mean_iou:.4f} over {len(val_scenes)} scenes; "
          f"report at {out / 'report.csv'}")
    return 0


def _cmd_gradcheck(args) -> int:
    """Check the full pretrain loss gradient on a tiny random instance."""
    values = _values(args)
    seed = values["seed"]
    cfg = train_config(values, "pretrain")
    cfg.feature_dim, cfg.hidden_widths, cfg.knn, cfg.fps_count = 8, (8,), 4, 16
    cloud, _ = generate_synthetic_scene(seed, 32, 2)
    state = init_state(cfg)
    rng = np.random.default_rng(seed)

    from .geometry import farthest_point_sampling

    sample = farthest_point_sampling(cloud, cfg.fps_count, 0).indices
    other, _ = generate_synthetic_scene(seed + 1, 32, 2)

    def loss_fn(params):
        enc = state.encoder.copy()
        enc.weights = [params[f"enc.w{i}"] for i in range(len(enc.weights))]
        enc.biases = [params[f"enc.b{i}"] for i in range(len(enc.biases))]
        fp, _ = encoder_forward(enc, cloud)
        fq, _ = encoder_forward(enc, other)
        loss, _, _ = vb_loss_backward(fp[sample], fq[sample], cfg.vb_config())
        return loss

    fp, tape_p = encoder_forward(state.encoder, cloud)
    fq, tape_q = encoder_forward(state.encoder, other)
    _, gp, gq = vb_loss_backward(fp[sample], fq[sample], cfg.vb_config())
    up = np.zeros_like(fp)
    up[sample] = gp
    uq = np.zeros_like(fq)
    uq[sample] = gq
    grads = encoder_backward(tape_p, up).grads
    for name, g in encoder_backward(tape_q, uq).grads.items():
        grads[name] += g
    params = {f"enc.w{i}": w for i, w in enumerate(state.encoder.weights)}
    params.update({f"enc.b{i}": b for i, b in enumerate(state.encoder.biases)})
    report = gradient_check(loss_fn, params, grads, rng=rng)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} max relative error {report.max_rel_error:.3e} "
          f"(tolerance {report.tolerance})")
    return 0 if report.passed else 3


def _cmd_run(args) -> int:
    values = _values(args)
    out = values["out_dir"]
    report = run_experiment(values, out)
    print(f"experiment complete: mIoU {report.mean_iou:.4f}; "
          f"outputs in {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
