"""Command-line entry point.

Subcommands: train, sample, energy-map, interpolate, gradcheck, eval.
Every command is deterministic given (config, seed, checkpoint). Exit
codes: 0 success, 2 configuration problem, 3 non-finite gradient abort
(step number printed), 4 missing or corrupt checkpoint. The environment
variable DUALEBM_OUTDIR overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import (
    RunConfig,
    apply_overrides,
    build_models,
    dataset_bounds,
    load_config,
    load_run_dataset,
)
from .data_io import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
    save_points_csv,
)
from .evaluation import (
    energy_heatmap,
    export_image_grid,
    latent_interpolation,
    mode_coverage,
    model_data_divergence,
)
from .gradcheck import GRADCHECK_TOLERANCE, run_gradcheck
from .generator_model import sample_prior
from .training import ConfigError, NonFiniteGradientError, TrainState, rng_streams, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_CHECKPOINT = 4


def _load_config_with_overrides(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    pairs = []
    leftover = list(args.overrides)
    while leftover:
        key = leftover.pop(0)
        if not key.startswith("--") or not leftover:
            raise ConfigError(f"overrides must be '--key value' pairs, got {key!r}")
        pairs.append((key[2:].replace("-", "_"), leftover.pop(0)))
    apply_overrides(config, pairs)
    outdir_env = os.environ.get("DUALEBM_OUTDIR")
    if outdir_env:
        config.out_dir = outdir_env
    return config.validate()


def _open_checkpoint(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint")


def cmd_train(args) -> int:
    config = _load_config_with_overrides(args)
    dem, gen = build_models(config)
    streams = rng_streams(config.seed)
    dataset = load_run_dataset(config, streams["data"])
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def write_checkpoint(state, name):
        save_checkpoint(out_dir / name,
                        Checkpoint(config.to_dict(), dem, gen, state))

    with open(out_dir / "metrics.txt", "w") as metrics:
        state = train(
            dem, gen, dataset, config.train_config(), metrics_out=metrics,
            checkpoint_fn=lambda s: write_checkpoint(s, f"checkpoint_{s.step}.bin"))
    write_checkpoint(state, "checkpoint_final.bin")
    print(f"trained {state.step} steps; outputs in {out_dir}")
    return EXIT_OK


def cmd_sample(args) -> int:
    checkpoint = _open_checkpoint(args.checkpoint)
    gen = checkpoint.gen
    z = sample_prior(args.n, gen.d_z, np.random.default_rng(args.seed))
    samples = gen.generate(z, "infer")
    if samples.shape[1] == 2:
        save_points_csv(args.out, samples)
    else:
        export_image_grid(samples, args.out)
    print(f"wrote {samples.shape[0]} samples to {args.out}")
    return EXIT_OK


def cmd_energy_map(args) -> int:
    checkpoint = _open_checkpoint(args.checkpoint)
    lo, hi = args.bounds
    grid = energy_heatmap(checkpoint.dem, [(lo, hi), (lo, hi)], args.res)
    export_image_grid(grid, args.out)
    print(f"wrote {args.res}x{args.res} energy map to {args.out} "
          f"(min {grid.vmin:.4f}, max {grid.vmax:.4f})")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    checkpoint = _open_checkpoint(args.checkpoint)
    gen = checkpoint.gen
    rng = np.random.default_rng(args.seed)
    z = sample_prior(2, gen.d_z, rng)
    path_points = latent_interpolation(gen, z[0], z[1], args.k)
    side = int(round(np.sqrt(path_points.shape[1])))
    if side * side == path_points.shape[1] and side >= 2:
        export_image_grid(path_points, args.out)
    else:
        save_points_csv(args.out, path_points)
    print(f"wrote {args.k}-step interpolation to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst, breakdown = run_gradcheck(seed=args.seed, scale=args.scale)
    for name, err in breakdown.items():
        print(f"{name}: worst relative error {err:.3e}")
    print(f"worst relative error {worst:.3e} "
          f"({'OK' if worst < GRADCHECK_TOLERANCE else 'FAIL'}, "
          f"tolerance {GRADCHECK_TOLERANCE:.0e})")
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else 1


def cmd_eval(args) -> int:
    checkpoint = _open_checkpoint(args.checkpoint)
    from .config import config_from_dict
    config = config_from_dict(checkpoint.config, source="checkpoint config")
    if config.dataset == "mnist":
        raise ConfigError("eval metrics are defined for the 2D datasets only")
    held_out = load_run_dataset(
        config, np.random.default_rng(np.random.SeedSequence(config.seed + 1)))
    z = sample_prior(args.n, checkpoint.gen.d_z, np.random.default_rng(args.seed))
    samples = checkpoint.gen.generate(z, "infer")
    coverage = mode_coverage(samples, config.dataset)
    divergence = model_data_divergence(
        checkpoint.dem, held_out.points, dataset_bounds(config), args.grid_n)
    e_data = checkpoint.dem.energy_values(held_out.points).mean()
    box = np.random.default_rng(args.seed + 1).uniform(
        held_out.points.min(), held_out.points.max(), size=(args.n, 2))
    e_probe = checkpoint.dem.energy_values(box).mean()
    report = {
        "dataset": config.dataset,
        "unassigned": coverage["unassigned"],
        "cross_entropy": divergence["cross_entropy"],
        "kl_vs_kde": divergence["kl_vs_kde"],
        "energy_gap": float(e_probe - e_data),
    }
    for i, fraction in enumerate(coverage["fractions"]):
        report[f"mode_{i}"] = fraction
    for key, value in report.items():
        print(f"{key}={value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualebm",
        description="Train an energy model and a sample generator against "
                    "each other; inspect the result.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the dual training loop")
    p_train.add_argument("--config", help="JSON config file")
    p_train.set_defaults(fn=cmd_train, overrides=[])

    p_sample = sub.add_parser("sample", help="draw generator samples")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--n", type=int, default=1000)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--out", required=True)
    p_sample.set_defaults(fn=cmd_sample)

    p_map = sub.add_parser("energy-map", help="export an energy heatmap CSV")
    p_map.add_argument("--checkpoint", required=True)
    p_map.add_argument("--bounds", type=float, nargs=2, default=[-1.5, 1.5],
                       metavar=("LO", "HI"))
    p_map.add_argument("--res", type=int, default=200)
    p_map.add_argument("--out", required=True)
    p_map.set_defaults(fn=cmd_energy_map)

    p_interp = sub.add_parser("interpolate",
                              help="generate samples along a latent line")
    p_interp.add_argument("--checkpoint", required=True)
    p_interp.add_argument("--k", type=int, default=10)
    p_interp.add_argument("--seed", type=int, default=0)
    p_interp.add_argument("--out", required=True)
    p_interp.set_defaults(fn=cmd_interpolate)

    p_grad = sub.add_parser("gradcheck",
                            help="compare analytic gradients to central differences")
    p_grad.add_argument("--scale", type=float, default=1.0,
                        help="random init scale for the probe models")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_eval = sub.add_parser("eval", help="mode coverage and divergence metrics")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--n", type=int, default=5000)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--grid-n", type=int, default=200)
    p_eval.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exit_err:  # argparse reports its own usage errors
        code = exit_err.code or 0
        return EXIT_CONFIG if code == 2 else int(code)
    if args.fn is cmd_train:
        args.overrides = extra  # --field value pairs, validated against RunConfig
    elif extra:
        print(f"unrecognized arguments: {' '.join(extra)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteGradientError as err:
        print(f"aborted: {err}", file=sys.stderr)
        return EXIT_NONFINITE
    except CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
