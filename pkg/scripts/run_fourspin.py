#!/usr/bin/env python3
"""End-to-end four-spin experiment: train the model pair, report coverage
and divergence numbers, export the energy map and generator samples.

Usage: python scripts/run_fourspin.py [out_dir] [--field value ...]
"""

import sys
from pathlib import Path

import numpy as np

from dualebm.cli import main as cli_main
from dualebm.config import RunConfig, apply_overrides
from dualebm.data_io import load_checkpoint


def run(out_dir: str, overrides) -> int:
    config = RunConfig(dataset="four_spin", out_dir=out_dir)
    pairs = [(overrides[i][2:].replace("-", "_"), overrides[i + 1])
             for i in range(0, len(overrides), 2)]
    apply_overrides(config, pairs)

    args = ["train"]
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        args += [f"--{key}", str(value)]
    code = cli_main(args)
    if code != 0:
        return code

    ckpt = str(Path(config.out_dir) / "checkpoint_final.bin")
    cli_main(["energy-map", "--checkpoint", ckpt, "--res", "200",
              "--out", str(Path(config.out_dir) / "energy_map.csv")])
    cli_main(["sample", "--checkpoint", ckpt, "--n", "5000",
              "--out", str(Path(config.out_dir) / "samples.csv")])
    return cli_main(["eval", "--checkpoint", ckpt])


if __name__ == "__main__":
    argv = sys.argv[1:]
    out_dir = argv.pop(0) if argv and not argv[0].startswith("--") else "runs/fourspin"
    sys.exit(run(out_dir, argv))
