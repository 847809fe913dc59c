"""Synthetic 2D datasets, MNIST IDX ingestion, and checkpoint persistence.

The spiral family is parameterized by arc length t: a point on arm k of an
m-armed figure is t*(cos(t + 2*pi*k/m), sin(t + 2*pi*k/m)) / t_max, plus
isotropic Gaussian noise. Dividing by the arm's own t_max keeps every
dataset inside the unit disk regardless of arm length.

Checkpoints are a single binary container: magic, version word, a
length-prefixed JSON header (config, architectures, optimizer state, RNG
states, tensor manifest) followed by raw little-endian float64 tensor
blocks in manifest order. Loading reconstructs models bit-exactly; writes
go through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .energy_model import EnergyModel
from .generator_model import GeneratorModel
from .training import HISTORY_LEN, TrainState

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b"DUALEBM\x00"
CHECKPOINT_VERSION = 1

# (number of arms, t_min, t_max) per named 2D dataset
SPIRAL_SPECS = {
    "two_spiral": (2, 0.25, 3.0 * math.pi),
    "four_spin": (4, 0.25, 1.5 * math.pi),
}


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncation, or image/label mismatch."""


class CheckpointError(ValueError):
    """Unreadable checkpoint: wrong magic, version, or truncated payload."""


@dataclass
class Dataset:
    points: np.ndarray
    name: str
    normalization: dict = field(default_factory=dict)
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValueError(f"points must be a nonempty (n, d) array, "
                             f"got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("dataset contains non-finite points")

    @property
    def d_in(self) -> int:
        return self.points.shape[1]


def arm_curve(name: str, arm: int, num: int = 2000) -> np.ndarray:
    """Dense noiseless sampling of one arm's center line."""
    arms, t_min, t_max = SPIRAL_SPECS[name]
    t = np.linspace(t_min, t_max, num)
    angle = t + 2.0 * math.pi * arm / arms
    return (t * np.array([np.cos(angle), np.sin(angle)])).T / t_max


def _spiral_dataset(name: str, n: int, noise_sd: float,
                    rng: np.random.Generator) -> Dataset:
    arms, t_min, t_max = SPIRAL_SPECS[name]
    arm = np.arange(n) % arms          # balanced within +/- 1 per arm
    t = rng.uniform(t_min, t_max, size=n)
    angle = t + 2.0 * math.pi * arm / arms
    points = (t[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])) / t_max
    if noise_sd > 0:
        points = points + rng.normal(0.0, noise_sd, size=points.shape)
    return Dataset(points, name,
                   normalization={"t_max": t_max, "arms": arms,
                                  "noise_sd": noise_sd},
                   labels=arm.copy())


def gen_two_spiral(n: int, noise_sd: float, rng: np.random.Generator) -> Dataset:
    """Two interleaved spiral arms offset by pi; points lie in the unit disk."""
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be >= 0, got {noise_sd}")
    return _spiral_dataset("two_spiral", n, noise_sd, rng)


def gen_four_spin(n: int, noise_sd: float, rng: np.random.Generator) -> Dataset:
    """Four shorter arms at 90-degree offsets; rotating the set by 90 degrees
    leaves its distribution unchanged."""
    if n < 4:
        raise ValueError(f"need n >= 4, got {n}")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be >= 0, got {noise_sd}")
    return _spiral_dataset("four_spin", n, noise_sd, rng)


def make_dataset(name: str, n: int, noise_sd: float,
                 rng: np.random.Generator) -> Dataset:
    if name == "two_spiral":
        return gen_two_spiral(n, noise_sd, rng)
    if name == "four_spin":
        return gen_four_spin(n, noise_sd, rng)
    raise ValueError(f"unknown dataset {name!r}")


# --- MNIST IDX ----------------------------------------------------------------

def _read_exact(f, count: int, path: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise IdxFormatError(
            f"{path}: truncated file, wanted {count} bytes, got {len(data)}")
    return data


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Standard big-endian IDX pair; pixels rescaled from bytes to [0, 1]."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">iiii", _read_exact(f, 16, str(images_path)))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, "
                f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, str(images_path))
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">ii", _read_exact(f, 8, str(labels_path)))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, "
                f"expected 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, label_count, str(labels_path)),
                               dtype=np.uint8)
    if label_count != count:
        raise IdxFormatError(
            f"count mismatch: {count} images but {label_count} labels")
    return Dataset(pixels.astype(np.float64) / 255.0, "mnist",
                   normalization={"scale": 1.0 / 255.0, "rows": rows, "cols": cols},
                   labels=labels.astype(np.int64))


def save_points_csv(path, points: np.ndarray) -> None:
    points = np.asarray(points)
    with open(path, "w") as f:
        f.write(",".join(f"x{i}" for i in range(points.shape[1])) + "\n")
        for row in points:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


# --- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    dem: EnergyModel
    gen: GeneratorModel
    state: TrainState
    version: int = CHECKPOINT_VERSION


def _model_tensors(dem: EnergyModel, gen: GeneratorModel,
                   state: TrainState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for p in dem.params() + gen.params():
        tensors[p.name] = p.values
    for i, layer in enumerate(gen.layers):
        if layer.has_batch_norm:
            tensors[f"gen.layer{i}.bn_running_mean"] = layer.bn_state.mean
            tensors[f"gen.layer{i}.bn_running_var"] = layer.bn_state.var
    for name, acc in sorted(state.accumulators.items()):
        tensors[f"acc.{name}"] = acc
    return tensors


def _rng_state(rng: Optional[np.random.Generator]):
    return None if rng is None else rng.bit_generator.state


def _restore_rng(saved):
    if saved is None:
        return None
    rng = np.random.default_rng(0)
    rng.bit_generator.state = saved
    return rng


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    dem, gen, state = checkpoint.dem, checkpoint.gen, checkpoint.state
    tensors = _model_tensors(dem, gen, state)
    manifest = [[name, list(arr.shape)] for name, arr in tensors.items()]
    header = {
        "config": checkpoint.config,
        "dem": {
            "widths": list(dem.widths),
            "n_experts": dem.n_experts,
            "sigma": dem.sigma,
            "hidden_activation": dem.hidden_activation,
            "final_activation": dem.final_activation,
        },
        "gen": {
            "widths": list(gen.widths),
            "batch_norm_hidden": gen.batch_norm_hidden,
            "hidden_activation": gen.hidden_activation,
            "output_activation": gen.output_activation,
        },
        "state": {
            "step": state.step,
            "data_rng": _rng_state(state.data_rng),
            "prior_rng": _rng_state(state.prior_rng),
            "history": list(state.history),
        },
        "tensors": manifest,
    }
    blob = json.dumps(header).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", checkpoint.version))
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for name, _ in manifest:
                f.write(np.ascontiguousarray(tensors[name]).astype("<f8").tobytes())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def load_checkpoint(path) -> Checkpoint:
    """Parse and rebuild; any inconsistency raises before models are built."""
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) < len(CHECKPOINT_MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    if payload[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic mismatch)")
    version = struct.unpack("<I", payload[8:12])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version}, "
            f"expected {CHECKPOINT_VERSION}")
    header_len = struct.unpack("<Q", payload[12:20])[0]
    if len(payload) < 20 + header_len:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(payload[20:20 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header: {err}") from None

    manifest = header["tensors"]
    expected = 20 + header_len + sum(
        8 * int(np.prod(shape)) for _, shape in manifest)
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: corrupt tensor payload, expected {expected} bytes, "
            f"got {len(payload)}")

    tensors = {}
    offset = 20 + header_len
    for name, shape in manifest:
        size = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
        tensors[name] = arr.reshape(shape).copy()
        offset += 8 * size

    dem_meta = header["dem"]
    dem = EnergyModel.build(
        tuple(dem_meta["widths"]), dem_meta["n_experts"],
        np.random.default_rng(0), sigma=dem_meta["sigma"],
        hidden_activation=dem_meta["hidden_activation"],
        final_activation=dem_meta["final_activation"])
    gen_meta = header["gen"]
    gen = GeneratorModel.build(
        tuple(gen_meta["widths"]), np.random.default_rng(0),
        batch_norm_hidden=gen_meta["batch_norm_hidden"],
        hidden_activation=gen_meta["hidden_activation"],
        output_activation=gen_meta["output_activation"])
    for p in dem.params() + gen.params():
        if p.name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {p.name!r}")
        if tensors[p.name].shape != p.values.shape:
            raise CheckpointError(
                f"{path}: tensor {p.name!r} has shape {tensors[p.name].shape}, "
                f"model expects {p.values.shape}")
        p.values[...] = tensors[p.name]
    for i, layer in enumerate(gen.layers):
        if layer.has_batch_norm:
            layer.bn_state.mean[...] = tensors[f"gen.layer{i}.bn_running_mean"]
            layer.bn_state.var[...] = tensors[f"gen.layer{i}.bn_running_var"]

    state_meta = header["state"]
    accumulators = {name[len("acc."):]: arr for name, arr in tensors.items()
                    if name.startswith("acc.")}
    state = TrainState(
        step=state_meta["step"],
        accumulators=accumulators,
        data_rng=_restore_rng(state_meta["data_rng"]),
        prior_rng=_restore_rng(state_meta["prior_rng"]),
        history=deque(state_meta["history"], maxlen=HISTORY_LEN),
    )
    return Checkpoint(header["config"], dem, gen, state, version=version)
