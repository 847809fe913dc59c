import io
import math
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial.distance import cdist

from dualebm.data_io import (
    Checkpoint,
    CheckpointError,
    Dataset,
    IdxFormatError,
    arm_curve,
    gen_four_spin,
    gen_two_spiral,
    load_checkpoint,
    load_mnist_idx,
    save_checkpoint,
    save_points_csv,
)
from dualebm.energy_model import EnergyModel
from dualebm.generator_model import GeneratorModel
from dualebm.training import TrainConfig, TrainState, train


# --- spirals -------------------------------------------------------------------

def test_two_spiral_inverse_parameterization():
    ds = gen_two_spiral(2000, 0.0, np.random.default_rng(0))
    t_max = 3.0 * math.pi
    radius = np.linalg.norm(ds.points, axis=1)
    t = radius * t_max
    assert np.all(t >= 0.25 - 1e-9) and np.all(t <= t_max + 1e-9)
    angle = np.arctan2(ds.points[:, 1], ds.points[:, 0])
    # the point's polar angle must equal t (mod 2 pi) up to the arm offset
    residual0 = np.abs((angle - t + math.pi) % (2.0 * math.pi) - math.pi)
    residual1 = np.abs((angle - t - math.pi + math.pi) % (2.0 * math.pi) - math.pi)
    assert np.all(np.minimum(residual0, residual1) < 1e-9)


def test_two_spiral_arm_balance_and_size():
    ds = gen_two_spiral(10_000, 0.01, np.random.default_rng(1))
    assert ds.points.shape == (10_000, 2)
    counts = np.bincount(ds.labels)
    assert abs(counts[0] - counts[1]) <= 1


def test_two_spiral_stays_in_box_at_small_noise():
    ds = gen_two_spiral(10_000, 0.02, np.random.default_rng(2))
    assert np.all(np.abs(ds.points) <= 1.2)


def test_two_spiral_odd_count_balance():
    ds = gen_two_spiral(101, 0.0, np.random.default_rng(3))
    counts = np.bincount(ds.labels)
    assert abs(int(counts[0]) - int(counts[1])) <= 1


def test_generators_are_pure_functions_of_seed():
    a = gen_four_spin(500, 0.01, np.random.default_rng(7))
    b = gen_four_spin(500, 0.01, np.random.default_rng(7))
    assert np.array_equal(a.points, b.points)


def test_four_spin_balance_and_center():
    ds = gen_four_spin(10_000, 0.01, np.random.default_rng(4))
    counts = np.bincount(ds.labels)
    assert counts.max() - counts.min() <= 1
    assert np.linalg.norm(ds.points.mean(axis=0)) < 0.02


def _energy_distance(a, b):
    return (2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


def test_four_spin_quarter_turn_symmetry():
    """Rotating one sample by 90 degrees is indistinguishable from a fresh
    draw under a permutation-calibrated energy-distance test at alpha=0.01."""
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    a = gen_four_spin(500, 0.01, np.random.default_rng(5)).points @ rot.T
    b = gen_four_spin(500, 0.01, np.random.default_rng(6)).points
    observed = _energy_distance(a, b)
    pooled = np.vstack([a, b])
    perm_rng = np.random.default_rng(8)
    exceed = 0
    n_perm = 99
    for _ in range(n_perm):
        idx = perm_rng.permutation(len(pooled))
        pa, pb = pooled[idx[:500]], pooled[idx[500:]]
        if _energy_distance(pa, pb) >= observed:
            exceed += 1
    p_value = (exceed + 1) / (n_perm + 1)
    assert p_value > 0.01


def test_arm_curve_endpoints():
    curve = arm_curve("four_spin", 0, num=100)
    t_max = 1.5 * math.pi
    assert_allclose(np.linalg.norm(curve[0]), 0.25 / t_max, rtol=1e-12)
    assert_allclose(np.linalg.norm(curve[-1]), 1.0, rtol=1e-12)


def test_dataset_rejects_empty_or_nonfinite():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 2)), "empty")
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]), "nan")


# --- MNIST IDX -------------------------------------------------------------------

def _write_idx_pair(tmp_path, count=10, rows=4, cols=3, pixel_fn=None):
    """Hand-rolled IDX writer: independent of the loader under test."""
    images = tmp_path / "images.idx"
    labels = tmp_path / "labels.idx"
    rng = np.random.default_rng(0)
    pixels = (pixel_fn(count, rows, cols) if pixel_fn is not None
              else rng.integers(0, 256, size=(count, rows, cols), dtype=np.uint8))
    with open(images, "wb") as f:
        f.write(struct.pack(">iiii", 0x00000803, count, rows, cols))
        f.write(pixels.tobytes())
    with open(labels, "wb") as f:
        f.write(struct.pack(">ii", 0x00000801, count))
        f.write(rng.integers(0, 10, size=count, dtype=np.uint8).tobytes())
    return images, labels, pixels


def test_idx_roundtrip_shapes_and_scaling(tmp_path):
    images, labels, pixels = _write_idx_pair(tmp_path)
    ds = load_mnist_idx(images, labels)
    assert ds.points.shape == (10, 12)
    assert ds.labels.shape == (10,)
    assert np.all(ds.points >= 0.0) and np.all(ds.points <= 1.0)
    assert_allclose(ds.points, pixels.reshape(10, 12) / 255.0)


def test_idx_byte_endpoints_map_to_unit_interval(tmp_path):
    def extremes(count, rows, cols):
        px = np.zeros((count, rows, cols), dtype=np.uint8)
        px[0, 0, 0] = 0xFF
        return px

    images, labels, _ = _write_idx_pair(tmp_path, pixel_fn=extremes)
    ds = load_mnist_idx(images, labels)
    assert ds.points[0, 0] == 1.0
    assert ds.points[0, 1] == 0.0


def test_idx_standard_training_header_dimensions(tmp_path):
    images, labels, _ = _write_idx_pair(tmp_path, count=60_000, rows=28, cols=28)
    ds = load_mnist_idx(images, labels)
    assert ds.points.shape == (60_000, 784)


def test_idx_bad_magic(tmp_path):
    images, labels, _ = _write_idx_pair(tmp_path)
    with open(images, "r+b") as f:
        f.write(struct.pack(">i", 0x00000107))
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_mnist_idx(images, labels)


def test_idx_truncated_pixels(tmp_path):
    images, labels, _ = _write_idx_pair(tmp_path)
    data = images.read_bytes()
    images.write_bytes(data[:-5])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_mnist_idx(images, labels)


def test_idx_count_mismatch(tmp_path):
    images, labels, _ = _write_idx_pair(tmp_path)
    with open(labels, "wb") as f:
        f.write(struct.pack(">ii", 0x00000801, 7))
        f.write(bytes(7))
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_mnist_idx(images, labels)


# --- checkpoints -------------------------------------------------------------------

def _small_run(tmp_path, steps=20, ckpt_interval=0):
    dem = EnergyModel.build((2, 8, 4), 4, np.random.default_rng(0))
    gen = GeneratorModel.build((2, 8, 2), np.random.default_rng(1))
    points = gen_four_spin(256, 0.01, np.random.default_rng(2)).points
    config = TrainConfig(batch_size=16, steps=steps, seed=9,
                         checkpoint_interval=ckpt_interval)
    return dem, gen, points, config


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    dem, gen, points, config = _small_run(tmp_path)
    state = train(dem, gen, points, config)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, Checkpoint({"note": "test"}, dem, gen, state))
    loaded = load_checkpoint(path)
    assert loaded.config == {"note": "test"}
    assert loaded.state.step == state.step
    for p, q in zip(dem.params() + gen.params(),
                    loaded.dem.params() + loaded.gen.params()):
        assert p.name == q.name
        assert np.array_equal(p.values, q.values)
    for name, acc in state.accumulators.items():
        assert np.array_equal(acc, loaded.state.accumulators[name])
    for a, b in zip(gen.layers, loaded.gen.layers):
        if a.has_batch_norm:
            assert np.array_equal(a.bn_state.mean, b.bn_state.mean)
            assert np.array_equal(a.bn_state.var, b.bn_state.var)


def test_checkpoint_resume_replays_identically(tmp_path):
    dem, gen, points, config = _small_run(tmp_path, steps=40)
    full = io.StringIO()
    train(dem, gen, points, config, metrics_out=full)

    dem2, gen2, points2, _ = _small_run(tmp_path)
    half = io.StringIO()
    state = train(dem2, gen2, points2, TrainConfig(batch_size=16, steps=20, seed=9),
                  metrics_out=half)
    path = tmp_path / "mid.bin"
    save_checkpoint(path, Checkpoint({}, dem2, gen2, state))

    resumed = load_checkpoint(path)
    train(resumed.dem, resumed.gen, points2,
          TrainConfig(batch_size=16, steps=40, seed=9), state=resumed.state,
          metrics_out=half)
    assert half.getvalue() == full.getvalue()
    for p, q in zip(dem.params(), resumed.dem.params()):
        assert np.array_equal(p.values, q.values)


def test_checkpoint_rng_state_roundtrip(tmp_path):
    dem, gen, points, config = _small_run(tmp_path)
    state = train(dem, gen, points, config)
    path = tmp_path / "rng.bin"
    save_checkpoint(path, Checkpoint({}, dem, gen, state))
    loaded = load_checkpoint(path)
    assert np.array_equal(state.data_rng.uniform(size=16),
                          loaded.state.data_rng.uniform(size=16))
    assert np.array_equal(state.prior_rng.uniform(size=16),
                          loaded.state.prior_rng.uniform(size=16))


def test_checkpoint_truncation_detected(tmp_path):
    dem, gen, points, config = _small_run(tmp_path)
    state = train(dem, gen, points, config)
    path = tmp_path / "trunc.bin"
    save_checkpoint(path, Checkpoint({}, dem, gen, state))
    data = path.read_bytes()
    for cut in (4, 15, len(data) - 3):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_checkpoint_bad_magic_and_version(tmp_path):
    dem, gen, points, config = _small_run(tmp_path)
    state = train(dem, gen, points, config)
    path = tmp_path / "bad.bin"
    save_checkpoint(path, Checkpoint({}, dem, gen, state))
    data = bytearray(path.read_bytes())

    path.write_bytes(b"NOTACKPT" + bytes(data[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)

    data[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_points_csv_export(tmp_path):
    pts = np.array([[0.25, -1.5], [3.0, 0.125]])
    path = tmp_path / "points.csv"
    save_points_csv(path, pts)
    lines = path.read_text().splitlines()
    assert lines[0] == "x0,x1"
    parsed = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    assert np.array_equal(parsed, pts)
