import struct

import numpy as np
import pytest

from aquasplat.checkpoint import MAGIC, checkpoint_bytes, decode_arrays, encode_arrays, load_checkpoint, save_checkpoint
from aquasplat.config import config_from_dict
from aquasplat.errors import CheckpointError
from aquasplat.train import build_scene, fresh_state, train

SMALL = {
    "scene": {"synthetic": {"seed": 1, "n_gaussians": 30, "n_views": 4, "width": 16, "height": 16}},
    "iterations": 80,
    "threads": 1,
    "log_every": 0,
    "eval_every": 0,
    "densify": {"start_iter": 10, "interval": 10, "grad_threshold": 1e-3},
}


@pytest.fixture(scope="module")
def state():
    cfg = config_from_dict(SMALL)
    return fresh_state(cfg, build_scene(cfg))


def test_fresh_round_trip(tmp_path, state):
    save_checkpoint(tmp_path / "a.ckpt", state)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert checkpoint_bytes(back) == checkpoint_bytes(state)
    assert back.cloud.positions.tobytes() == state.cloud.positions.tobytes()
    assert back.config == state.config and back.iteration == 0
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_array_codec(rng):
    arrays = {"f": rng.normal(size=(3, 2)), "i": np.arange(4, dtype=np.int64), "b": np.array([True, False]), "e": np.zeros((0, 5))}
    header, back = decode_arrays(encode_arrays({"x": 1}, arrays))
    assert header == {"x": 1}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
    with pytest.raises(CheckpointError, match="dtype"):
        encode_arrays({}, {"u": np.zeros(2, dtype=np.uint8)})


@pytest.mark.parametrize(
    "damage, message",
    [
        (lambda b: b[: len(b) // 2], "truncated"),
        (lambda b: b[:-1], "truncated"),
        (lambda b: b"XXXXXXXX" + b[8:], "bad magic"),
        (lambda b: MAGIC + struct.pack("<I", 99) + b[12:], "version 99"),
        (lambda b: b[:200] + bytes([b[200] ^ 0xFF]) + b[201:], "corrupt"),
        (lambda b: b + b"\0", "trailing"),
    ],
)
def test_damaged_files(tmp_path, state, damage, message):
    path = tmp_path / "d.ckpt"
    path.write_bytes(damage(checkpoint_bytes(state)))
    with pytest.raises(CheckpointError, match=message):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_resume_is_bit_exact(tmp_path):
    cfg = config_from_dict({**SMALL, "checkpoint_every": 40})
    full = train(cfg, output_dir=tmp_path / "full")
    assert full.state.cloud.n != 30  # densification ran
    mid = load_checkpoint(tmp_path / "full" / "iter_000040.ckpt")
    assert mid.iteration == 40
    resumed = train(cfg, resume=mid, output_dir=tmp_path / "resumed")
    assert (tmp_path / "full" / "final.ckpt").read_bytes() == (tmp_path / "resumed" / "final.ckpt").read_bytes()
    assert resumed.state.iteration == 80
