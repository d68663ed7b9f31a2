"""Checkpoint container: exact roundtrips and loud failure on damage."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from vfseg.checkpoint import (
    CKPT_MAGIC,
    assign_tensors,
    load_checkpoint,
    save_checkpoint,
)
from vfseg.errors import DataError


def _tensors():
    rng = np.random.Generator(np.random.PCG64(5))
    return {
        "enc.w": rng.normal(size=(3, 2, 2, 2)),
        "enc.b": rng.normal(size=3),
        "meta.epoch": np.array([4.0]),
        "scalar.ish": rng.normal(size=(1,)),
    }


def test_roundtrip_bitwise(tmp_path):
    path = tmp_path / "model.ckpt"
    tensors = _tensors()
    save_checkpoint(path, "tiny", tensors)
    preset, loaded = load_checkpoint(path)
    assert preset == "tiny"
    assert sorted(loaded) == sorted(tensors)
    for name in tensors:
        npt.assert_array_equal(loaded[name], tensors[name])
        assert loaded[name].dtype == np.float64


def test_no_tmp_file_left_behind(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "tiny", _tensors())
    leftovers = [p for p in tmp_path.iterdir() if p.name != "model.ckpt"]
    assert leftovers == []


def test_expect_preset_mismatch(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "tiny", _tensors())
    with pytest.raises(DataError):
        load_checkpoint(path, expect_preset="vgg16")


def test_truncation_raises_data_error(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "tiny", _tensors())
    blob = path.read_bytes()
    for cut in (4, len(blob) // 2, len(blob) - 1):
        clipped = tmp_path / f"cut{cut}.ckpt"
        clipped.write_bytes(blob[:cut])
        with pytest.raises(DataError):
            load_checkpoint(clipped)


def test_trailing_bytes_raise(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "tiny", _tensors())
    padded = tmp_path / "padded.ckpt"
    padded.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(DataError):
        load_checkpoint(padded)


def test_bad_magic_raises(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, "tiny", _tensors())
    blob = bytearray(path.read_bytes())
    assert bytes(blob[:4]) == CKPT_MAGIC
    blob[:4] = b"JUNK"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(DataError):
        load_checkpoint(bad)


def test_missing_file_raises(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_names_stored_sorted(tmp_path):
    # byte layout must not depend on dict insertion order
    path_a = tmp_path / "a.ckpt"
    path_b = tmp_path / "b.ckpt"
    t = _tensors()
    save_checkpoint(path_a, "tiny", t)
    save_checkpoint(path_b, "tiny", dict(reversed(list(t.items()))))
    assert path_a.read_bytes() == path_b.read_bytes()


def test_assign_tensors_strict_shape_check():
    targets = {"w": np.zeros((2, 2))}
    with pytest.raises(DataError):
        assign_tensors(targets, {"w": np.ones((2, 3))}, strict=True, source="t")
    assign_tensors(targets, {"w": np.ones((2, 2))}, strict=True, source="t")
    npt.assert_array_equal(targets["w"], np.ones((2, 2)))


def test_assign_tensors_nonstrict_reports_skips():
    targets = {"w": np.zeros(2), "b": np.zeros(3)}
    skipped = assign_tensors(targets, {"w": np.ones(2)}, strict=False, source="t")
    assert skipped == ["b"]
    npt.assert_array_equal(targets["w"], np.ones(2))
    npt.assert_array_equal(targets["b"], np.zeros(3))


def test_assign_preserves_identity():
    # loading writes through the existing buffers the optimizer holds
    target = np.zeros(4)
    targets = {"w": target}
    assign_tensors(targets, {"w": np.arange(4.0)}, strict=True, source="t")
    assert targets["w"] is target
    npt.assert_array_equal(target, [0.0, 1.0, 2.0, 3.0])
