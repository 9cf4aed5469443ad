import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bayesqsm.volume import (BinaryMask, ComplexVolume, SeededRng, Volume, VolumeFormatError,
                             load_mask, load_volume, save_mask, save_volume, slice_to_pgm)

DATA = Path(__file__).parent / "data"

dims3 = st.tuples(*(st.integers(1, 5),) * 3)
f32 = st.floats(-1e6, 1e6, width=32, allow_nan=False)


def test_layout_fixture_is_x_fastest():
    v = load_volume(DATA / "layout_2x3x4.vol")
    assert v.dims == (2, 3, 4)
    x, y, z = np.meshgrid(np.arange(2), np.arange(3), np.arange(4), indexing="ij")
    np.testing.assert_array_equal(v.data, x + 10 * y + 100 * z)


def test_save_writes_x_fastest(tmp_path):
    x, y, z = np.meshgrid(np.arange(2), np.arange(3), np.arange(4), indexing="ij")
    save_volume(Volume(x + 10 * y + 100 * z), tmp_path / "a.vol")
    assert (tmp_path / "a.vol").read_bytes() == (DATA / "layout_2x3x4.vol").read_bytes()


@given(hnp.arrays(np.float32, dims3, elements=f32))
def test_roundtrip_exact_for_float32(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rt") / "v.vol"
    v = Volume(arr.astype(np.float64), (0.5, 1.0, 2.0))
    save_volume(v, p)
    w = load_volume(p)
    assert w.voxel_size == (0.5, 1.0, 2.0)
    np.testing.assert_array_equal(w.data, v.data)


def test_complex_roundtrip_interleaved(tmp_path):
    data = (np.arange(8) + 1j * -np.arange(8)).reshape(2, 2, 2)
    save_volume(ComplexVolume(data), tmp_path / "c.vol")
    raw = (tmp_path / "c.vol").read_bytes()
    payload = np.frombuffer(raw[raw.index(b"\n") + 1:], dtype="<f4")
    # first voxel (0,0,0) then (1,0,0): real/imag pairs
    assert list(payload[:4]) == [0.0, 0.0, 4.0, -4.0]
    back = load_volume(tmp_path / "c.vol")
    assert isinstance(back, ComplexVolume)
    np.testing.assert_array_equal(back.data, data)


def _write(path, head, payload):
    path.write_bytes(json.dumps(head).encode() + b"\n" + payload)


def test_payload_size_mismatch(tmp_path):
    head = {"dims": [2, 2, 2], "voxel_size_mm": [1, 1, 1], "dtype": "f32le", "kind": "real"}
    _write(tmp_path / "a.vol", head, struct.pack("<7f", *range(7)))
    with pytest.raises(VolumeFormatError, match="payload size mismatch"):
        load_volume(tmp_path / "a.vol")


def test_malformed_and_unsupported(tmp_path):
    (tmp_path / "a.vol").write_bytes(b"{not json\n")
    with pytest.raises(VolumeFormatError, match="malformed header"):
        load_volume(tmp_path / "a.vol")
    head = {"dims": [1, 1, 1], "voxel_size_mm": [1, 1, 1], "dtype": "f64le", "kind": "real"}
    _write(tmp_path / "b.vol", head, b"\0" * 8)
    with pytest.raises(VolumeFormatError, match="unsupported dtype"):
        load_volume(tmp_path / "b.vol")


def test_volume_is_immutable_and_finite():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


def test_mask_roundtrip(tmp_path):
    m = BinaryMask(np.arange(27).reshape(3, 3, 3) % 2 == 0)
    save_mask(m, tmp_path / "m.vol")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.vol").data, m.data)
    assert m.count == 14
    with pytest.raises(ValueError):
        m.check_matches((3, 3, 4))


def test_pgm_midpoint_and_layout(tmp_path):
    data = np.zeros((3, 2, 1))
    data[1, 0, 0] = 0.5
    data[2, 1, 0] = 1.0
    slice_to_pgm(Volume(data), 2, 0, (0.0, 1.0), tmp_path / "s.pgm")
    raw = (tmp_path / "s.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    pix = list(raw[len(b"P5\n3 2\n255\n"):])
    assert pix == [0, 128, 0, 0, 0, 255]


def test_pgm_errors(tmp_path):
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        slice_to_pgm(v, 0, 0, (1.0, 1.0), tmp_path / "a.pgm")
    with pytest.raises(IndexError):
        slice_to_pgm(v, 1, 2, (0.0, 1.0), tmp_path / "a.pgm")


def test_rng_streams_reproducible_and_distinct():
    a = SeededRng(5).child(3).standard_normal((1000,))
    b = SeededRng(5).child(3).standard_normal((1000,))
    c = SeededRng(5).child(4).standard_normal((1000,))
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_box_muller_moments():
    z = SeededRng(0).standard_normal((200_000,))
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 4 * np.sqrt(2.0 / z.size)


@given(st.integers(1, 7))
def test_normal_shape_odd_sizes(n):
    assert SeededRng(1).standard_normal((n, 1, 1)).shape == (n, 1, 1)
