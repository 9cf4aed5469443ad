"""3D volumes, masks, seeded random streams and the ``.vol`` file format.

Arrays are indexed ``data[x, y, z]``. On disk the payload is x-fastest, i.e.
the Fortran-order linearization of that array.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Volume",
    "ComplexVolume",
    "BinaryMask",
    "SeededRng",
    "VolumeFormatError",
    "load_volume",
    "save_volume",
    "load_mask",
    "save_mask",
    "slice_to_pgm",
]


class VolumeFormatError(ValueError):
    """Raised for malformed ``.vol`` files or invalid volume contents."""


def _check_geometry(shape, voxel_size):
    if len(shape) != 3 or any(n < 1 for n in shape):
        raise ValueError(f"volume data must be 3D with positive dims, got {shape}")
    vs = tuple(float(v) for v in voxel_size)
    if len(vs) != 3 or not all(math.isfinite(v) and v > 0 for v in vs):
        raise ValueError(f"voxel sizes must be three positive numbers, got {voxel_size}")
    return vs


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Real scalar field on a 3D grid; immutable after construction."""

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        vs = _check_geometry(arr.shape, self.voxel_size)
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "voxel_size", vs)

    @property
    def dims(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def like(self, data):
        """New volume with this geometry and ``data``."""
        return Volume(data, self.voxel_size)

    @classmethod
    def zeros(cls, dims, voxel_size=(1.0, 1.0, 1.0)):
        return cls(np.zeros(tuple(dims)), voxel_size)


@dataclass(frozen=True, eq=False)
class ComplexVolume:
    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.complex128)
        vs = _check_geometry(arr.shape, self.voxel_size)
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "voxel_size", vs)

    @property
    def dims(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class BinaryMask:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=bool)
        if arr.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {arr.shape}")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def dims(self):
        return self.data.shape

    @property
    def count(self):
        return int(self.data.sum())

    @classmethod
    def full(cls, dims):
        return cls(np.ones(tuple(dims), dtype=bool))

    def check_matches(self, dims):
        if tuple(dims) != self.dims:
            raise ValueError(f"mask dims {self.dims} do not match {tuple(dims)}")


@dataclass
class SeededRng:
    """Counter-based (Philox) random stream identified by a tuple of integers.

    Child streams are derived, never shared: ``rng.child(i)`` extends the key
    with ``i`` so parallel consumers get independent, reproducible streams.
    """

    seed: int
    key: tuple = ()
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        entropy = [int(self.seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in self.key]]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, stream_id):
        return SeededRng(self.seed, (*self.key, int(stream_id)))

    def uniform(self, shape=None):
        """Uniform draws on [0, 1)."""
        return self._gen.random(shape)

    def standard_normal(self, shape):
        """Box-Muller transform of the uniform stream."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1], keeps log finite
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)


# ----------------------------------------------------------------------------
# .vol files

_DTYPE = "f32le"


def _header(dims, voxel_size, kind):
    return {
        "dims": [int(n) for n in dims],
        "voxel_size_mm": [float(v) for v in voxel_size],
        "dtype": _DTYPE,
        "kind": kind,
    }


def save_volume(v, path):
    """Write a Volume or ComplexVolume as a ``.vol`` file.

    Values are stored as little-endian float32, so the round trip is exact
    for float32-representable data.
    """
    if isinstance(v, ComplexVolume):
        kind = "complex"
        flat = v.data.ravel(order="F")
        payload = np.empty(2 * flat.size, dtype="<f4")
        payload[0::2] = flat.real
        payload[1::2] = flat.imag
    elif isinstance(v, Volume):
        kind = "real"
        payload = v.data.ravel(order="F").astype("<f4")
    else:
        raise TypeError(f"cannot save {type(v).__name__}")
    head = json.dumps(_header(v.dims, v.voxel_size, kind), separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(head.encode("utf-8") + b"\n")
        fh.write(payload.tobytes())


def load_volume(path):
    """Read a ``.vol`` file; returns Volume or ComplexVolume per its header."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError("missing header line")
    try:
        head = json.loads(raw[:nl].decode("utf-8"))
        dims = tuple(int(n) for n in head["dims"])
        voxel_size = tuple(float(v) for v in head["voxel_size_mm"])
        dtype = head["dtype"]
        kind = head["kind"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header: {exc}") from exc
    if len(dims) != 3 or any(n < 1 for n in dims):
        raise VolumeFormatError(f"malformed header: bad dims {dims}")
    if len(voxel_size) != 3 or any(not v > 0 for v in voxel_size):
        raise VolumeFormatError(f"malformed header: bad voxel size {voxel_size}")
    if dtype != _DTYPE:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    if kind not in ("real", "complex"):
        raise VolumeFormatError(f"unsupported kind {kind!r}")
    n = int(np.prod(dims)) * (2 if kind == "complex" else 1)
    body = raw[nl + 1:]
    if len(body) != 4 * n:
        raise VolumeFormatError(
            f"payload size mismatch: expected {n} floats, found {len(body) / 4:g}")
    payload = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(payload)):
        raise VolumeFormatError("payload contains non-finite values")
    if kind == "complex":
        data = (payload[0::2] + 1j * payload[1::2]).reshape(dims, order="F")
        return ComplexVolume(data, voxel_size)
    return Volume(payload.reshape(dims, order="F"), voxel_size)


def save_mask(mask, path, voxel_size=(1.0, 1.0, 1.0)):
    save_volume(Volume(mask.data.astype(np.float64), voxel_size), path)


def load_mask(path):
    v = load_volume(path)
    return BinaryMask(v.data > 0.5)


# ----------------------------------------------------------------------------
# rendering

def slice_to_pgm(v, axis, index, window, path):
    """Render one slice as an 8-bit binary PGM.

    Values are clamped to ``window`` and mapped linearly to 0..255 with
    round-half-up, so the window midpoint lands on 128. The slice is written
    with the lower remaining axis along image rows (width).
    """
    lo, hi = (float(w) for w in window)
    if not hi > lo:
        raise ValueError(f"degenerate window ({lo}, {hi})")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    n = v.dims[axis]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range for axis of length {n}")
    sl = np.take(v.data, index, axis=axis)  # remaining axes in ascending order
    scaled = (np.clip(sl, lo, hi) - lo) / (hi - lo) * 255.0
    pix = np.floor(scaled + 0.5).astype(np.uint8)
    img = pix.T  # rows follow the higher axis, x-like axis fastest within a row
    height, width = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())
