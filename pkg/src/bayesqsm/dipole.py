"""k-space dipole kernel, field operator and the weighted data-fidelity term."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .volume import BinaryMask, Volume

__all__ = [
    "KSpaceKernel",
    "NoiseModel",
    "build_dipole_kernel",
    "forward_field",
    "adjoint_field",
    "fidelity_value_grad",
    "imaginary_residue",
]


@dataclass(frozen=True, eq=False)
class KSpaceKernel:
    dims: tuple
    voxel_size: tuple
    b0_dir: tuple
    d_values: np.ndarray  # full FFT grid, numpy frequency ordering

    @property
    def d_half(self):
        """Kernel restricted to the rfftn half-spectrum."""
        try:
            return self._d_half
        except AttributeError:
            half = np.ascontiguousarray(self.d_values[:, :, : self.dims[2] // 2 + 1])
            object.__setattr__(self, "_d_half", half)
            return half

    def check_dims(self, dims):
        if tuple(dims) != self.dims:
            raise ValueError(f"dims {tuple(dims)} do not match kernel dims {self.dims}")


def build_dipole_kernel(dims, voxel_size=(1.0, 1.0, 1.0), b0_dir=(0.0, 0.0, 1.0)):
    """d(k) = 1/3 - (k.b0)^2/|k|^2 on the physical frequency grid, d(0) = 0.

    The grid is symmetrized under the index map i -> -i so even-length axes
    (whose Nyquist bin is its own mirror) still give an exactly even kernel.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or any(n < 2 for n in dims):
        raise ValueError(f"need at least 2 samples per axis, got {dims}")
    vs = np.asarray(voxel_size, dtype=np.float64)
    if vs.shape != (3,) or not np.all(np.isfinite(vs)) or np.any(vs < np.finfo(float).tiny):
        raise ValueError(f"invalid voxel size {voxel_size}")
    b0 = np.asarray(b0_dir, dtype=np.float64)
    if b0.shape != (3,) or abs(np.linalg.norm(b0) - 1.0) > 1e-9:
        raise ValueError(f"b0_dir must be a unit 3-vector, got {b0_dir}")

    kx, ky, kz = np.meshgrid(*(np.fft.fftfreq(n, d=v) for n, v in zip(dims, vs)),
                             indexing="ij")
    k2 = kx**2 + ky**2 + kz**2
    kb = kx * b0[0] + ky * b0[1] + kz * b0[2]
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 / 3.0 - kb**2 / k2
    d[0, 0, 0] = 0.0
    mirror = np.roll(d[::-1, ::-1, ::-1], 1, axis=(0, 1, 2))
    d = 0.5 * (d + mirror)
    return KSpaceKernel(dims, tuple(float(v) for v in vs), tuple(b0.tolist()), d)


def _apply(x, kernel):
    return scipy.fft.irfftn(scipy.fft.rfftn(x) * kernel.d_half, s=kernel.dims)


def imaginary_residue(x, kernel):
    """Relative imaginary part of the full complex-FFT evaluation of A x."""
    y = np.fft.ifftn(np.fft.fftn(x) * kernel.d_values)
    norm = np.linalg.norm(y.real)
    return float(np.linalg.norm(y.imag) / norm) if norm > 0 else 0.0


def forward_field(chi, kernel):
    """Noiseless field F^H D F chi (circular convolution)."""
    kernel.check_dims(chi.dims)
    return chi.like(_apply(chi.data, kernel))


def adjoint_field(y, kernel):
    """A^T y. The multiplier is real and even, so this is the forward map."""
    kernel.check_dims(y.dims)
    return y.like(_apply(y.data, kernel))


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Per-voxel noise SD of the field plus the support where data counts."""

    sd_map: Volume
    support: BinaryMask

    def __post_init__(self):
        self.support.check_matches(self.sd_map.dims)
        if np.any(self.sd_map.data[self.support.data] <= 0):
            raise ValueError("noise sd must be strictly positive inside the support")

    @property
    def weights(self):
        """support / sd^2, the diagonal of the inverse noise covariance."""
        try:
            return self._w
        except AttributeError:
            w = np.zeros(self.sd_map.dims)
            s = self.support.data
            w[s] = 1.0 / self.sd_map.data[s] ** 2
            w.setflags(write=False)
            object.__setattr__(self, "_w", w)
            return w


def fidelity_arrays(chi, b, weights, kernel):
    """Array kernel of fidelity_value_grad: sum w (A chi - b)^2 and its gradient."""
    r = _apply(chi, kernel) - b
    wr = weights * r
    return float(np.sum(wr * r)), 2.0 * _apply(wr, kernel)


def fidelity_value_grad(chi, b, noise, kernel):
    """Sum over support of ((A chi - b)/sd)^2 and its gradient in chi."""
    kernel.check_dims(chi.dims)
    kernel.check_dims(b.dims)
    noise.support.check_matches(chi.dims)
    value, grad = fidelity_arrays(chi.data, b.data, noise.weights, kernel)
    return value, chi.like(grad)
