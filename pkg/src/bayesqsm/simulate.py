"""Phantoms and the multi-echo field simulation pipeline.

Pipeline per repeat: susceptibility -> dipole field -> complex multi-echo
signal with Gaussian noise on real and imaginary parts -> temporal phase
unwrapping -> magnitude-weighted linear fit of phase against echo time, which
yields the field estimate and its per-voxel standard error.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln

from .dipole import forward_field
from .volume import BinaryMask, ComplexVolume, SeededRng, Volume

__all__ = [
    "Primitive",
    "PhantomSpec",
    "TissueMaps",
    "EchoConfig",
    "build_phantom",
    "support_box",
    "synthesize_field",
    "synthesize_echoes",
    "fit_field",
    "zero_magnitude_mask",
    "run_ensemble",
    "random_phantom_spec",
    "analytic_field_sd",
]

CHI_RANGE = (-1.0, 2.0)
KINDS = ("sphere", "cylinder", "cuboid")


@dataclass
class Primitive:
    """Geometric inclusion. Coordinates in mm relative to voxel ``n // 2``.

    ``size`` per kind: sphere ``(radius,)``; cylinder ``(radius, half_length)``
    with its axis along z; cuboid ``(hx, hy, hz)`` half-widths.
    """

    kind: str
    center: tuple
    size: tuple
    chi: float
    m0: float = 1.0
    r2star: float = 0.02

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = tuple(float(c) for c in self.center)
        self.size = tuple(float(s) for s in np.atleast_1d(self.size))
        need = {"sphere": 1, "cylinder": 2, "cuboid": 3}[self.kind]
        if len(self.center) != 3 or len(self.size) != need:
            raise ValueError(f"{self.kind} needs 3 center coords and {need} size values")
        if any(s <= 0 for s in self.size):
            raise ValueError("primitive sizes must be positive")
        if not CHI_RANGE[0] <= self.chi <= CHI_RANGE[1]:
            raise ValueError(f"susceptibility {self.chi} outside {CHI_RANGE} ppm")
        if self.m0 < 0 or self.r2star < 0:
            raise ValueError("m0 and r2star must be nonnegative")

    def half_extent(self):
        if self.kind == "sphere":
            return (self.size[0],) * 3
        if self.kind == "cylinder":
            return (self.size[0], self.size[0], self.size[1])
        return self.size

    def contains(self, x, y, z):
        cx, cy, cz = self.center
        dx, dy, dz = x - cx, y - cy, z - cz
        if self.kind == "sphere":
            return dx**2 + dy**2 + dz**2 <= self.size[0] ** 2
        if self.kind == "cylinder":
            return (dx**2 + dy**2 <= self.size[0] ** 2) & (np.abs(dz) <= self.size[1])
        hx, hy, hz = self.size
        return (np.abs(dx) <= hx) & (np.abs(dy) <= hy) & (np.abs(dz) <= hz)


@dataclass
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    voxel_size: tuple = (1.0, 1.0, 1.0)
    primitives: list = field(default_factory=list)
    background_m0: float = 1.0
    background_r2star: float = 0.02
    margin: float = 0.125  # empty fraction of each dimension on each side

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p)
                           for p in self.primitives]
        if not 0 <= self.margin < 0.5:
            raise ValueError("margin must be in [0, 0.5)")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class TissueMaps:
    chi: Volume
    m0: Volume
    r2star: Volume
    support: BinaryMask


@dataclass
class EchoConfig:
    echo_times: tuple = (5.0, 10.0, 15.0, 20.0)  # ms
    noise_sd: float = 0.01
    phase_scale: float = 0.8  # rad per ppm per ms, ~gamma*B0 at 3 T
    phi0: float = 0.0
    sd_floor: float = 1e-6

    def __post_init__(self):
        self.echo_times = tuple(float(t) for t in self.echo_times)
        t = np.asarray(self.echo_times)
        if t.size < 2 or np.any(np.diff(t) <= 0) or t[0] <= 0:
            raise ValueError("need >= 2 positive, strictly increasing echo times")
        if self.noise_sd < 0:
            raise ValueError("noise sd must be nonnegative")
        if self.phase_scale <= 0 or self.sd_floor <= 0:
            raise ValueError("phase_scale and sd_floor must be positive")
        if self.phi0 != 0.0:
            raise ValueError("only phi0 = 0 is supported")

    def to_dict(self):
        return asdict(self)


def support_box(dims, margin):
    lo = [int(math.ceil(margin * n)) for n in dims]
    box = np.zeros(dims, dtype=bool)
    box[lo[0]:dims[0] - lo[0], lo[1]:dims[1] - lo[1], lo[2]:dims[2] - lo[2]] = True
    return box, lo


def _coords(dims, voxel_size):
    return np.meshgrid(*((np.arange(n) - n // 2) * v for n, v in zip(dims, voxel_size)),
                       indexing="ij")


def build_phantom(spec):
    """Voxelize primitives by voxel-center membership; later ones paint over earlier."""
    dims, vs = spec.dims, spec.voxel_size
    support, lo = support_box(dims, spec.margin)
    # support bounds in mm, inclusive of the outermost voxel centers
    lo_mm = [(l - n // 2) * v for l, n, v in zip(lo, dims, vs)]
    hi_mm = [(n - 1 - l - n // 2) * v for l, n, v in zip(lo, dims, vs)]
    x, y, z = _coords(dims, vs)

    chi = np.zeros(dims)
    m0 = np.where(support, spec.background_m0, 0.0)
    r2 = np.where(support, spec.background_r2star, 0.0)
    for i, p in enumerate(spec.primitives):
        for c, h, a, b in zip(p.center, p.half_extent(), lo_mm, hi_mm):
            if c - h < a - 1e-9 or c + h > b + 1e-9:
                raise ValueError(f"primitive {i} ({p.kind}) extends outside the support")
        inside = p.contains(x, y, z) & support
        chi[inside] = p.chi
        m0[inside] = p.m0
        r2[inside] = p.r2star
    return TissueMaps(Volume(chi, vs), Volume(m0, vs), Volume(r2, vs), BinaryMask(support))


def synthesize_field(maps, kernel):
    return forward_field(maps.chi, kernel)


def synthesize_echoes(maps, field_vol, cfg, rng):
    """Complex signal per echo: M0 exp(-R2* t) exp(i b s t) + complex noise."""
    if field_vol.dims != maps.chi.dims:
        raise ValueError("field dims do not match tissue maps")
    out = []
    for t in cfg.echo_times:
        s = maps.m0.data * np.exp(-maps.r2star.data * t) * np.exp(
            1j * (cfg.phi0 + field_vol.data * cfg.phase_scale * t))
        if cfg.noise_sd > 0:
            s = s + cfg.noise_sd * (rng.standard_normal(s.shape)
                                    + 1j * rng.standard_normal(s.shape))
        out.append(ComplexVolume(s, field_vol.voxel_size))
    return out


def _c4(nu):
    """E[s]/sigma for a sample SD with ``nu`` degrees of freedom."""
    return math.exp(0.5 * math.log(2.0 / nu) + gammaln((nu + 1) / 2) - gammaln(nu / 2))


def zero_magnitude_mask(echoes):
    mags = np.stack([np.abs(e.data) for e in echoes])
    return BinaryMask(np.all(mags == 0, axis=0))


def fit_field(echoes, cfg):
    """Field and its standard error from a weighted fit of unwrapped phase vs time.

    The phase at t = 0 is pinned to phi0 = 0 and prepended before unwrapping,
    so each step unwraps the increment over one echo spacing. The fit is a
    line through the origin with weights |S_j|^2 (inverse phase variance up
    to the common noise level). The noise level is estimated from weighted
    residuals with n - 1 degrees of freedom and bias-corrected by c4.
    """
    if len(echoes) < 2:
        raise ValueError("need at least two echoes")
    t = np.asarray(cfg.echo_times[: len(echoes)], dtype=np.float64)
    if t.size != len(echoes):
        raise ValueError("echo count does not match the echo config")
    sig = np.stack([e.data for e in echoes])
    w = np.abs(sig) ** 2
    phase = np.concatenate([np.zeros((1,) + sig.shape[1:]), np.angle(sig)])
    phase = np.unwrap(phase, axis=0)[1:]

    tt = t[:, None, None, None]
    swt2 = np.sum(w * tt**2, axis=0)
    dead = swt2 <= 0
    safe = np.where(dead, 1.0, swt2)
    slope = np.sum(w * tt * phase, axis=0) / safe
    resid = phase - slope * tt
    nu = t.size - 1
    sigma2 = np.sum(w * resid**2, axis=0) / nu
    sd_slope = np.sqrt(sigma2 / safe) / _c4(nu)

    field_est = np.where(dead, 0.0, slope / cfg.phase_scale)
    sd = np.where(dead, cfg.sd_floor, np.maximum(sd_slope / cfg.phase_scale, cfg.sd_floor))
    vs = echoes[0].voxel_size
    return Volume(field_est, vs), Volume(sd, vs)


def analytic_field_sd(m0, r2star, cfg):
    """Closed-form SD of the weighted slope estimate for known magnitudes."""
    t = np.asarray(cfg.echo_times)
    m0 = np.asarray(m0, dtype=np.float64)[..., None]
    r2 = np.asarray(r2star, dtype=np.float64)[..., None]
    energy = np.sum((m0 * np.exp(-r2 * t)) ** 2 * t**2, axis=-1)
    return cfg.noise_sd / (cfg.phase_scale * np.sqrt(energy))


def run_ensemble(maps, kernel, cfg, n_repeats, base_seed):
    """Repeat echo synthesis and field fitting with child streams (base_seed, i)."""
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    truth = synthesize_field(maps, kernel)
    root = SeededRng(base_seed)
    out = []
    for i in range(n_repeats):
        echoes = synthesize_echoes(maps, truth, cfg, root.child(i))
        out.append(fit_field(echoes, cfg))
    return out


def random_phantom_spec(rng, dims=(32, 32, 32), voxel_size=(1.0, 1.0, 1.0),
                        n_primitives=6, chi_range=(-0.1, 0.2), margin=0.125,
                        anomaly=None):
    """Random non-anomalous inclusions, plus an optional anomaly sphere.

    ``anomaly`` is a dict with ``chi`` and ``radius`` (mm); it is placed last
    so it paints over the ordinary inclusions.
    """
    dims = tuple(dims)
    support, lo = support_box(dims, margin)
    lo_mm = np.array([(l - n // 2) * v for l, n, v in zip(lo, dims, voxel_size)])
    hi_mm = np.array([(n - 1 - l - n // 2) * v for l, n, v in zip(lo, dims, voxel_size)])
    span = hi_mm - lo_mm
    prims = []
    for _ in range(n_primitives):
        kind = KINDS[int(rng.integers(0, 3))]
        u = rng.uniform(4)
        chi = float(chi_range[0] + (chi_range[1] - chi_range[0]) * u[0])
        m0 = float(0.4 + 0.6 * u[1])
        r2 = float(0.01 + 0.04 * u[2])
        small = 0.08 * span.min()
        big = 0.25 * span.min()
        if kind == "sphere":
            size = (small + (big - small) * u[3],)
        elif kind == "cylinder":
            size = (small + (big - small) * u[3], big)
        else:
            size = tuple(small + (big - small) * rng.uniform(3))
        half = np.array(Primitive(kind, (0, 0, 0), size, chi).half_extent())
        room = np.maximum(span - 2 * half, 0.0)
        center = lo_mm + half + room * rng.uniform(3)
        prims.append(Primitive(kind, tuple(center), size, chi, m0, r2))
    if anomaly is not None:
        r = float(anomaly.get("radius", 3.0))
        room = np.maximum(span - 2 * r, 0.0)
        center = lo_mm + r + room * (0.25 + 0.5 * rng.uniform(3))
        prims.append(Primitive("sphere", tuple(center), (r,), float(anomaly["chi"]),
                               float(anomaly.get("m0", 0.5)),
                               float(anomaly.get("r2star", 0.06))))
    return PhantomSpec(dims, voxel_size, prims, margin=margin)
