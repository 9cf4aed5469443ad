"""MAP reconstruction with an edge-masked, smoothed total-variation prior."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .dipole import _apply as _apply_kernel
from .dipole import fidelity_arrays
from .volume import Volume

__all__ = [
    "RegConfig",
    "SolveOptions",
    "ReconReport",
    "DivergenceError",
    "edge_mask_from_magnitude",
    "grad3",
    "div3",
    "tv_arrays",
    "tv_value_grad",
    "medi_objective",
    "solve_medi",
    "config_hash",
]


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RegConfig:
    lam: float = 20.0
    tv_epsilon: float = 1e-6
    edge_mask: np.ndarray | None = None  # bool (3, nx, ny, nz); None means all ones

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not self.tv_epsilon > 0:
            raise ValueError("tv_epsilon must be positive")
        if self.edge_mask is not None:
            m = np.asarray(self.edge_mask, dtype=bool)
            if m.ndim != 4 or m.shape[0] != 3:
                raise ValueError("edge mask must have shape (3, nx, ny, nz)")
            self.edge_mask = m

    def weights(self, dims):
        if self.edge_mask is None:
            return np.ones((3,) + tuple(dims))
        if self.edge_mask.shape[1:] != tuple(dims):
            raise ValueError(f"edge mask dims {self.edge_mask.shape[1:]} do not match {dims}")
        return self.edge_mask.astype(np.float64)

    def describe(self):
        d = {"lam": self.lam, "tv_epsilon": self.tv_epsilon}
        if self.edge_mask is not None:
            d["edge_mask_zeros"] = int((~self.edge_mask).sum())
        return d


@dataclass
class SolveOptions:
    max_iters: int = 100
    tol: float = 1e-6
    init: str = "zeros"  # or "given" together with ``x0``
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-20
    method: str = "gn-cg"
    cg_iters: int = 30
    x0: np.ndarray | None = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class ReconReport:
    method: str
    objective: list = field(default_factory=list)
    terms: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    converged: bool = False

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


class DivergenceError(RuntimeError):
    def __init__(self, msg, report):
        super().__init__(msg)
        self.report = report


def grad3(x):
    """Forward differences, zero on the last slice of each axis (Neumann)."""
    g = np.zeros((3,) + x.shape)
    g[0, :-1] = x[1:] - x[:-1]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    g[2, :, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    return g


def div3(p):
    """Adjoint of grad3 (note: this is minus the usual divergence)."""
    out = np.zeros(p.shape[1:])
    out[1:] += p[0, :-1]
    out[:-1] -= p[0, :-1]
    out[:, 1:] += p[1, :, :-1]
    out[:, :-1] -= p[1, :, :-1]
    out[:, :, 1:] += p[2, :, :, :-1]
    out[:, :, :-1] -= p[2, :, :, :-1]
    return out


def edge_mask_from_magnitude(m0, keep_fraction=0.3, support=None):
    """Edge mask from forward differences of the magnitude image.

    Entries whose |difference| is positive and within the top
    ``keep_fraction`` of the entries inside the support are set to False
    (not penalized). A constant magnitude yields all True and a warning.
    """
    if not 0 < keep_fraction < 1:
        raise ValueError("keep_fraction must be in (0, 1)")
    g = np.abs(grad3(m0.data))
    inside = np.ones(m0.dims, dtype=bool) if support is None else support.data
    vals = g[:, inside]
    if not np.any(vals > 0):
        warnings.warn("constant magnitude: edge mask is all ones", RuntimeWarning,
                      stacklevel=2)
        return np.ones((3,) + m0.dims, dtype=bool)
    thresh = np.quantile(vals, 1.0 - keep_fraction)
    edges = (g >= thresh) & (g > 0) & inside[None]
    return ~edges


def tv_arrays(x, lam, eps, mask_w):
    g = grad3(x)
    mag = np.sqrt(g * g + eps * eps)
    value = lam * float(np.sum(mask_w * mag))
    grad = div3(lam * mask_w * g / mag)
    return value, grad


def tv_value_grad(chi, reg):
    """lam * sum over axes and voxels of M sqrt(grad^2 + eps^2), and its gradient."""
    value, grad = tv_arrays(chi.data, reg.lam, reg.tv_epsilon, reg.weights(chi.dims))
    return value, chi.like(grad)


def medi_objective(x, b, weights, kernel, reg, mask_w):
    """0.5 * (fidelity + TV): the point-mass limit of the variational objective."""
    fid, gfid = fidelity_arrays(x, b, weights, kernel)
    tv, gtv = tv_arrays(x, reg.lam, reg.tv_epsilon, mask_w)
    return 0.5 * (fid + tv), 0.5 * (gfid + gtv), 0.5 * fid, 0.5 * tv


def _cg(apply_h, rhs, n_iter, tol=1e-12):
    """Conjugate gradients on H x = rhs from x = 0."""
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rr = float(np.sum(r * r))
    stop = tol * tol * rr
    for _ in range(n_iter):
        if rr <= stop or rr == 0.0:
            break
        hp = apply_h(p)
        alpha = rr / float(np.sum(p * hp))
        x += alpha * p
        r -= alpha * hp
        rr_new = float(np.sum(r * r))
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def _gd_direction(state, x, g, gg):
    # Barzilai-Borwein trial step; the line search guarantees decrease
    if state.get("x_prev") is not None:
        s, y = x - state["x_prev"], g - state["g_prev"]
        sy = float(np.sum(s * y))
        state["step"] = float(np.sum(s * s)) / sy if sy > 0 else 2.0 * state["step"]
    else:
        state["step"] = 1.0 / max(np.sqrt(gg), 1e-300)
    state["x_prev"], state["g_prev"] = x, g
    return -g, state["step"]


def _gn_direction(x, g, b_w, kernel, reg, mask_w, dom, n_cg):
    """Lagged-diffusivity Gauss-Newton step.

    Minimizes the quadratic majorizer of the smoothed TV around ``x`` (plus
    the exact quadratic fidelity) with a few CG iterations, so the unit step
    already decreases the objective.
    """
    gx = grad3(x)
    diff = reg.lam * mask_w / np.sqrt(gx * gx + reg.tv_epsilon**2)

    def apply_h(v):
        av = _apply_kernel(v, kernel)
        return dom * (_apply_kernel(b_w * av, kernel) + 0.5 * div3(diff * grad3(v)))

    return _cg(apply_h, -g, n_cg), 1.0


def solve_medi(b, noise, kernel, reg, opts=None):
    """Minimize 0.5 * (fidelity + TV) with a monotone line-search method.

    The unknowns live on ``noise.support``; susceptibility outside it is 0.

    ``opts.method``: ``"gn-cg"`` (lagged-diffusivity Gauss-Newton with inner
    conjugate gradients) or ``"gd"`` (gradient descent, Barzilai-Borwein
    trial steps). Both accept an iterate only under the Armijo condition, so
    the objective trace is non-increasing.
    """
    opts = opts or SolveOptions()
    kernel.check_dims(b.dims)
    noise.support.check_matches(b.dims)
    if opts.method not in ("gn-cg", "gd"):
        raise ValueError(f"unknown method {opts.method!r}")
    w = noise.weights
    mask_w = reg.weights(b.dims)
    dom = noise.support.data.astype(np.float64)
    if opts.init == "given":
        x = np.array(opts.x0, dtype=np.float64)
        if x.shape != b.dims:
            raise ValueError("initial guess has the wrong shape")
        x *= dom
    else:
        x = np.zeros(b.dims)

    def objective(v):
        f_, g_, fid_, tv_ = medi_objective(v, b.data, w, kernel, reg, mask_w)
        return f_, g_ * dom, fid_, tv_

    report = ReconReport("medi", provenance={
        "reg": reg.describe(),
        "options": {k: v for k, v in asdict(opts).items() if k != "x0"},
    })
    report.provenance["config_hash"] = config_hash(report.provenance)
    fid_trace, tv_trace, step_trace = [], [], []
    report.terms = {"fidelity": fid_trace, "tv": tv_trace, "step": step_trace}
    f, g, fid, tv = objective(x)
    report.objective.append(f)
    fid_trace.append(fid)
    tv_trace.append(tv)
    gd_state = {}
    for _ in range(opts.max_iters):
        gg = float(np.sum(g * g))
        if gg == 0.0:
            report.converged = True
            break
        if opts.method == "gd":
            direction, step = _gd_direction(gd_state, x, g, gg)
        else:
            direction, step = _gn_direction(x, g, w, kernel, reg, mask_w, dom, opts.cg_iters)
        slope = float(np.sum(g * direction))
        if slope >= 0:  # not a descent direction; fall back to steepest descent
            direction, slope = -g, -gg
        while True:
            xn = x + step * direction
            fn, gn, fidn, tvn = objective(xn)
            if np.isfinite(fn) and fn <= f + opts.armijo_c * step * slope:
                break
            step *= opts.backtrack
            if step < opts.min_step:
                if not np.isfinite(fn) or fn > f + opts.tol * abs(f):
                    raise DivergenceError("line search failed to decrease the objective",
                                          report)
                xn = None
                break
        if xn is None:
            report.converged = True
            break
        rel = (f - fn) / max(abs(f), 1e-300)
        x, f, g = xn, fn, gn
        report.objective.append(f)
        fid_trace.append(fidn)
        tv_trace.append(tvn)
        step_trace.append(step)
        if rel < opts.tol:
            report.converged = True
            break
    return b.like(x), report
