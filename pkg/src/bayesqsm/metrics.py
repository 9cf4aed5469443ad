"""Reconstruction quality metrics and uncertainty-vs-error statistics.

Conventions follow common QSM practice: RMSE and HFEN are percentages of the
reference norm over a mask, pSNR uses the peak |ref| on the mask, SSIM uses a
3D Gaussian window (sigma 1.5, radius 5).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Volume

__all__ = [
    "MetricReport",
    "UncertaintyReport",
    "rmse_pct",
    "psnr_db",
    "ssim",
    "hfen_pct",
    "log_kernel",
    "uncertainty_validation",
    "evaluate",
]

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
LOG_SIGMA = 1.5
LOG_SIZE = 15


def _arrays(x, ref, mask):
    a = np.asarray(getattr(x, "data", x), dtype=np.float64)
    r = np.asarray(getattr(ref, "data", ref), dtype=np.float64)
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {r.shape}")
    if mask is None:
        m = np.ones(a.shape, dtype=bool)
    else:
        m = np.asarray(getattr(mask, "data", mask), dtype=bool)
        if m.shape != a.shape:
            raise ValueError(f"mask shape {m.shape} does not match {a.shape}")
    return a, r, m


def rmse_pct(x, ref, mask=None):
    a, r, m = _arrays(x, ref, mask)
    den = np.linalg.norm(r[m])
    if den == 0:
        raise ValueError("reference has zero norm on the mask")
    return 100.0 * float(np.linalg.norm((a - r)[m]) / den)


def psnr_db(x, ref, mask=None):
    """20 log10(max|ref| / rms error); returns ``math.inf`` when the error is zero."""
    a, r, m = _arrays(x, ref, mask)
    err = math.sqrt(float(np.mean((a - r)[m] ** 2)))
    if err == 0:
        return math.inf
    return 20.0 * math.log10(float(np.max(np.abs(r[m]))) / err)


def _smooth(v):
    return ndimage.gaussian_filter(v, SSIM_SIGMA, mode="reflect",
                                   truncate=SSIM_RADIUS / SSIM_SIGMA)


def ssim(x, ref, mask=None, k1=0.01, k2=0.03):
    """Mean local SSIM over the mask.

    Both volumes go through the same affine map onto [0, 1], taken from
    their joint min and range, so the score is symmetric and L = 1.
    """
    a, r, m = _arrays(x, ref, mask)
    lo = min(a[m].min(), r[m].min())
    span = max(a[m].max(), r[m].max()) - lo
    if not span > 0:
        raise ValueError("degenerate data range")
    a = (a - lo) / span
    r = (r - lo) / span
    c1, c2 = k1**2, k2**2
    mx, my = _smooth(a), _smooth(r)
    vx = _smooth(a * a) - mx * mx
    vy = _smooth(r * r) - my * my
    cxy = _smooth(a * r) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    if np.array_equal(a, r):
        s = np.ones_like(s)  # guard against rounding in the variance terms
    return float(np.mean(s[m]))


def log_kernel(sigma=LOG_SIGMA, size=LOG_SIZE):
    """Zero-sum 3D Laplacian-of-Gaussian kernel."""
    h = size // 2
    ax = np.arange(-h, h + 1, dtype=np.float64)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    r2 = x * x + y * y + z * z
    g = np.exp(-r2 / (2 * sigma**2))
    g /= g.sum()
    k = g * (r2 - 3 * sigma**2) / sigma**4
    return k - k.mean()


def hfen_pct(x, ref, mask=None):
    a, r, m = _arrays(x, ref, mask)
    k = log_kernel()
    la = ndimage.convolve(a, k, mode="reflect")
    lr = ndimage.convolve(r, k, mode="reflect")
    den = np.linalg.norm(lr[m])
    if den == 0:
        raise ValueError("filtered reference has zero norm on the mask")
    return 100.0 * float(np.linalg.norm((la - lr)[m]) / den)


@dataclass
class MetricReport:
    psnr: float
    rmse: float
    ssim: float
    hfen: float
    rois: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        if math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["roi", "psnr", "rmse", "ssim", "hfen"])
            w.writerow(["all", self.psnr, self.rmse, self.ssim, self.hfen])
            for name, row in sorted(self.rois.items()):
                w.writerow([name, row["psnr"], row["rmse"], row["ssim"], row["hfen"]])


def evaluate(x, ref, mask=None, rois=None):
    """All four metrics over ``mask`` plus an optional {name: mask} table."""
    def row(m):
        return dict(psnr=psnr_db(x, ref, m), rmse=rmse_pct(x, ref, m),
                    ssim=ssim(x, ref, m), hfen=hfen_pct(x, ref, m))

    rep = MetricReport(**row(mask))
    for name, m in (rois or {}).items():
        rep.rois[name] = row(m)
    return rep


@dataclass
class UncertaintyReport:
    mae: Volume
    pearson_r: float
    top_decile_overlap: float
    flagged: bool
    n_voxels: int

    def summary(self):
        return {"pearson_r": self.pearson_r, "top_decile_overlap": self.top_decile_overlap,
                "flagged": self.flagged, "n_voxels": self.n_voxels}


def _top(v, q):
    # indices of the top fraction q; ties broken by a stable sort
    n = max(1, int(round(q * v.size)))
    return set(np.argsort(-v, kind="stable")[:n].tolist())


def uncertainty_validation(mu_ensemble, truth, sd_pred, mask=None, top=0.1):
    """Mean absolute error across repeats vs the predicted SD map.

    ``flagged`` is set (and r is nan) when either map is constant on the mask.
    """
    if len(mu_ensemble) < 2:
        raise ValueError("need at least 2 ensemble members")
    t = np.asarray(getattr(truth, "data", truth), dtype=np.float64)
    errs = np.zeros_like(t)
    for mu in mu_ensemble:
        errs += np.abs(np.asarray(getattr(mu, "data", mu)) - t)
    mae = errs / len(mu_ensemble)
    _, sd, m = _arrays(mae, sd_pred, mask)
    e, s = mae[m], sd[m]
    flagged = bool(np.ptp(e) == 0 or np.ptp(s) == 0)
    r = math.nan if flagged else float(np.corrcoef(e, s)[0, 1])
    overlap = len(_top(e, top) & _top(s, top)) / len(_top(e, top))
    vs = getattr(truth, "voxel_size", (1.0, 1.0, 1.0))
    return UncertaintyReport(Volume(mae, vs), r, overlap, flagged, int(m.sum()))
