"""Mean-field Gaussian variational inference for the dipole inversion.

The objective is the Monte-Carlo estimate

    -1/2 sum log var  +  1/(2K) sum_k TV(chi_k)  +  1/(2K) sum_k fid(chi_k),
    chi_k = mu + exp(log_var / 2) * eps_k,

with the TV term including lambda and the fidelity term the noise-weighted
squared residual. Variational parameters live on the data support; the
susceptibility is fixed to zero elsewhere and those voxels carry no entropy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dipole import _apply as apply_kernel
from .dipole import fidelity_arrays
from .map_solver import RegConfig, _cg as cg, config_hash, div3, grad3, tv_arrays
from .volume import SeededRng, Volume

__all__ = [
    "LOG_VAR_MIN",
    "LOG_VAR_MAX",
    "VariationalParams",
    "ViConfig",
    "KlTrace",
    "AdamState",
    "ViDivergenceError",
    "reparam_sample",
    "kl_objective",
    "kl_arrays",
    "entropy_consistency_check",
    "fit_subject_vi",
    "inference_gap_report",
]

LOG_VAR_MIN, LOG_VAR_MAX = -30.0, 5.0
TERMS = ("entropy", "prior", "fidelity")


@dataclass(frozen=True, eq=False)
class VariationalParams:
    mu: Volume
    log_var: Volume

    def __post_init__(self):
        if self.mu.dims != self.log_var.dims:
            raise ValueError("mu and log_var dims differ")
        clamped = np.clip(self.log_var.data, LOG_VAR_MIN, LOG_VAR_MAX)
        if not np.array_equal(clamped, self.log_var.data):
            object.__setattr__(self, "log_var", self.log_var.like(clamped))

    @property
    def dims(self):
        return self.mu.dims

    @property
    def sd(self):
        return self.mu.like(np.exp(0.5 * self.log_var.data))

    @classmethod
    def from_arrays(cls, mu, log_var, voxel_size=(1.0, 1.0, 1.0)):
        return cls(Volume(mu, voxel_size), Volume(log_var, voxel_size))


@dataclass
class ViConfig:
    K: int = 5
    reg: RegConfig = field(default_factory=RegConfig)
    lr: float = 1e-3
    lr_final: float | None = None  # geometric decay to this rate; None keeps lr fixed
    iterations: int = 100
    seed: int = 0
    # "adam": Adam on (mu, log_var). "newton": mean moves along a Gauss-Newton
    # preconditioned MC gradient (step mean_step -> mean_step_final), log_var by Adam.
    optimizer: str = "adam"
    mean_step: float = 1.0
    mean_step_final: float = 0.05
    cg_iters: int = 10
    average_tail: float = 0.0  # fraction of final iterates averaged into the result

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.iterations < 1 or self.lr <= 0:
            raise ValueError("iterations and lr must be positive")
        if not 0.0 <= self.average_tail < 1.0:
            raise ValueError("average_tail must be in [0, 1)")
        if self.optimizer not in ("adam", "newton"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def _decay(self, start, end, it):
        if end is None or self.iterations == 1:
            return start
        return start * (end / start) ** (it / (self.iterations - 1))

    def learning_rate(self, it):
        return self._decay(self.lr, self.lr_final, it)

    def mean_step_size(self, it):
        return self._decay(self.mean_step, self.mean_step_final, it)

    def describe(self):
        keys = ["K", "lr", "lr_final", "iterations", "seed", "optimizer", "average_tail"]
        if self.optimizer == "newton":
            keys += ["mean_step", "mean_step_final", "cg_iters"]
        d = {k: getattr(self, k) for k in keys}
        d["reg"] = self.reg.describe()
        return d


@dataclass
class KlTrace:
    entropy: list = field(default_factory=list)
    prior: list = field(default_factory=list)
    fidelity: list = field(default_factory=list)
    total: list = field(default_factory=list)

    def append(self, row):
        self.entropy.append(row["entropy"])
        self.prior.append(row["prior"])
        self.fidelity.append(row["fidelity"])
        self.total.append(row["total"])

    def __len__(self):
        return len(self.total)

    def rows(self):
        return list(zip(self.entropy, self.prior, self.fidelity, self.total))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,entropy,prior,fidelity,total\n")
            for i, r in enumerate(self.rows()):
                fh.write(f"{i}," + ",".join(repr(float(v)) for v in r) + "\n")


class AdamState:
    """Adam moments for a list of arrays (beta1 0.9, beta2 0.999, eps 1e-8)."""

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def update(self, params, grads, lr):
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            out.append(p - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


class ViDivergenceError(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def reparam_sample(params, eps):
    """chi = mu + exp(log_var / 2) * eps."""
    e = eps.data if isinstance(eps, Volume) else np.asarray(eps)
    if e.shape != params.dims:
        raise ValueError("eps dims do not match params")
    return params.mu.like(params.mu.data + np.exp(0.5 * params.log_var.data) * e)


def kl_arrays(mu, log_var, b, weights, kernel, lam, tv_eps, mask_w, domain, eps_list):
    """Objective value, per-term row, per-sample MC terms and gradients.

    ``domain`` is a float 0/1 array; outside it the sample is zero and the
    gradients vanish. Returns ``(value, row, per_sample, d_mu, d_log_var)``
    where ``per_sample[k] = TV(chi_k) + fid(chi_k)``.
    """
    K = len(eps_list)
    sd = np.exp(0.5 * log_var)
    entropy = -0.5 * float(np.sum(log_var * domain))
    prior = fid = 0.0
    per_sample = np.empty(K)
    d_mu = np.zeros_like(mu)
    d_lv = np.zeros_like(mu)
    for k, e in enumerate(eps_list):
        chi = domain * (mu + sd * e)
        tv_k, gtv = tv_arrays(chi, lam, tv_eps, mask_w)
        fid_k, gfid = fidelity_arrays(chi, b, weights, kernel)
        g = gtv + gfid
        prior += tv_k
        fid += fid_k
        per_sample[k] = tv_k + fid_k
        d_mu += g
        d_lv += g * e
    scale = 1.0 / (2.0 * K)
    prior *= scale
    fid *= scale
    d_mu *= scale * domain
    d_lv = (d_lv * scale * 0.5 * sd - 0.5) * domain
    row = {"entropy": entropy, "prior": prior, "fidelity": fid}
    row["total"] = row["entropy"] + row["prior"] + row["fidelity"]
    return row["total"], row, per_sample, d_mu, d_lv


def _draw_eps(rng, dims, K):
    return [rng.standard_normal(tuple(dims)) for _ in range(K)]


def _reg_parts(reg, dims):
    return reg.lam, reg.tv_epsilon, reg.weights(dims)


def kl_objective(params, b, noise, kernel, reg, K, rng=None, eps=None):
    """Monte-Carlo KL objective with reparameterized gradients.

    Pass ``eps`` (a list of K standard-normal arrays) to freeze the draws;
    otherwise they come from ``rng``. Returns ``(value, row, (d_mu, d_log_var))``
    with the gradients as Volumes.
    """
    dims = params.dims
    kernel.check_dims(dims)
    kernel.check_dims(b.dims)
    noise.support.check_matches(dims)
    if eps is None:
        if rng is None:
            raise ValueError("need rng or frozen eps")
        eps = _draw_eps(rng, dims, K)
    elif len(eps) != K:
        raise ValueError("number of frozen eps draws must equal K")
    eps = [e.data if isinstance(e, Volume) else np.asarray(e) for e in eps]
    lam, tv_eps, mask_w = _reg_parts(reg, dims)
    value, row, _, d_mu, d_lv = kl_arrays(
        params.mu.data, params.log_var.data, b.data, noise.weights, kernel,
        lam, tv_eps, mask_w, noise.support.data.astype(np.float64), eps)
    return value, row, (params.mu.like(d_mu), params.mu.like(d_lv))


def entropy_consistency_check(params, n_samples, rng=None, domain=None, z_max=4.0):
    """Compare the MC estimate of -E_q[log q] with the closed-form entropy."""
    if n_samples < 100:
        raise ValueError("need at least 100 samples")
    rng = rng or SeededRng(0)
    mu, lv = params.mu.data, params.log_var.data
    dom = np.ones(params.dims, dtype=bool) if domain is None else np.asarray(domain, bool)
    m, l = mu[dom], lv[dom]
    n = m.size
    sd = np.exp(0.5 * l)
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)
    vals = np.empty(n_samples)
    for i in range(n_samples):
        x = m + sd * rng.standard_normal((n,))
        vals[i] = float(np.sum(0.5 * ((x - m) / sd) ** 2 + 0.5 * l + half_log_2pi))
    mc = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_samples))
    analytic = float(0.5 * n * (1.0 + math.log(2.0 * math.pi)) + 0.5 * np.sum(l))
    z = (mc - analytic) / se if se > 0 else 0.0
    return {
        "analytic": analytic,
        "mc": mc,
        "se": se,
        "z": z,
        "passed": abs(z) <= z_max,
        "n_samples": n_samples,
        "n_voxels": n,
    }


def fit_subject_vi(b, noise, kernel, cfg, init=None):
    """Adam on per-voxel (mu, log_var) minimizing the MC KL objective.

    Fresh eps are drawn every iteration from the stream seeded by
    ``cfg.seed``. The trace row at iteration i is evaluated at the parameters
    before update i. With no ``init``: mu = 0 and var = 1e-4 ppm^2.
    """
    dims = b.dims
    kernel.check_dims(dims)
    noise.support.check_matches(dims)
    dom = noise.support.data.astype(np.float64)
    if init is None:
        mu = np.zeros(dims)
        if cfg.optimizer == "newton":
            lv = -np.log(fidelity_hessian_diag(noise, kernel) + 1e-300)
            lv = np.where(dom > 0, lv, math.log(1e-4))
        else:
            lv = np.full(dims, math.log(1e-4))
    else:
        mu = np.array(init.mu.data) * dom
        lv = np.array(init.log_var.data)
    lam, tv_eps, mask_w = _reg_parts(cfg.reg, dims)
    rng = SeededRng(cfg.seed)
    trace = KlTrace()
    w = noise.weights
    newton = cfg.optimizer == "newton"
    adam = AdamState([dims] if newton else [dims, dims])
    avg_start = cfg.iterations - int(round(cfg.average_tail * cfg.iterations))
    mu_sum, lv_sum, n_avg = np.zeros(dims), np.zeros(dims), 0
    for it in range(cfg.iterations):
        eps = _draw_eps(rng, dims, cfg.K)
        value, row, _, d_mu, d_lv = kl_arrays(mu, lv, b.data, w, kernel, lam, tv_eps,
                                              mask_w, dom, eps)
        trace.append(row)
        if not np.isfinite(value):
            raise ViDivergenceError(f"non-finite objective at iteration {it}", trace)
        if newton:
            step = _newton_mean_step(mu, lv, d_mu, w, kernel, lam, tv_eps, mask_w, dom,
                                     cfg.cg_iters)
            mu = mu - cfg.mean_step_size(it) * step
            (lv,) = adam.update([lv], [d_lv], cfg.learning_rate(it))
        else:
            mu, lv = adam.update([mu, lv], [d_mu, d_lv], cfg.learning_rate(it))
        lv = np.clip(lv, LOG_VAR_MIN, LOG_VAR_MAX)
        if it >= avg_start and avg_start < cfg.iterations and cfg.average_tail > 0:
            mu_sum += mu
            lv_sum += lv
            n_avg += 1
    if n_avg:
        mu, lv = mu_sum / n_avg, lv_sum / n_avg
    return VariationalParams(b.like(mu), b.like(lv)), trace


def fidelity_hessian_diag(noise, kernel):
    """diag(A^T W A): the noise weights convolved with the squared impulse response."""
    h = np.real(np.fft.ifftn(kernel.d_values))
    h2 = np.fft.rfftn(h * h)
    out = np.fft.irfftn(np.fft.rfftn(noise.weights) * h2, s=kernel.dims, axes=(0, 1, 2))
    return np.maximum(out, 0.0)


def _newton_mean_step(mu, lv, g, w, kernel, lam, tv_eps, mask_w, dom, n_cg):
    """Solve H d = g by CG, H the Gauss-Newton curvature of the objective in mu.

    H = A^T W A + (lam / 2) D^T diag(M / s) D, where s smooths |D mu| by the
    sample spread of each difference, sqrt(g^2 + eps^2 + var_i + var_j).
    """
    var = np.exp(lv) * dom
    gx = grad3(mu * dom)
    spread = np.zeros_like(gx)
    # variance of the forward difference between neighbours i and i + e_a
    spread[0, :-1] = var[1:] + var[:-1]
    spread[1, :, :-1] = var[:, 1:] + var[:, :-1]
    spread[2, :, :, :-1] = var[:, :, 1:] + var[:, :, :-1]
    diff = 0.5 * lam * mask_w / np.sqrt(gx * gx + tv_eps**2 + spread)

    def apply_h(v):
        return dom * (apply_kernel(w * apply_kernel(v, kernel), kernel) + div3(diff * grad3(v)))

    return cg(apply_h, g, n_cg)


def inference_gap_report(amortized, subject, b, noise, kernel, reg, K, seed):
    """Amortization gap KL(amortized) - KL(subject) on shared frozen draws.

    The standard error comes from the paired per-sample differences of the
    MC terms; the entropy parts are exact.
    """
    if amortized.dims != subject.dims:
        raise ValueError("parameter dims differ")
    dims = amortized.dims
    kernel.check_dims(dims)
    eps = _draw_eps(SeededRng(seed), dims, K)
    lam, tv_eps, mask_w = _reg_parts(reg, dims)
    dom = noise.support.data.astype(np.float64)
    out = {}
    samples = {}
    for name, p in (("amortized", amortized), ("subject", subject)):
        value, row, per, _, _ = kl_arrays(p.mu.data, p.log_var.data, b.data, noise.weights,
                                          kernel, lam, tv_eps, mask_w, dom, eps)
        out[name] = row
        samples[name] = per
    diff = 0.5 * (samples["amortized"] - samples["subject"])
    se = float(np.std(diff, ddof=1) / math.sqrt(K)) if K > 1 else float("nan")
    gap = out["amortized"]["total"] - out["subject"]["total"]
    return {
        "kl_amortized": out["amortized"]["total"],
        "kl_subject": out["subject"]["total"],
        "amortization_gap": gap,
        "gap_se": se,
        "rows": out,
        "K": K,
        "seed": seed,
        "config_hash": config_hash({"K": K, "seed": seed, "reg": reg.describe()}),
    }
