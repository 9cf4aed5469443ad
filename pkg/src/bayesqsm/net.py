"""Dual-decoder 3D convolutional posterior network.

One encoder, two decoders (mean and log-variance) sharing the encoder's skip
features. Trained either by Gaussian negative log-likelihood on paired
(field, susceptibility) patches or by minimizing the variational KL
objective on fields alone, with the reparameterized gradients of the KL
chained into the network through reverse-mode autodiff (torch).
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .map_solver import config_hash
from .vi import LOG_VAR_MAX, LOG_VAR_MIN, KlTrace, kl_arrays
from .volume import SeededRng, Volume

__all__ = [
    "NetConfig",
    "DualDecoderNet",
    "PerVoxelModel",
    "PatchDataset",
    "MissingForwardCacheError",
    "WeightFileError",
    "TrainingDivergenceError",
    "build_net",
    "net_forward",
    "net_backward",
    "nll_loss",
    "predict",
    "train_pdi",
    "adapt_vi",
    "save_weights",
    "load_weights",
    "extract_patches",
]

WEIGHT_FORMAT = "bayesqsm-weights"
WEIGHT_VERSION = 1


class MissingForwardCacheError(RuntimeError):
    pass


class WeightFileError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    def __init__(self, msg, curves):
        super().__init__(msg)
        self.curves = curves


@dataclass
class NetConfig:
    levels: int = 2
    base_filters: int = 8
    batch_norm: bool = False
    input_scale: float = 10.0  # fields (ppm scale) are multiplied by this on input
    log_var_init: float = -4.0  # initial bias of the variance head
    seed: int = 0
    log_var_floor: float = -12.0  # lower clamp of the variance head (sd >= 2.5e-3)

    def __post_init__(self):
        if self.levels < 1 or self.base_filters < 1:
            raise ValueError("levels and base_filters must be >= 1")
        if not LOG_VAR_MIN <= self.log_var_floor < LOG_VAR_MAX:
            raise ValueError("log_var_floor must lie in the log-variance clamp range")

    def to_dict(self):
        return asdict(self)


def _conv(cin, cout, k=3):
    return nn.Conv3d(cin, cout, k, padding=k // 2)


class _Block(nn.Sequential):
    def __init__(self, cin, cout, bn):
        layers = []
        for a in (cin, cout):
            layers.append(_conv(a, cout))
            if bn:
                layers.append(nn.BatchNorm3d(cout))
            layers.append(nn.ReLU())
        super().__init__(*layers)


class _Up(nn.Sequential):
    def __init__(self, cin, cout, bn):
        layers = [nn.Upsample(scale_factor=2, mode="nearest"), _conv(cin, cout)]
        if bn:
            layers.append(nn.BatchNorm3d(cout))
        layers.append(nn.ReLU())
        super().__init__(*layers)


class _Decoder(nn.Module):
    def __init__(self, ch, bn):
        super().__init__()
        L = len(ch)
        self.ups = nn.ModuleList(_Up(ch[l + 1], ch[l], bn) for l in reversed(range(L - 1)))
        self.blocks = nn.ModuleList(_Block(2 * ch[l], ch[l], bn)
                                    for l in reversed(range(L - 1)))
        self.top = _Block(ch[0], ch[0], bn) if L == 1 else None
        self.head = nn.Conv3d(ch[0], 1, 1)

    def forward(self, feats):
        x = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(feats[:-1])):
            x = block(torch.cat([up(x), skip], dim=1))
        if self.top is not None:
            x = self.top(x)
        return self.head(x)[:, 0]


class DualDecoderNet(nn.Module):
    """Input (B, X, Y, Z) fields; output (mu, log_var), each (B, X, Y, Z)."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        ch = [config.base_filters * 2**l for l in range(config.levels)]
        bn = config.batch_norm
        self.enc = nn.ModuleList(_Block(1 if l == 0 else ch[l - 1], ch[l], bn)
                                 for l in range(config.levels))
        self.pool = nn.MaxPool3d(2)
        self.dec_mu = _Decoder(ch, bn)
        self.dec_var = _Decoder(ch, bn)
        self._init_weights(config.seed)
        self._tape = None

    def _init_weights(self, seed):
        gen = torch.Generator().manual_seed(int(seed))
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=gen)
                nn.init.zeros_(m.bias)
        with torch.no_grad():
            self.dec_var.head.bias.fill_(self.config.log_var_init)

    @property
    def divisor(self):
        return 2 ** (self.config.levels - 1)

    def forward(self, b):
        if any(n % self.divisor for n in b.shape[-3:]):
            raise ValueError(f"spatial dims {tuple(b.shape[-3:])} not divisible by "
                             f"{self.divisor}")
        x = (b * self.config.input_scale)[:, None]
        feats = []
        for l, block in enumerate(self.enc):
            if l > 0:
                x = self.pool(x)
            x = block(x)
            feats.append(x)
        mu = self.dec_mu(feats)
        log_var = torch.clamp(self.dec_var(feats), self.config.log_var_floor, LOG_VAR_MAX)
        return mu, log_var


class PerVoxelModel(nn.Module):
    """Degenerate posterior model: free per-voxel mean and log-variance, input ignored."""

    def __init__(self, dims, log_var_init=0.0):
        super().__init__()
        self.config = None
        self.mu = nn.Parameter(torch.zeros(tuple(dims), dtype=torch.float64))
        self.log_var = nn.Parameter(torch.full(tuple(dims), float(log_var_init),
                                               dtype=torch.float64))
        self._tape = None

    def forward(self, b):
        n = b.shape[0]
        return (self.mu.expand(n, *self.mu.shape),
                torch.clamp(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX).expand(n, *self.mu.shape))


def build_net(config=None):
    torch.use_deterministic_algorithms(True)
    return DualDecoderNet(config or NetConfig())


def _dtype(net):
    return next(net.parameters()).dtype


def _as_batch(b, net):
    arr = b.data if isinstance(b, Volume) else np.asarray(b)
    return torch.as_tensor(np.array(arr, order="C"), dtype=_dtype(net))[None]


def net_forward(net, b, record=False):
    """Posterior mean and log-variance for one field volume.

    With ``record=True`` the graph is kept for a following ``net_backward``.
    """
    x = _as_batch(b, net)
    if record:
        mu, lv = net(x)
        net._tape = (mu, lv)
    else:
        with torch.no_grad():
            mu, lv = net(x)
    vs = b.voxel_size if isinstance(b, Volume) else (1.0, 1.0, 1.0)
    return (Volume(mu[0].detach().double().numpy(), vs),
            Volume(lv[0].detach().double().numpy(), vs))


def net_backward(net, d_mu, d_log_var):
    """Weight gradients of <d_mu, mu> + <d_log_var, log_var> for the recorded forward."""
    if net._tape is None:
        raise MissingForwardCacheError("net_backward needs a recorded net_forward")
    mu, lv = net._tape
    net._tape = None
    dt = mu.dtype
    up_mu = torch.as_tensor(np.asarray(getattr(d_mu, "data", d_mu)), dtype=dt)[None]
    up_lv = torch.as_tensor(np.asarray(getattr(d_log_var, "data", d_log_var)), dtype=dt)[None]
    params = [p for p in net.parameters()]
    grads = torch.autograd.grad([mu, lv], params, grad_outputs=[up_mu, up_lv],
                                allow_unused=True)
    names = [n for n, _ in net.named_parameters()]
    return {n: (np.zeros(tuple(p.shape)) if g is None else g.double().numpy())
            for n, p, g in zip(names, params, grads)}


def nll_loss(mu, log_var, chi_target):
    """Sum of 0.5 * ((chi - mu)^2 exp(-log_var) + log_var) and its gradients."""
    m = np.asarray(getattr(mu, "data", mu), dtype=np.float64)
    lv = np.asarray(getattr(log_var, "data", log_var), dtype=np.float64)
    c = np.asarray(getattr(chi_target, "data", chi_target), dtype=np.float64)
    if not (m.shape == lv.shape == c.shape):
        raise ValueError("mu, log_var and target dims differ")
    r = c - m
    prec = np.exp(-lv)
    value = 0.5 * float(np.sum(r * r * prec + lv))
    return value, (-r * prec, 0.5 * (1.0 - r * r * prec))


def _nll_torch(mu, lv, chi, mask=None):
    """NLL averaged over (masked) voxels and batch."""
    per = (chi - mu) ** 2 * torch.exp(-lv) + lv
    if mask is None:
        return 0.5 * torch.mean(per)
    return 0.5 * torch.sum(per * mask) / torch.clamp(torch.sum(mask), min=1.0)


# ----------------------------------------------------------------------------
# data

def extract_patches(vol, patch, step):
    """All patches of shape ``patch`` on a regular grid with stride ``step``."""
    arr = np.asarray(getattr(vol, "data", vol))
    out = []
    starts = [range(0, n - p + 1, s) for n, p, s in zip(arr.shape, patch, step)]
    for i in starts[0]:
        for j in starts[1]:
            for k in starts[2]:
                out.append(arr[i:i + patch[0], j:j + patch[1], k:k + patch[2]])
    return out


@dataclass
class PatchDataset:
    """Field patches, optionally paired with susceptibility patches, split train/val."""

    fields: np.ndarray  # (N, X, Y, Z)
    chis: np.ndarray | None = None
    split: np.ndarray | None = None  # "train" / "val" per patch
    patch: tuple = (16, 16, 16)
    masks: np.ndarray | None = None  # tissue voxels entering the loss; None means all

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 4:
            raise ValueError("fields must be (N, X, Y, Z)")
        if self.chis is not None:
            self.chis = np.asarray(self.chis, dtype=np.float64)
            if self.chis.shape != self.fields.shape:
                raise ValueError("paired patches must have matching dims")
        if self.split is None:
            self.split = np.array(["train"] * len(self.fields))
        self.split = np.asarray(self.split)
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=bool)
            if self.masks.shape != self.fields.shape:
                raise ValueError("mask patches must match field patches")
        if not (np.all(np.isfinite(self.fields))
                and (self.chis is None or np.all(np.isfinite(self.chis)))):
            raise ValueError("patches must be finite")
        self.patch = tuple(self.fields.shape[1:])

    @classmethod
    def from_volumes(cls, items, patch=(16, 16, 16), step=(8, 8, 8), split="train"):
        """``items``: (field, chi) or (field, chi, mask) tuples; chi may be None."""
        fields, chis, masks = [], [], []
        for item in items:
            b, chi = item[0], item[1]
            fields += extract_patches(b, patch, step)
            if chi is not None:
                chis += extract_patches(chi, patch, step)
            if len(item) > 2:
                masks += extract_patches(item[2], patch, step)
        return cls(np.stack(fields), np.stack(chis) if chis else None,
                   np.array([split] * len(fields)), masks=np.stack(masks) if masks else None)

    def concat(self, other):
        def cat(a, b):
            return None if a is None or b is None else np.concatenate([a, b])

        return PatchDataset(np.concatenate([self.fields, other.fields]),
                            cat(self.chis, other.chis),
                            np.concatenate([self.split, other.split]),
                            masks=cat(self.masks, other.masks))

    def subset(self, tag):
        idx = np.flatnonzero(self.split == tag)
        return (self.fields[idx], None if self.chis is None else self.chis[idx])

    def mask_subset(self, tag):
        if self.masks is None:
            return None
        return self.masks[np.flatnonzero(self.split == tag)]

    def __len__(self):
        return len(self.fields)


# ----------------------------------------------------------------------------
# training

def predict(net, fields, batch_size=8):
    """Batched no-grad inference over (N, X, Y, Z) arrays."""
    mus, lvs = [], []
    dt = _dtype(net)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        for i in range(0, len(fields), batch_size):
            x = torch.as_tensor(np.ascontiguousarray(fields[i:i + batch_size]), dtype=dt)
            mu, lv = net(x)
            mus.append(mu.double().numpy())
            lvs.append(lv.double().numpy())
    net.train(was_training)
    return np.concatenate(mus), np.concatenate(lvs)


def _rmse_pct(x, ref):
    return 100.0 * float(np.linalg.norm(x - ref) / np.linalg.norm(ref))


def train_pdi(net, dataset, epochs=60, lr=1e-3, seed=0, batch_size=4, clip=1.0,
              keep_best=False):
    """Posterior density estimation: Adam on the Gaussian NLL of paired patches.

    The loss covers the dataset's mask voxels (all voxels without masks);
    gradient norms are clipped at ``clip`` (None disables). Returns the
    trained net and per-epoch curves (train NLL, validation NLL, validation
    mu-RMSE in percent of the target norm). NLL values are per-voxel averages.
    With ``keep_best`` the weights of the epoch with the lowest validation
    RMSE are restored at the end.
    """
    if dataset.chis is None:
        raise ValueError("posterior density estimation needs paired patches")
    torch.use_deterministic_algorithms(True)
    xtr, ytr = dataset.subset("train")
    xva, yva = dataset.subset("val")
    mtr, mva = dataset.mask_subset("train"), dataset.mask_subset("val")
    if len(xtr) == 0:
        raise ValueError("no training patches")
    dt = _dtype(net)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = SeededRng(seed)
    curves = {"train_nll": [], "val_nll": [], "val_rmse_pct": []}
    best = None
    for epoch in range(epochs):
        net.train()
        order = rng.permutation(len(xtr))
        total, count = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            x = torch.as_tensor(xtr[idx], dtype=dt)
            y = torch.as_tensor(ytr[idx], dtype=dt)
            m = None if mtr is None else torch.as_tensor(mtr[idx], dtype=dt)
            mu, lv = net(x)
            loss = _nll_torch(mu, lv, y, m)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite loss in epoch {epoch}", curves)
            opt.zero_grad()
            loss.backward()
            if clip is not None:
                nn.utils.clip_grad_norm_(net.parameters(), clip)
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        curves["train_nll"].append(total / count)
        if len(xva):
            mu, lv = predict(net, xva)
            sel = np.ones(yva.shape, dtype=bool) if mva is None else mva
            curves["val_nll"].append(nll_loss(mu[sel], lv[sel], yva[sel])[0] / sel.sum())
            curves["val_rmse_pct"].append(_rmse_pct(mu[sel], yva[sel]))
            if keep_best and (best is None or curves["val_rmse_pct"][-1] < best[0]):
                best = (curves["val_rmse_pct"][-1], copy.deepcopy(net.state_dict()))
    if best is not None:
        net.load_state_dict(best[1])
    return net, curves


def adapt_vi(net, fields, noises, kernel, reg, K=5, epochs=100, lr=1e-3, seed=0):
    """Amortized VI: Adam on network weights minimizing the MC KL objective.

    Each step uses one field volume, fresh eps, and the analytic objective
    gradients on (mu, log_var) pulled back through the network. ``reg`` is a
    single RegConfig or one per field (edge masks differ between subjects). The trace
    holds the per-epoch mean of each term over the fields.
    """
    if len(fields) != len(noises) or not fields:
        raise ValueError("need one noise model per field")
    regs = list(reg) if isinstance(reg, (list, tuple)) else [reg] * len(fields)
    if len(regs) != len(fields):
        raise ValueError("need one regularization config per field")
    torch.use_deterministic_algorithms(True)
    dims = fields[0].dims
    kernel.check_dims(dims)
    mask_ws = [r.weights(dims) for r in regs]
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = SeededRng(seed)
    trace = KlTrace()
    dt = _dtype(net)
    for epoch in range(epochs):
        net.train()
        order = rng.permutation(len(fields))
        acc = {"entropy": 0.0, "prior": 0.0, "fidelity": 0.0}
        for i in order:
            b, noise = fields[i], noises[i]
            mu_t, lv_t = net(torch.as_tensor(np.array(b.data, order="C"), dtype=dt)[None])
            mu = mu_t[0].detach().double().numpy()
            lv = lv_t[0].detach().double().numpy()
            eps = [rng.standard_normal(dims) for _ in range(K)]
            value, row, _, d_mu, d_lv = kl_arrays(
                mu, lv, b.data, noise.weights, kernel, regs[i].lam, regs[i].tv_epsilon,
                mask_ws[i], noise.support.data.astype(np.float64), eps)
            if not np.isfinite(value):
                raise TrainingDivergenceError(f"non-finite objective in epoch {epoch}", trace)
            opt.zero_grad()
            torch.autograd.backward([mu_t, lv_t], [torch.as_tensor(d_mu, dtype=dt)[None],
                                                   torch.as_tensor(d_lv, dtype=dt)[None]])
            opt.step()
            for t in acc:
                acc[t] += row[t] / len(fields)
        acc["total"] = acc["entropy"] + acc["prior"] + acc["fidelity"]
        trace.append(acc)
    return net, trace


# ----------------------------------------------------------------------------
# weight files

def save_weights(net, path):
    """JSON header line, then every state tensor as little-endian float32."""
    state = net.state_dict()
    tensors = [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")}
               for k, v in state.items()]
    head = {
        "format": WEIGHT_FORMAT,
        "version": WEIGHT_VERSION,
        "config": net.config.to_dict(),
        "config_hash": config_hash(net.config.to_dict()),
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
        for v in state.values():
            fh.write(v.detach().cpu().numpy().astype("<f4").tobytes())


def load_weights(path, expected_config=None):
    """Rebuild the network from a weight file, checking version and config."""
    raw = open(path, "rb").read()
    nl = raw.find(b"\n")
    try:
        head = json.loads(raw[:nl].decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise WeightFileError(f"malformed weight header: {exc}") from exc
    if head.get("format") != WEIGHT_FORMAT or head.get("version") != WEIGHT_VERSION:
        raise WeightFileError(f"unsupported weight file {head.get('format')} "
                              f"v{head.get('version')}")
    config = NetConfig(**head["config"])
    if expected_config is not None and asdict(expected_config) != asdict(config):
        raise WeightFileError("weight file config does not match the expected config")
    net = build_net(config)
    state = net.state_dict()
    names = [t["name"] for t in head["tensors"]]
    if names != list(state.keys()):
        raise WeightFileError("tensor layout does not match the configured architecture")
    payload = np.frombuffer(raw[nl + 1:], dtype="<f4")
    off = 0
    new_state = {}
    for t in head["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        if off + n > payload.size:
            raise WeightFileError("weight payload is truncated")
        arr = payload[off:off + n].reshape(t["shape"])
        new_state[t["name"]] = torch.as_tensor(arr.copy()).to(state[t["name"]].dtype)
        off += n
    if off != payload.size:
        raise WeightFileError("weight payload has trailing data")
    net.load_state_dict(new_state)
    return net
