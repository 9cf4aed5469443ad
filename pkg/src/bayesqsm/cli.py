"""Command-line driver: phantom -> simulate -> reconstruct -> evaluate -> render.

Each subcommand reads an optional JSON config (validated against a schema,
defaults filled in), writes its outputs plus ``provenance.json`` into
``--out``, and is deterministic given (config, seed). Set BAYESQSM_THREADS
to bound the numeric thread pools.
"""
from __future__ import annotations

import os

_THREADS = os.environ.get("BAYESQSM_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import copy
import csv
import hashlib
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__

SEED = {"type": "integer", "minimum": 0, "default": 0}
POS = {"type": "number", "exclusiveMinimum": 0}
VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
DIMS = {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 3,
        "maxItems": 3, "default": [32, 32, 32]}
PATH = {"type": "string"}
OPT_PATH = {"type": ["string", "null"], "default": None}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


ECHO = {
    "echo_times": {"type": "array", "items": POS, "minItems": 2, "default": [5.0, 10.0, 15.0, 20.0]},
    "noise_sd": {"type": "number", "minimum": 0, "default": 0.01},
    "phase_scale": dict(POS, default=0.8),
}
REG = {
    "lam": {"type": "number", "minimum": 0, "default": 20.0},
    "tv_epsilon": dict(POS, default=1e-6),
    "keep_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1,
                      "default": 0.3},
}
INPUTS = {"field": PATH, "sd": PATH, "support": PATH, "m0": OPT_PATH,
          "b0_dir": dict(VEC3, default=[0.0, 0.0, 1.0])}
MEDI = {
    "max_iters": {"type": "integer", "minimum": 1, "default": 100},
    "tol": {"type": "number", "minimum": 0, "default": 1e-6},
    "method": {"enum": ["gn-cg", "gd"], "default": "gn-cg"},
    "cg_iters": {"type": "integer", "minimum": 1, "default": 30},
}
VI = {
    "K": {"type": "integer", "minimum": 1, "default": 5},
    "lr": dict(POS, default=0.05),
    "lr_final": {"type": ["number", "null"], "exclusiveMinimum": 0, "default": 1e-3},
    "iterations": {"type": "integer", "minimum": 1, "default": 1000},
    "optimizer": {"enum": ["adam", "newton"], "default": "newton"},
    "mean_step": dict(POS, default=1.0),
    "mean_step_final": dict(POS, default=0.05),
    "cg_iters": {"type": "integer", "minimum": 1, "default": 60},
    "average_tail": {"type": "number", "minimum": 0, "exclusiveMaximum": 1, "default": 0.5},
    "init_mu": OPT_PATH,
    "init_log_var": OPT_PATH,
    "gap_K": {"type": "integer", "minimum": 2, "default": 16},
}
NET = _obj({
    "levels": {"type": "integer", "minimum": 1, "default": 2},
    "base_filters": {"type": "integer", "minimum": 1, "default": 8},
    "batch_norm": {"type": "boolean", "default": False},
    "input_scale": dict(POS, default=10.0),
    "log_var_init": {"type": "number", "default": -4.0},
    "log_var_floor": {"type": "number", "minimum": -30, "maximum": 5, "default": -12.0},
    "seed": SEED,
})
NET["default"] = {}
ANOMALY = {"type": ["object", "null"], "default": None, "additionalProperties": False,
           "properties": {"chi": {"type": "number"}, "radius": POS, "m0": POS, "r2star": POS},
           "required": ["chi", "radius"]}
PRIMITIVE = _obj({
    "kind": {"enum": ["sphere", "cylinder", "cuboid"]},
    "center": VEC3,
    "size": {"type": "array", "items": POS, "minItems": 1, "maxItems": 3},
    "chi": {"type": "number"},
    "m0": POS,
    "r2star": {"type": "number", "minimum": 0},
}, required=("kind", "center", "size", "chi"))

SCHEMAS = {
    "phantom": _obj({
        "seed": SEED,
        "dims": DIMS,
        "voxel_size": dict(VEC3, default=[1.0, 1.0, 1.0]),
        "margin": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5, "default": 0.125},
        "background_m0": dict(POS, default=1.0),
        "background_r2star": {"type": "number", "minimum": 0, "default": 0.02},
        "primitives": {"type": "array", "items": PRIMITIVE, "default": []},
        "n_primitives": {"type": "integer", "minimum": 0, "default": 6},
        "chi_range": {"type": "array", "items": {"type": "number"}, "minItems": 2,
                      "maxItems": 2, "default": [-0.1, 0.2]},
        "anomaly": ANOMALY,
    }),
    "simulate": _obj(dict(ECHO, **{
        "seed": SEED,
        "phantom_dir": PATH,
        "n_repeats": {"type": "integer", "minimum": 1, "default": 1},
        "b0_dir": dict(VEC3, default=[0.0, 0.0, 1.0]),
    }), required=("phantom_dir",)),
    "medi": _obj(dict(INPUTS, **REG, **MEDI, seed=SEED), required=("field", "sd", "support")),
    "vi": _obj(dict(INPUTS, **REG, **VI, seed=SEED), required=("field", "sd", "support")),
    "train-pdi": _obj({
        "seed": SEED,
        "data_seed": {"type": "integer", "minimum": 0, "default": 100},
        "dims": DIMS,
        "n_train": {"type": "integer", "minimum": 1, "default": 20},
        "n_val": {"type": "integer", "minimum": 0, "default": 4},
        "train_step": {"type": "integer", "minimum": 1, "default": 8},
        "val_step": {"type": "integer", "minimum": 1, "default": 8},
        "epochs": {"type": "integer", "minimum": 1, "default": 60},
        "lr": dict(POS, default=1e-3),
        "batch_size": {"type": "integer", "minimum": 1, "default": 16},
        "keep_best": {"type": "boolean", "default": True},
        "net": NET,
    }),
    "adapt-vi": _obj(dict(REG, **{
        "seed": SEED,
        "weights": OPT_PATH,
        "data_seed": {"type": "integer", "minimum": 0, "default": 700},
        "dims": DIMS,
        "n_subjects": {"type": "integer", "minimum": 1, "default": 4},
        "anomaly": dict(ANOMALY, default={"chi": 1.0, "radius": 3.5}),
        "epochs": {"type": "integer", "minimum": 1, "default": 100},
        "lr": dict(POS, default=1e-3),
        "K": {"type": "integer", "minimum": 1, "default": 5},
        "net": NET,
    })),
    "reconstruct": _obj(dict(INPUTS, **{
        "seed": SEED,
        "method": {"enum": ["medi", "vi", "pdi", "pdi-vi0", "pdi-vi"]},
        "weights": OPT_PATH,
        "reg": dict(_obj(REG), default={}),
        "medi": dict(_obj(MEDI), default={}),
        "vi": dict(_obj(VI), default={}),
    }), required=("method", "field", "sd", "support")),
    "evaluate": _obj({
        "seed": SEED,
        "recon": PATH,
        "truth": PATH,
        "mask": OPT_PATH,
        "rois": {"type": "object", "additionalProperties": PATH, "default": {}},
        "sd": OPT_PATH,
        "ensemble": {"type": "array", "items": PATH, "default": []},
    }, required=("recon", "truth")),
    "render": _obj({
        "seed": SEED,
        "volume": PATH,
        "axis": {"enum": [0, 1, 2], "default": 2},
        "index": {"type": ["integer", "null"], "default": None},
        "window": {"type": ["array", "null"], "items": {"type": "number"}, "minItems": 2,
                   "maxItems": 2, "default": None},
        "name": {"type": "string", "default": "slice.pgm"},
    }, required=("volume",)),
    "repro": _obj({"seed": SEED}),
}


class ConfigError(ValueError):
    pass


def _defaults(schema, value):
    """Fill object defaults recursively (defaults are deep-copied)."""
    if schema.get("type") == "object" or "properties" in schema:
        if not isinstance(value, dict):
            return value
        out = dict(value)
        for key, sub in schema.get("properties", {}).items():
            if key not in out and "default" in sub:
                out[key] = copy.deepcopy(sub["default"])
            if key in out:
                out[key] = _defaults(sub, out[key])
        return out
    return value


def resolve_config(command, raw=None, seed=None, partial=False):
    """Validate ``raw`` for ``command``; returns the config with defaults filled.

    ``partial`` tolerates missing required keys (used by --print-config).
    """
    schema = SCHEMAS[command]
    cfg = copy.deepcopy(raw) if raw is not None else {}
    if seed is not None and isinstance(cfg, dict):
        cfg["seed"] = seed
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if partial:
        errors = [e for e in errors if e.validator != "required"]
    if errors:
        lines = []
        for e in errors:
            pointer = "/" + "/".join(str(p) for p in e.absolute_path)
            lines.append(f"{pointer}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    return _defaults(schema, cfg)


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_digest(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_provenance(out, command, cfg, inputs):
    record = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_hash": config_digest(cfg),
        "seed": cfg.get("seed"),
        "inputs": {k: {"path": str(p), "sha256": file_hash(p)} for k, p in sorted(inputs.items())},
    }
    with open(out / "provenance.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------------
# shared helpers

def _thread_setup():
    if _THREADS:
        import torch
        torch.set_num_threads(int(_THREADS))


def _load_inputs(cfg):
    from .dipole import NoiseModel, build_dipole_kernel
    from .volume import load_mask, load_volume

    field = load_volume(cfg["field"])
    sd = load_volume(cfg["sd"])
    support = load_mask(cfg["support"])
    if not (field.dims == sd.dims == support.dims):
        raise ValueError(f"dims mismatch: field {field.dims}, sd {sd.dims}, "
                         f"support {support.dims}")
    # the noise model only needs a positive sd inside the support
    sd = sd.like(np.where(support.data, np.maximum(sd.data, 1e-12), 1.0))
    field = field.like(field.data * support.data)
    kernel = build_dipole_kernel(field.dims, field.voxel_size, cfg.get("b0_dir", (0, 0, 1)))
    inputs = {k: cfg[k] for k in ("field", "sd", "support")}
    return field, NoiseModel(sd, support), kernel, inputs


def _reg(cfg, support, reg_cfg):
    from .map_solver import RegConfig, edge_mask_from_magnitude
    from .volume import load_volume

    em = None
    if cfg.get("m0"):
        em = edge_mask_from_magnitude(load_volume(cfg["m0"]), reg_cfg["keep_fraction"], support)
    return RegConfig(reg_cfg["lam"], reg_cfg["tv_epsilon"], em)


def _write_medi(out, x, report):
    from .volume import save_volume

    save_volume(x, out / "chi.vol")
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "fidelity", "tv", "step"])
        steps = [""] + [repr(s) for s in report.terms["step"]]
        for i, f in enumerate(report.objective):
            w.writerow([i, repr(f), repr(report.terms["fidelity"][i]),
                        repr(report.terms["tv"][i]), steps[i]])
    report.to_json(out / "report.json")


def _run_medi(cfg, out, reg_cfg, medi_cfg):
    from .map_solver import SolveOptions, solve_medi

    field, noise, kernel, inputs = _load_inputs(cfg)
    reg = _reg(cfg, noise.support, reg_cfg)
    opts = SolveOptions(max_iters=medi_cfg["max_iters"], tol=medi_cfg["tol"],
                        method=medi_cfg["method"], cg_iters=medi_cfg["cg_iters"])
    x, report = solve_medi(field, noise, kernel, reg, opts)
    _write_medi(out, x, report)
    if cfg.get("m0"):
        inputs["m0"] = cfg["m0"]
    return inputs


def _run_vi(cfg, out, reg_cfg, vi_cfg, seed):
    from .vi import VariationalParams, ViConfig, fit_subject_vi, inference_gap_report
    from .volume import load_volume, save_volume

    field, noise, kernel, inputs = _load_inputs(cfg)
    reg = _reg(cfg, noise.support, reg_cfg)
    vc = ViConfig(K=vi_cfg["K"], reg=reg, lr=vi_cfg["lr"], lr_final=vi_cfg["lr_final"],
                  iterations=vi_cfg["iterations"], seed=seed, optimizer=vi_cfg["optimizer"],
                  mean_step=vi_cfg["mean_step"], mean_step_final=vi_cfg["mean_step_final"],
                  cg_iters=vi_cfg["cg_iters"], average_tail=vi_cfg["average_tail"])
    init = None
    if vi_cfg["init_mu"] or vi_cfg["init_log_var"]:
        if not (vi_cfg["init_mu"] and vi_cfg["init_log_var"]):
            raise ValueError("init_mu and init_log_var must be given together")
        init = VariationalParams(load_volume(vi_cfg["init_mu"]),
                                 load_volume(vi_cfg["init_log_var"]))
        inputs["init_mu"], inputs["init_log_var"] = vi_cfg["init_mu"], vi_cfg["init_log_var"]
    params, trace = fit_subject_vi(field, noise, kernel, vc, init)
    save_volume(params.mu, out / "mu.vol")
    save_volume(params.sd, out / "sd.vol")
    save_volume(params.log_var, out / "log_var.vol")
    trace.to_csv(out / "trace.csv")
    report = {"method": "vi", "config": vc.describe(), "final": {
        "entropy": trace.entropy[-1], "prior": trace.prior[-1],
        "fidelity": trace.fidelity[-1], "total": trace.total[-1]}}
    if init is not None:
        report["gap"] = inference_gap_report(init, params, field, noise, kernel, reg,
                                             vi_cfg["gap_K"], seed)
        with open(out / "gap_report.json", "w") as fh:
            json.dump(report["gap"], fh, indent=2, sort_keys=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    if cfg.get("m0"):
        inputs["m0"] = cfg["m0"]
    return inputs


def _net_config(d):
    from .net import NetConfig
    return NetConfig(**d)


# ----------------------------------------------------------------------------
# subcommands

def cmd_phantom(cfg, out):
    from .simulate import PhantomSpec, build_phantom, random_phantom_spec
    from .volume import SeededRng, save_mask, save_volume

    if cfg["primitives"]:
        spec = PhantomSpec(cfg["dims"], cfg["voxel_size"], cfg["primitives"],
                           cfg["background_m0"], cfg["background_r2star"], cfg["margin"])
    else:
        spec = random_phantom_spec(SeededRng(cfg["seed"]), cfg["dims"], cfg["voxel_size"],
                                   cfg["n_primitives"], tuple(cfg["chi_range"]),
                                   cfg["margin"], cfg["anomaly"])
        spec.background_m0 = cfg["background_m0"]
        spec.background_r2star = cfg["background_r2star"]
    maps = build_phantom(spec)
    save_volume(maps.chi, out / "chi.vol")
    save_volume(maps.m0, out / "m0.vol")
    save_volume(maps.r2star, out / "r2star.vol")
    save_mask(maps.support, out / "support.vol", maps.chi.voxel_size)
    return {}


def cmd_simulate(cfg, out):
    from .dipole import build_dipole_kernel
    from .simulate import EchoConfig, TissueMaps, run_ensemble
    from .volume import load_mask, load_volume, save_volume

    src = Path(cfg["phantom_dir"])
    names = {n: src / f"{n}.vol" for n in ("chi", "m0", "r2star", "support")}
    chi = load_volume(names["chi"])
    maps = TissueMaps(chi, load_volume(names["m0"]), load_volume(names["r2star"]),
                      load_mask(names["support"]))
    kernel = build_dipole_kernel(chi.dims, chi.voxel_size, cfg["b0_dir"])
    echo = EchoConfig(tuple(cfg["echo_times"]), cfg["noise_sd"], cfg["phase_scale"])
    for i, (fe, sd) in enumerate(run_ensemble(maps, kernel, echo, cfg["n_repeats"],
                                              cfg["seed"])):
        save_volume(fe, out / f"field_{i:03d}.vol")
        save_volume(sd, out / f"sd_{i:03d}.vol")
    return names


def cmd_medi(cfg, out):
    return _run_medi(cfg, out, cfg, cfg)


def cmd_vi(cfg, out):
    return _run_vi(cfg, out, cfg, cfg, cfg["seed"])


def cmd_train_pdi(cfg, out):
    from .dipole import build_dipole_kernel
    from .experiments import pdi_dataset
    from .net import build_net, save_weights, train_pdi

    kernel = build_dipole_kernel(cfg["dims"])
    ds, _ = pdi_dataset(kernel, cfg["n_train"], cfg["n_val"], cfg["data_seed"],
                        cfg["train_step"], cfg["val_step"])
    net = build_net(_net_config(cfg["net"]))
    net, curves = train_pdi(net, ds, cfg["epochs"], cfg["lr"], cfg["seed"], cfg["batch_size"],
                            keep_best=cfg["keep_best"])
    save_weights(net, out / "weights.bin")
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_nll", "val_nll", "val_rmse_pct"])
        for e, tr in enumerate(curves["train_nll"]):
            val = curves["val_nll"][e] if curves["val_nll"] else ""
            rm = curves["val_rmse_pct"][e] if curves["val_rmse_pct"] else ""
            w.writerow([e, repr(tr), repr(val), repr(rm)])
    return {}


def cmd_adapt_vi(cfg, out):
    from .dipole import build_dipole_kernel
    from .experiments import family_spec, make_subject
    from .map_solver import RegConfig
    from .net import adapt_vi, build_net, load_weights, save_weights
    from .simulate import EchoConfig
    from .volume import SeededRng

    inputs = {}
    if cfg["weights"]:
        net = load_weights(cfg["weights"])
        inputs["weights"] = cfg["weights"]
    else:
        net = build_net(_net_config(cfg["net"]))
    kernel = build_dipole_kernel(cfg["dims"])
    root = SeededRng(cfg["data_seed"])
    subs = [make_subject(family_spec(root.child(i), kernel.dims, cfg["anomaly"]), kernel,
                         EchoConfig(), cfg["data_seed"] * 10 + i, cfg["lam"],
                         cfg["keep_fraction"]) for i in range(cfg["n_subjects"])]
    regs = [RegConfig(s.reg.lam, cfg["tv_epsilon"], s.reg.edge_mask) for s in subs]
    net, trace = adapt_vi(net, [s.field for s in subs], [s.noise for s in subs], kernel, regs,
                          cfg["K"], cfg["epochs"], cfg["lr"], cfg["seed"])
    save_weights(net, out / "weights.bin")
    trace.to_csv(out / "trace.csv")
    return inputs


def cmd_reconstruct(cfg, out):
    method = cfg["method"]
    if method == "medi":
        return _run_medi(cfg, out, cfg["reg"], cfg["medi"])
    if method == "vi":
        return _run_vi(cfg, out, cfg["reg"], cfg["vi"], cfg["seed"])
    from .net import load_weights, net_forward
    from .volume import save_volume

    if not cfg["weights"]:
        raise ValueError(f"method {method!r} needs a weights file: set \"weights\" to the "
                         "output of train-pdi (pdi) or adapt-vi (pdi-vi, pdi-vi0)")
    if not Path(cfg["weights"]).is_file():
        raise FileNotFoundError(f"weights file not found: {cfg['weights']}")
    field, noise, _, inputs = _load_inputs(cfg)
    net = load_weights(cfg["weights"])
    mu, lv = net_forward(net, field)
    dom = noise.support.data
    save_volume(mu.like(mu.data * dom), out / "mu.vol")
    save_volume(lv.like(np.exp(0.5 * lv.data)), out / "sd.vol")
    save_volume(lv, out / "log_var.vol")
    inputs["weights"] = cfg["weights"]
    return inputs


def cmd_evaluate(cfg, out):
    from .metrics import evaluate, uncertainty_validation
    from .volume import load_mask, load_volume

    x, ref = load_volume(cfg["recon"]), load_volume(cfg["truth"])
    inputs = {"recon": cfg["recon"], "truth": cfg["truth"]}
    mask = None
    if cfg["mask"]:
        mask = load_mask(cfg["mask"])
        inputs["mask"] = cfg["mask"]
    rois = {}
    for name, p in cfg["rois"].items():
        rois[name] = load_mask(p)
        inputs[f"roi_{name}"] = p
    rep = evaluate(x, ref, mask, rois)
    rep.to_json(out / "metrics.json")
    rep.to_csv(out / "metrics.csv")
    if cfg["sd"] and cfg["ensemble"]:
        ens = [load_volume(p) for p in cfg["ensemble"]]
        for i, p in enumerate(cfg["ensemble"]):
            inputs[f"ensemble_{i:03d}"] = p
        inputs["sd"] = cfg["sd"]
        u = uncertainty_validation(ens, ref, load_volume(cfg["sd"]), mask)
        with open(out / "uncertainty.json", "w") as fh:
            json.dump(u.summary(), fh, indent=2, sort_keys=True)
    return inputs


def cmd_render(cfg, out):
    from .volume import load_volume, slice_to_pgm

    v = load_volume(cfg["volume"])
    axis = cfg["axis"]
    index = v.dims[axis] // 2 if cfg["index"] is None else cfg["index"]
    window = cfg["window"]
    if window is None:
        window = (float(v.data.min()), float(v.data.max()))
    slice_to_pgm(v, axis, index, window, out / cfg["name"])
    return {"volume": cfg["volume"]}


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "medi": cmd_medi,
    "vi": cmd_vi,
    "train-pdi": cmd_train_pdi,
    "adapt-vi": cmd_adapt_vi,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def build_parser():
    p = argparse.ArgumentParser(prog="bayesqsm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["repro"]:
        sp = sub.add_parser(name)
        if name == "repro":
            sp.add_argument("suite", choices=["smoke", "full"])
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default=f"out-{name}", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--print-config", action="store_true",
                        help="print the resolved config (with defaults) and exit")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    raw = None
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
    cfg = resolve_config(args.command, raw, args.seed, partial=args.print_config)
    if args.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    _thread_setup()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "repro":
        from .experiments import run_suite
        return run_suite(args.suite, out)
    inputs = COMMANDS[args.command](cfg, out)
    write_provenance(out, args.command, cfg, inputs)
    return 0


def main(argv=None):
    try:
        return run(argv)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
