"""Command-line entry point: ``resnet-limits <subcommand> config.json [--dotted.key=value ...]``.

Config schema (JSON, every section optional unless a subcommand needs it)::

    {
      "seed": 0, "output_dir": "runs", "threads": 1, "timing": false, "K": 5,
      "shape": {"L": 64, "M": 512, "D": 32, "d_in": 3, "d_out": 3},
      "hp": {"eta_u": 0.05, "eta_v": 0.05, "sigma_u": 0.5, "sigma_v": 0.5,
             "sigma_in": 1.0, "sigma_out": 1.0, "dist": "gaussian", "clip_bound": null},
      "act": {"kind": "linear", "a": 1.0},
      "data": {"x": [1.0, 0.5, -0.3], "y_star": [0.5, -1.0, 0.2]},
      "grid": {"n_steps": 200},
      "train": {"record_layers": [], "dump_hidden": false},
      "sweep": {"shapes": [[64, 512, 8], ...], "seeds": [0, 1], "target": "exact_linear_limit",
                "coupling": "coupled-embeddings", "all_layers": false, "proxy_shape": [64, 512, 256],
                "fit_models": ["h_rate", "y_rate"], "three_term": false},
      "dmft": {"P": 2000, "n_mc": 2000, "picard_tol": 1e-4, "picard_max_iters": 50, "damping": 0.5},
      "clt": {"n_values": [100, 1000], "f_id": "tanh", "n_mc": 1000000, "y_dist": "exponential"},
      "fit": {"errors_csv": "path/to/errors.csv", "k": null, "models": ["h_rate"], "three_term": false}
    }

Outputs go to ``<output_dir>/<run_id>/`` where run_id is a hash of the
resolved config plus the seed. Exit codes: 0 success, 1 some runs failed
(see failures.json), 2 invalid config, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .activations import from_config
from .dmft import DmftConfig, dmft_run, summary
from .errors import (
    InvalidConfigError,
    NonConvergenceError,
    NumericalOverflowError,
    ResNetLimitsError,
    UnderdeterminedFitError,
)
from .linear_limit import LinearLimitConfig, linear_limit_run
from .numerics import SGrid, rng_create
from .resnet import Dataset, HPConfig, ShapeConfig

EXIT_OK, EXIT_FAILED_RUNS, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
SEED_ENV = "RESNET_LIMITS_SEED"

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "threads": os.cpu_count() or 1,
    "timing": False,
    "K": 5,
    "shape": {"d_in": 3, "d_out": 3},
    "hp": {"eta_u": 1.0, "eta_v": 1.0, "sigma_u": 1.0, "sigma_v": 1.0, "sigma_in": 1.0, "sigma_out": 1.0,
           "dist": "gaussian", "clip_bound": None},
    "act": {"kind": "linear", "a": 1.0},
    "data": {"x": [1.0, 0.5, -0.3], "y_star": [0.5, -1.0, 0.2]},
    "grid": {"n_steps": 200},
    "train": {"record_layers": [], "dump_hidden": False},
    "sweep": {"shapes": [], "seeds": [0], "target": None, "coupling": bench.COUPLED, "all_layers": False,
              "proxy_shape": [64, 512, 256], "fit_models": ["h_rate", "y_rate"], "three_term": False},
    "dmft": {"P": 2000, "n_mc": 2000, "picard_tol": 1e-4, "picard_max_iters": 50, "damping": 0.5},
    "clt": {"n_values": [100, 1000, 10000, 100000], "f_id": "tanh", "n_mc": 1000000, "y_dist": "exponential",
            "directions": None, "v": None},
    "fit": {"errors_csv": None, "k": None, "models": ["h_rate"], "three_term": False},
}
SHAPE_KEYS = {"L", "M", "D", "d_in", "d_out"}
ACT_KEYS = {"kind", "a"}
# keys that never change results and so stay out of the run id and the snapshot
VOLATILE = ("output_dir", "threads")


class ConfigError(InvalidConfigError):
    pass


def _line_of(text: str, key: str):
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _where(text, key):
    line = _line_of(text or "", key)
    return f" (line {line})" if line else ""


def _check_keys(cfg: dict, schema: dict, text: str, prefix=""):
    for key, val in cfg.items():
        path = f"{prefix}{key}"
        if prefix == "shape." and key in SHAPE_KEYS:
            continue
        if prefix == "act." and key in ACT_KEYS:
            continue
        if key not in schema:
            raise ConfigError(f"unknown config key {path!r}{_where(text, key)}")
        if isinstance(schema[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path!r} must be an object{_where(text, key)}")
            _check_keys(val, schema[key], text, prefix=f"{path}.")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``--a.b=value`` flags; values parse as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"override {item!r} must look like --section.key=value")
        path, raw = item[2:].split("=", 1)
        node = cfg
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r} descends into a scalar")
        node[parts[-1]] = _parse_value(raw)
    return cfg


def load_config(path, overrides=(), env=None) -> dict:
    """Read, override, validate and fill defaults."""
    env = os.environ if env is None else env
    text = None
    if path is None:
        raw = {}
    else:
        text = Path(path).read_text(encoding="utf-8")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    raw = apply_overrides(raw, overrides)
    _check_keys(raw, DEFAULTS, text)
    cfg = _merge(DEFAULTS, raw)
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    cfg["_text"] = text
    return cfg


def _require(cfg, section, keys):
    for key in keys:
        if key not in cfg[section]:
            raise ConfigError(f"missing required key {section}.{key}")


def run_id(cfg: dict, command: str) -> str:
    snap = snapshot(cfg)
    blob = json.dumps({"command": command, **snap}, sort_keys=True).encode()
    return f"{command}-{hashlib.blake2b(blob, digest_size=5).hexdigest()}-s{cfg['seed']}"


def snapshot(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in VOLATILE and not k.startswith("_")}


def _hp(cfg) -> HPConfig:
    try:
        return HPConfig(**cfg["hp"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _shape(cfg) -> ShapeConfig:
    _require(cfg, "shape", ("L", "M", "D"))
    return ShapeConfig(**cfg["shape"])


def _out_dir(cfg, command) -> Path:
    d = Path(cfg["output_dir"]) / run_id(cfg, command)
    d.mkdir(parents=True, exist_ok=True)
    _write_json(d / "config.json", snapshot(cfg))
    return d


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_failures(out: Path, failures):
    _write_json(out / "failures.json", {"failures": failures})


def _default_target(cfg, act):
    t = cfg["sweep"]["target"]
    if t is None:
        t = "exact_linear_limit" if act.is_linear else "reference_proxy"
    return t


def _sweep_config(cfg, shapes, seeds) -> bench.SweepConfig:
    act = from_config(cfg["act"])
    sw = cfg["sweep"]
    d_in, d_out = len(cfg["data"]["x"]), len(cfg["data"]["y_star"])
    shapes = [s if isinstance(s, ShapeConfig) else ShapeConfig(*s[:3], d_in=d_in, d_out=d_out) for s in shapes]
    return bench.SweepConfig(
        shapes, list(seeds), cfg["K"], act=act, hp=_hp(cfg), x=cfg["data"]["x"], y_star=cfg["data"]["y_star"],
        target=_default_target(cfg, act), coupling=sw["coupling"], all_layers=sw["all_layers"],
        grid=SGrid(cfg["grid"]["n_steps"]), proxy_shape=ShapeConfig(*sw["proxy_shape"], d_in=d_in, d_out=d_out),
        dmft_P=cfg["dmft"]["P"], dmft_n_mc=cfg["dmft"]["n_mc"], threads=cfg["threads"], timing=cfg["timing"],
    )


def _failure_dicts(failures):
    return [vars(f) for f in failures]


def cmd_train(cfg) -> int:
    shape = _shape(cfg)
    sc = _sweep_config(cfg, [shape], [cfg["seed"]])
    out = _out_dir(cfg, "train")
    res = bench.run_sweep(sc, threads=1)
    bench.emit_errors_csv(res.records, out / "errors.csv")
    if cfg["train"]["dump_hidden"] or cfg["train"]["record_layers"]:
        from .resnet import train

        layers = cfg["train"]["record_layers"] or [shape.L]
        rec = train(shape, sc.hp, sc.act, sc.data, sc.K, record_layers=layers, rng=rng_create(cfg["seed"], sc.stream))
        _write_json(out / "train_record.json", {
            "outputs": rec.outputs.tolist(),
            "loss": rec.loss.tolist(),
            "hidden": {str(l): rec.hidden[l].tolist() for l in layers},
        })
    if res.failures:
        _write_failures(out, _failure_dicts(res.failures))
        return EXIT_FAILED_RUNS
    return EXIT_OK


def cmd_limit_linear(cfg) -> int:
    act = from_config(cfg["act"])
    if not act.is_linear:
        raise ConfigError("limit-linear needs act.kind = 'linear'")
    lcfg = LinearLimitConfig(act.a, cfg["data"]["x"], cfg["data"]["y_star"], cfg["K"], hp=_hp(cfg),
                             grid=SGrid(cfg["grid"]["n_steps"]))
    out = _out_dir(cfg, "limit-linear")
    try:
        state = linear_limit_run(lcfg)
    except NumericalOverflowError as exc:
        _write_failures(out, [{"error": type(exc).__name__, "message": str(exc), "context": _jsonable(exc.context)}])
        return EXIT_NUMERICAL
    _write_json(out / "limit_linear.json", state.to_json())
    return EXIT_OK


def _jsonable(d):
    return {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in d.items()}


def cmd_limit_dmft(cfg) -> int:
    act = from_config(cfg["act"])
    dm = cfg["dmft"]
    dcfg = DmftConfig(cfg["data"]["x"], cfg["data"]["y_star"], cfg["K"], act, hp=_hp(cfg),
                      grid=SGrid(cfg["grid"]["n_steps"]), P=dm["P"], n_mc=dm["n_mc"], picard_tol=dm["picard_tol"],
                      picard_max_iters=dm["picard_max_iters"], damping=dm["damping"])
    out = _out_dir(cfg, "limit-dmft")
    try:
        ens, _ = dmft_run(dcfg, rng_create(cfg["seed"], "dmft"))
    except NonConvergenceError as exc:
        _write_failures(out, [{"error": type(exc).__name__, "message": str(exc), "residuals": exc.residuals}])
        return EXIT_NUMERICAL
    except NumericalOverflowError as exc:
        _write_failures(out, [{"error": type(exc).__name__, "message": str(exc)}])
        return EXIT_NUMERICAL
    _write_json(out / "dmft_summary.json", summary(ens))
    return EXIT_OK


def _fits(records, models, three_term, k=None):
    fits, failures = [], []
    for model in models:
        try:
            fits.append(bench.fit_rate(records, model, k=k, three_term=three_term))
        except (UnderdeterminedFitError, ResNetLimitsError) as exc:
            failures.append({"fit": model, "error": type(exc).__name__, "message": str(exc)})
    return fits, failures


def cmd_sweep(cfg) -> int:
    sw = cfg["sweep"]
    if not sw["shapes"]:
        raise ConfigError("missing required key sweep.shapes")
    sc = _sweep_config(cfg, sw["shapes"], sw["seeds"])
    out = _out_dir(cfg, "sweep")
    res = bench.run_sweep(sc, threads=cfg["threads"])
    bench.emit_errors_csv(res.records, out / "errors.csv")
    models = [m for m in sw["fit_models"] if not (m == "h_rate" and sc.coupling == bench.UNCOUPLED)]
    fits, fit_failures = _fits(res.records, models, sw["three_term"]) if res.records else ([], [])
    bench.emit_fits_csv(fits, out / "fits.csv")
    _write_json(out / "sweep.json", {"config": sc.to_dict(), "seeds": list(sc.seeds),
                                     "run_ids": sorted({r.run_id for r in res.records})})
    failures = _failure_dicts(res.failures) + fit_failures
    if failures:
        _write_failures(out, failures)
        return EXIT_FAILED_RUNS
    return EXIT_OK


def cmd_clt(cfg) -> int:
    c = cfg["clt"]
    probe = bench.CltProbe(c["n_values"], f_id=c["f_id"], n_mc=c["n_mc"], y_dist=c["y_dist"],
                           directions=c["directions"], v=c["v"])
    out = _out_dir(cfg, "clt")
    gaps = bench.clt_empirical_gap(probe, rng_create(cfg["seed"], "clt"), threads=cfg["threads"])
    bench.emit_clt_csv(gaps, out / "clt.csv")
    return EXIT_OK


def cmd_fit(cfg) -> int:
    f = cfg["fit"]
    if not f["errors_csv"]:
        raise ConfigError("missing required key fit.errors_csv")
    records = bench.read_errors_csv(f["errors_csv"])
    out = _out_dir(cfg, "fit")
    fits, failures = _fits(records, f["models"], f["three_term"], k=f["k"])
    bench.emit_fits_csv(fits, out / "fits.csv")
    if failures:
        _write_failures(out, failures)
        return EXIT_FAILED_RUNS
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "limit-linear": cmd_limit_linear,
    "limit-dmft": cmd_limit_dmft,
    "sweep": cmd_sweep,
    "clt": cmd_clt,
    "fit": cmd_fit,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="resnet-limits", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("config", nargs="?", help="JSON config file")
    args, overrides = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, overrides)
        cfg.pop("_text", None)
        code = COMMANDS[args.command](cfg)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResNetLimitsError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if code == EXIT_OK:
        print(f"{args.command}: ok")
    else:
        print(f"{args.command}: finished with failures (exit {code})", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
