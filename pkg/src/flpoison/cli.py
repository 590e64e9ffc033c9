"""Command-line entry point.

    flpoison run <config.yaml> [--out DIR] [--parallel K]
    flpoison probe <config.yaml> [--out DIR] [--norms 0,1,2,...]

A config file is a flat YAML mapping of SimConfig fields. A list value turns
that key into a sweep axis; several axes give their cartesian product. The
``hidden`` key takes a list of widths, so sweeping it needs a list of lists.
"""

import argparse
import csv
import hashlib
import itertools
import json
import logging
import math
import os
import sys
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .simulator import (
    CONFIG_KEYS, RECORD_COLUMNS, ConfigError, SimConfig, build_environment, degradation_probe, run,
)

log = logging.getLogger("flpoison")

REQUIRED_KEYS = ("attack", "defense")
EXTRA_KEYS = ("out",)
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
DEFAULT_PROBE_NORMS = (0, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000)

_FIELD_TYPES = {f.name: f.type for f in fields(SimConfig)}


def git_blob_sha1(data: bytes) -> str:
    """Content hash as computed by `git hash-object`."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _coerce(key, value):
    tp = _FIELD_TYPES[key]
    if isinstance(tp, str):
        tp = {"int": int, "float": float, "str": str, "tuple": tuple,
              "str | None": typing.Optional[str], "float | None": typing.Optional[float]}[tp]
    optional = type(None) in typing.get_args(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key}: must not be null")
    base = next((a for a in typing.get_args(tp) if a is not type(None)), tp)
    if base is tuple:
        if not isinstance(value, list) or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key}: expected a list of integers, got {value!r}")
        return tuple(value)
    if base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{key}: must be finite")
        return float(value)
    if base is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type")


def _is_sweep(key, value) -> bool:
    if not isinstance(value, list):
        return False
    if key == "hidden":
        return bool(value) and all(isinstance(v, list) for v in value)
    return True


def parse_document(doc) -> list[tuple[dict, SimConfig]]:
    """Expand a parsed mapping into (sweep point, config) pairs."""
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = sorted(set(doc) - set(CONFIG_KEYS) - set(EXTRA_KEYS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    for key in REQUIRED_KEYS:
        if key not in doc:
            raise ConfigError(f"{key}: missing required key")
    fixed, axes = {}, {}
    for key, value in doc.items():
        if key in EXTRA_KEYS:
            continue
        if _is_sweep(key, value):
            if not value:
                raise ConfigError(f"{key}: sweep list is empty")
            axes[key] = [_coerce(key, v) for v in value]
        else:
            fixed[key] = _coerce(key, value)
    out = []
    for combo in itertools.product(*axes.values()):
        point = dict(zip(axes, combo))
        out.append((point, SimConfig(**fixed, **point)))
    return out


def parse_config(path) -> list[SimConfig]:
    return [cfg for _, cfg in load_config(path)[0]]


def load_config(path):
    """Returns ([(sweep point, config)], raw document, raw bytes)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: invalid YAML: {exc}") from None
    return parse_document(doc if doc is not None else {}), doc, raw


def _point_dir(out: Path, index: int, point: dict, n_points: int) -> Path:
    if n_points == 1:
        return out
    tag = "_".join(f"{k}={'x'.join(map(str, v)) if isinstance(v, tuple) else v}"
                   for k, v in point.items())
    return out / f"{index:03d}_{tag}"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rounds_csv(records, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for rec in records:
            w.writerow([_fmt(getattr(rec, c)) for c in RECORD_COLUMNS])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable({f: getattr(obj, f) for f in obj.__dataclass_fields__})
    return obj


def run_one(cfg: SimConfig, outdir: Path, config_hash: str) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    result = run(cfg)
    write_rounds_csv(result.records, outdir / "rounds.csv")
    summary = {"config": cfg.to_dict(), "config_sha1": config_hash, **result.summary}
    with open(outdir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _check_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise RuntimeError(f"output directory {out} is not writable: {exc.strerror}") from None


def run_experiments(points, out: Path, config_hash: str, parallel: int = 1) -> int:
    try:
        _check_writable(out)
        jobs = [(cfg, _point_dir(out, i, point, len(points)))
                for i, (point, cfg) in enumerate(points)]
        if parallel > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=parallel) as pool:
                futures = [pool.submit(run_one, cfg, d, config_hash) for cfg, d in jobs]
                summaries = [f.result() for f in futures]
        else:
            summaries = [run_one(cfg, d, config_hash) for cfg, d in jobs]
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for (cfg, d), s in zip(jobs, summaries):
        print(f"{d}: attack={cfg.attack} defense={cfg.defense} "
              f"error={s['final_error']:.4f} sign_match={s['final_sign_match']:.4f} "
              f"norm={s['final_norm']:.4g}")
    return EXIT_OK


def run_probe(cfg: SimConfig, norms, out: Path) -> int:
    try:
        _check_writable(out)
        clean = run(SimConfig(**{**cfg.to_dict(), "attack": "none"}))
        env = build_environment(cfg)
        rows = degradation_probe(clean.spec, clean.w_final, env.s, norms, clean.test, cfg.seed)
        with open(out / "probe.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["noise_norm", "testing_error"])
            for nrm, err in rows:
                w.writerow([repr(nrm), repr(err)])
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for nrm, err in rows:
        print(f"norm={nrm:g} error={err:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flpoison", description="Federated poisoning simulator")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every sweep point of a config file")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (default: config 'out' or ./out)")
    r.add_argument("--parallel", type=int, default=1, metavar="K")
    p = sub.add_parser("probe", help="degradation probe on a cleanly trained model")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.add_argument("--norms", default=",".join(map(str, DEFAULT_PROBE_NORMS)))
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FLPOISON_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        points, doc, raw = load_config(args.config)
        if args.command == "run" and args.parallel < 1:
            raise ConfigError("--parallel: must be >= 1")
        if args.command == "probe":
            if len(points) != 1:
                raise ConfigError("probe: config must not contain sweep lists")
            norms = [float(x) for x in args.norms.split(",") if x.strip()]
            if not norms or min(norms) < 0:
                raise ConfigError("--norms: need non-negative values")
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or (doc or {}).get("out") or "out")
    if args.command == "probe":
        return run_probe(points[0][1], norms, out)
    return run_experiments(points, out, git_blob_sha1(raw), args.parallel)


if __name__ == "__main__":
    sys.exit(main())
