"""Command-line entry point: load a flat config, run one experiment, write
reproducible CSV/JSON artifacts.

Config files are diff-able `key = value` lines with dotted sections (see
README for the key reference).  Flags override file values, and every output
file header records the resolved config hash, the master seed and the artifact
version so any run can be reproduced byte-identically.

Exit codes: 2 config parse error, 3 validation error, 4 experiment error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from typing import Optional

import numpy as np

from . import __version__
from .model import (Assumption, KFunction, ProbeSpec, BUILTIN_MODEL_NAMES,
                    builtin_model, check_assumption)
from .experiments import (RateExperimentSpec, compare_step_conditions,
                          compute_stability_constants, run_rate_experiment,
                          run_stability_ensemble)
from .scheme import SchemeId
from .truncation import TruncationConfig

EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

OUT_DIR_ENV = "TRUNCMIL_OUT"


class ConfigError(Exception):
    """Config file could not be parsed."""


class ValidationError(Exception):
    """Config parsed but failed semantic validation; message names the field."""


def parse_config(text: str) -> dict:
    """Parse flat `key = value` lines; '#' starts a comment."""
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        cfg[key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    canon = "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _get(cfg: dict, key: str, kind, default=None, required: bool = False):
    if key not in cfg:
        if required:
            raise ValidationError(f"missing required field '{key}'")
        return default
    raw = cfg[key]
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes")
        return kind(raw)
    except (TypeError, ValueError):
        raise ValidationError(f"field '{key}': cannot read {raw!r} as {kind.__name__}")


def _float_list(cfg: dict, key: str):
    if key not in cfg:
        return None
    try:
        return [float(v) for v in cfg[key].split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"field '{key}': expected comma-separated numbers")


def _truncation(cfg: dict) -> TruncationConfig:
    try:
        return TruncationConfig(
            omega_coeff=_get(cfg, "omega.coeff", float, required=True),
            omega_power=_get(cfg, "omega.power", float, required=True),
            h_coeff=_get(cfg, "h.coeff", float, required=True),
            h_power=_get(cfg, "h.power", float, required=True),
            h_bar=_get(cfg, "h_bar", float, required=True),
        )
    except ValueError as exc:
        raise ValidationError(f"truncation config: {exc}")


def _model(cfg: dict):
    name = _get(cfg, "model", str, required=True)
    if name not in BUILTIN_MODEL_NAMES:
        raise ValidationError(f"field 'model': unknown model {name!r}; "
                              f"choose from {', '.join(BUILTIN_MODEL_NAMES)}")
    return builtin_model(name)


def _k_fn(cfg: dict) -> KFunction:
    try:
        return KFunction(c=_get(cfg, "k.coeff", float, required=True),
                         gamma=_get(cfg, "k.power", float, required=True))
    except ValueError as exc:
        raise ValidationError(f"k-function: {exc}")


def _header_lines(cfg: dict, seed: int) -> list:
    return [
        f"# artifact_version = {__version__}",
        f"# config_hash = {config_hash(cfg)}",
        f"# seed = {seed}",
    ]


def _write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: str, cfg: dict, seed: int, columns, rows) -> None:
    lines = _header_lines(cfg, seed) + [",".join(columns)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating))
                              else str(v) for v in row))
    _write_atomic(path, "\n".join(lines) + "\n")


def _write_summary(path: str, cfg: dict, seed: int, payload: dict) -> None:
    payload = dict(payload)
    payload["artifact_version"] = __version__
    payload["config_hash"] = config_hash(cfg)
    payload["seed"] = seed
    _write_atomic(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _run_rate(cfg: dict, out_dir: str, seed: int, workers: int) -> str:
    trunc = _truncation(cfg)
    model_name = _get(cfg, "model", str, required=True)
    if model_name not in BUILTIN_MODEL_NAMES:
        raise ValidationError(f"field 'model': unknown model {model_name!r}")
    steps = _float_list(cfg, "steps")
    if not steps:
        raise ValidationError("field 'steps': rate runs need a nonempty step ladder")
    try:
        spec = RateExperimentSpec(
            model_name=model_name,
            cfg=trunc,
            scheme=SchemeId(_get(cfg, "scheme", str, default="truncated_milstein")),
            q=_get(cfg, "q", float, default=1.0),
            t_final=_get(cfg, "t_final", float, required=True),
            delta_ref=_get(cfg, "delta_ref", float, required=True),
            test_deltas=tuple(steps),
            n_paths=_get(cfg, "paths", int, default=1000),
            master_seed=seed,
            error_at=_get(cfg, "error_at", str, default="terminal"),
        )
    except ValueError as exc:
        raise ValidationError(str(exc))
    fit = run_rate_experiment(spec, n_workers=workers)
    _write_csv(os.path.join(out_dir, "rates.csv"), cfg, seed,
               ["delta", "error", "se", "norm_error"],
               zip(fit.deltas, fit.errors, fit.standard_errors, fit.norm_errors))
    _write_summary(os.path.join(out_dir, "fit.json"), cfg, seed, {
        "slope": fit.slope, "slope_se": fit.slope_se, "q": fit.q,
        "n_paths": fit.n_paths, "model": model_name, "scheme": spec.scheme.value,
    })
    return f"slope = {fit.slope:.4f} (se {fit.slope_se:.4f}) over {len(fit.deltas)} steps"


def _run_conditions(cfg: dict, out_dir: str, seed: int) -> str:
    trunc = _truncation(cfg)
    q = _get(cfg, "q", float, default=1.0)
    p = _get(cfg, "p", float, required=True)
    r = _get(cfg, "r", float, required=True)
    try:
        comp = compare_step_conditions(trunc, q, p, r)
    except ValueError as exc:
        raise ValidationError(str(exc))
    _write_summary(os.path.join(out_dir, "fit.json"), cfg, seed, {
        "old_threshold": comp.old_threshold,
        "new_threshold": comp.new_threshold,
        "dominant_rate": comp.dominant_rate,
        "q": q, "p": p, "r": r,
    })
    return (f"old threshold = {comp.old_threshold:.6g}, new threshold = "
            f"{comp.new_threshold:g}, dominant rate = {comp.dominant_rate:g}")


def _run_stability(cfg: dict, out_dir: str, seed: int, workers: int) -> str:
    trunc = _truncation(cfg)
    model = _model(cfg)
    k_fn = _k_fn(cfg)
    delta = _get(cfg, "delta", float, required=True)
    horizon = _get(cfg, "horizon_steps", int, required=True)
    tol = _get(cfg, "tol_stab", float, default=1e-2)
    n_paths = _get(cfg, "paths", int, default=1000)
    record = _get(cfg, "record_paths", int, default=10)
    try:
        constants = compute_stability_constants(model, trunc, k_fn)
        report = run_stability_ensemble(model, trunc, delta, n_paths, horizon, tol,
                                        master_seed=seed, n_workers=workers,
                                        record_paths=record, constants=constants)
    except ValueError as exc:
        raise ValidationError(str(exc))
    rows = []
    if report.recorded_magnitudes is not None:
        for p_idx, series in enumerate(report.recorded_magnitudes):
            for k, mag in enumerate(series):
                rows.append((p_idx, k, mag))
    _write_csv(os.path.join(out_dir, "stability.csv"), cfg, seed,
               ["path", "k", "abs_y"], rows)
    _write_summary(os.path.join(out_dir, "fit.json"), cfg, seed, {
        "H": report.H, "delta_1": report.delta_1,
        "radius_at_one": report.radius_at_one,
        "paper_H": report.paper_H, "paper_delta_1": report.paper_delta_1,
        "paper_discrepancy": report.paper_discrepancy,
        "decay_fraction": report.decay_fraction,
        "tol_stab": report.tol_stab, "delta": delta,
        "horizon_steps": horizon, "n_paths": n_paths,
    })
    return (f"H = {report.H:.4f}, delta_1 = {report.delta_1:.6g}, "
            f"decay fraction = {report.decay_fraction:.3f}")


_CHECK_SET = (Assumption.A2_1_polyLipschitz, Assumption.A2_2_khasminskii,
              Assumption.A2_3_derivGrowth)


def _run_check(cfg: dict, out_dir: str, seed: int) -> str:
    model = _model(cfg)
    n_points = _get(cfg, "probe_points", int, default=500)
    radius = _get(cfg, "probe_radius", float, default=2.0)
    constants = {key: float(cfg[key]) for key in ("K1", "K2", "lambda3") if key in cfg}
    rows = []
    worst = -float("inf")
    for assumption in _CHECK_SET:
        spec = ProbeSpec(n_points=n_points, radius=radius,
                         p_bar=_get(cfg, "p_bar", float, default=2.0),
                         constants=constants)
        rep = check_assumption(model, assumption, spec)
        rows.append((assumption.value, rep.sampled_points, rep.worst_margin))
        worst = max(worst, rep.worst_margin)
    if "k.coeff" in cfg:
        spec = ProbeSpec(n_points=n_points, radius=radius, k_fn=_k_fn(cfg))
        rep = check_assumption(model, Assumption.A4_1_dissipative, spec)
        rows.append((rep.assumption_id.value, rep.sampled_points, rep.worst_margin))
        worst = max(worst, rep.worst_margin)
    _write_csv(os.path.join(out_dir, "checks.csv"), cfg, seed,
               ["assumption", "sampled_points", "worst_margin"], rows)
    status = "no violation found" if worst <= 0 else "VIOLATION FOUND"
    return f"worst margin = {worst:.6g} ({status})"


def run(config_path: str, seed: Optional[int] = None, paths: Optional[int] = None,
        workers: Optional[int] = None, out: Optional[str] = None) -> int:
    """Execute one configured experiment; returns the process exit status."""
    try:
        with open(config_path) as f:
            cfg = parse_config(f.read())
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"config parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE

    # flag overrides become part of the hashed, recorded config
    if seed is not None:
        cfg["seed"] = str(seed)
    if paths is not None:
        cfg["paths"] = str(paths)
    if workers is not None:
        cfg["workers"] = str(workers)
    if out is not None:
        cfg["out"] = out
    elif os.environ.get(OUT_DIR_ENV):
        cfg["out"] = os.environ[OUT_DIR_ENV]

    try:
        kind = _get(cfg, "kind", str, required=True)
        if kind not in ("rate", "stability", "conditions", "check"):
            raise ValidationError(f"field 'kind': unknown experiment kind {kind!r}")
        run_seed = _get(cfg, "seed", int, default=0)
        run_workers = _get(cfg, "workers", int, default=1)
        out_dir = _get(cfg, "out", str, default="out")
        os.makedirs(out_dir, exist_ok=True)
        if not os.access(out_dir, os.W_OK):
            raise ValidationError(f"field 'out': directory {out_dir!r} is not writable")
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        if kind == "rate":
            summary = _run_rate(cfg, out_dir, run_seed, run_workers)
        elif kind == "conditions":
            summary = _run_conditions(cfg, out_dir, run_seed)
        elif kind == "stability":
            summary = _run_stability(cfg, out_dir, run_seed, run_workers)
        else:
            summary = _run_check(cfg, out_dir, run_seed)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"experiment error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    print(summary)
    return 0


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="truncmil",
        description="Truncated Milstein experiments: strong-error rates, "
                    "step-size conditions, stability ensembles.")
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--paths", type=int, default=None, help="ensemble size override")
    parser.add_argument("--workers", type=int, default=None, help="worker pool size")
    parser.add_argument("--out", default=None,
                        help=f"output directory (also via ${OUT_DIR_ENV})")
    args = parser.parse_args(argv)
    return run(args.config, seed=args.seed, paths=args.paths,
               workers=args.workers, out=args.out)


if __name__ == "__main__":
    sys.exit(main())
