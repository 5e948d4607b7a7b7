"""``langstep`` command line: config validation, experiment dispatch and
reproducible output files.

Every subcommand builds a JSON-shaped config (from ``--config FILE`` and/or
flags), validates it completely with :func:`parse_config`, then runs it.
Each run writes its table to ``--out`` plus ``<out>.manifest.json``.

Exit codes: 0 success, 1 bad config or unwritable output, 2 blow-up abort,
3 inconclusive Richardson refinement.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import io
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errorlab import long_run_rate_experiment, rate_fit, strong_sweep, weak_sweep
from .export import format_number, rows_from_measure, rows_from_snapshot, write_binary, write_csv
from .model import (ModelError, check_dissipativity, check_ellipticity, check_mean_reversion,
                    model_from_spec)
from .ou_oracle import OuOracle
from .scheme import BlowUpError, EmpiricalMeasureRecorder, bel_gradient, simulate
from .steps import schedule_from_spec

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "run", "main", "PRESETS", "TEST_FUNCTIONS"]

EXIT_OK, EXIT_IO, EXIT_BLOWUP, EXIT_INCONCLUSIVE = 0, 1, 2, 3

#: Named test functions for weak errors and gradients; they act on the first coordinate.
TEST_FUNCTIONS = {
    "x": lambda y: y[:, 0],
    "x2": lambda y: y[:, 0] ** 2,
    "cos": lambda y: np.cos(y[:, 0]),
    "sin": lambda y: np.sin(y[:, 0]),
    "tanh": lambda y: np.tanh(y[:, 0]),
    "one": lambda y: np.ones(y.shape[0]),
}

_TOP_KEYS = ("model", "schedule", "experiment", "output")
_SYNONYMS = {
    "stepsize": "schedule", "step_size": "schedule", "steps_size": "schedule", "gamma": "schedule",
    "gamma1": "schedule", "steps_schedule": "schedule", "sde": "model", "diffusion": "model",
    "out": "output", "outfile": "output", "output_path": "output", "kind": "experiment",
    "n_paths": "paths", "npaths": "paths", "n_steps": "steps", "substeps": "substeps",
    "n_substeps": "substeps", "estimator": "distance", "x_0": "x0", "start": "x0",
}

KINDS = ("run", "oracle", "one-step-strong", "one-step-weak", "long-run", "check", "bel")
_NEEDS_SCHEDULE = {"run", "oracle", "long-run"}


class ConfigError(ValueError):
    """Raised with the full list of validation problems."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    model: dict
    schedule: dict | None
    kind: str
    params: dict
    output: str
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "model": self.model,
            "schedule": self.schedule,
            "experiment": {"kind": self.kind, **self.params},
            "output": self.output,
        }

    def canonical(self):
        """Sorted-key JSON echo of the validated config."""
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)


# ----------------------------------------------------------------------
# Parameter schema
# ----------------------------------------------------------------------


def _pos_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 1


def _nonneg_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _pos_num(v):
    return _is_num(v) and v > 0


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _num_list(v, check=_is_num):
    return isinstance(v, list) and len(v) > 0 and all(check(u) for u in v)


def _point(v):
    return _num_list(v) or _is_num(v)


_P = {
    "seed": (0, _nonneg_int, "a non-negative integer"),
    "paths": (None, _pos_int, "a positive integer"),
}

_SCHEMA = {
    "run": {
        **_P,
        "steps": (1000, _nonneg_int, "a non-negative integer"),
        "x0": (0.0, lambda v: v == "invariant" or _point(v), 'a number, a list of numbers or "invariant"'),
        "checkpoints": (None, lambda v: v is None or _num_list(v, _nonneg_int), "a list of step indices"),
        "export": ("snapshots", lambda v: v in ("snapshots", "measure"), '"snapshots" or "measure"'),
        "binary": (None, lambda v: v is None or isinstance(v, str), "a file path or null"),
        "on_blowup": ("abort", lambda v: v in ("abort", "drop"), '"abort" or "drop"'),
    },
    "oracle": {
        "n": (1000, _pos_int, "a positive integer"),
        "initial_variance": (0.0, lambda v: _is_num(v) and v >= 0, "a non-negative number"),
    },
    "one-step-strong": {
        **_P,
        "gammas": ([2.0**-k for k in range(3, 9)], lambda v: _num_list(v, _pos_num), "a list of positive steps"),
        "x": (1.0, _point, "a number or list of numbers"),
        "p": (2, lambda v: v in (1, 2, 4), "1, 2 or 4"),
        "substeps": (32, lambda v: _pos_int(v) and v >= 32, "an integer >= 32"),
        "reference": ("auto", lambda v: v in ("auto", "exact", "fine"), '"auto", "exact" or "fine"'),
    },
    "one-step-weak": {
        **_P,
        "gammas": ([2.0**-k for k in range(3, 9)], lambda v: _num_list(v, _pos_num), "a list of positive steps"),
        "x": (1.0, _point, "a number or list of numbers"),
        "g": ("x2", lambda v: v in TEST_FUNCTIONS, f"one of {sorted(TEST_FUNCTIONS)}"),
        "substeps": (32, lambda v: _pos_int(v) and v >= 2, "an integer >= 2"),
        "max_substeps": (2**14, _pos_int, "a positive integer"),
        "paired": (True, lambda v: isinstance(v, bool), "true or false"),
        "reference": ("auto", lambda v: v in ("auto", "exact", "fine"), '"auto", "exact" or "fine"'),
    },
    "long-run": {
        **_P,
        "checkpoints": ([1000, 3162, 10000, 31623, 100000], lambda v: _num_list(v, _pos_int),
                        "a list of positive step indices"),
        "target": ("auto", lambda v: v in ("auto", "analytic", "exact", "reference"),
                   '"auto", "analytic", "exact" or "reference"'),
        "distance": ("w1_exact_1d", lambda v: v in ("w1_exact_1d", "w1_sliced", "tv_histogram"),
                     '"w1_exact_1d", "w1_sliced" or "tv_histogram"'),
        "x0": ("invariant", lambda v: v == "invariant" or _point(v), 'a number, a list or "invariant"'),
        "t_burn": (None, lambda v: v is None or (_is_num(v) and v >= 0), "a non-negative number or null"),
        "refine": (10, lambda v: _pos_int(v) and v >= 2, "an integer >= 2"),
        "bins": (None, lambda v: v is None or _pos_int(v), "a positive integer or null"),
        "on_blowup": ("abort", lambda v: v in ("abort", "drop"), '"abort" or "drop"'),
    },
    "check": {
        "seed": _P["seed"],
        "samples": (2000, _pos_int, "a positive integer"),
        "radius": (10.0, _pos_num, "a positive number"),
    },
    "bel": {
        **_P,
        "f": ("x", lambda v: v in TEST_FUNCTIONS, f"one of {sorted(TEST_FUNCTIONS)}"),
        "x": (0.0, _point, "a number or list of numbers"),
        "t": (1.0, _pos_num, "a positive number"),
        "substeps": (200, _pos_int, "a positive integer"),
    },
}

_DEFAULT_PATHS = {"run": 100, "one-step-strong": 100_000, "one-step-weak": 100_000,
                  "long-run": 2000, "bel": 20_000}

_SCHEDULE_KEYS = {
    "polynomial": {"gamma1": (_pos_num, "a positive number"), "a": (lambda v: _is_num(v) and v >= 0,
                                                                    "a non-negative number")},
    "explicit": {"values": (lambda v: _num_list(v, _pos_num), "a non-empty list of positive numbers")},
}


def _suggest(key, allowed):
    if key in _SYNONYMS and _SYNONYMS[key] in allowed:
        return f'; did you mean "{_SYNONYMS[key]}"?'
    close = difflib.get_close_matches(key, list(allowed), n=1, cutoff=0.6)
    return f'; did you mean "{close[0]}"?' if close else ""


def _unknown(path, key, allowed):
    where = f"{path}.{key}" if path else key
    return f"{where}: unknown key{_suggest(key, allowed)} (allowed: {', '.join(sorted(allowed))})"


def _parse_model(spec, errors):
    if isinstance(spec, str):
        tag, _, rest = spec.partition(":")
        d = {"name": tag}
        for item in filter(None, rest.split(",")):
            k, eq, v = item.partition("=")
            if not eq:
                errors.append(f"model: malformed parameter {item!r} (expected key=value)")
                return None
            try:
                d[k.strip()] = json.loads(v.strip())
            except json.JSONDecodeError:
                errors.append(f"model.{k.strip()}: {v.strip()!r} is not a number")
                return None
        spec = d
    if not isinstance(spec, dict) or "name" not in spec:
        errors.append('model: expected "name:key=value,..." or an object with a "name" key')
        return None
    try:
        model_from_spec(spec)
    except (ModelError, ValueError, TypeError) as exc:
        errors.append(f"model: {exc}")
        return None
    return dict(spec)


def _parse_schedule(spec, errors):
    if isinstance(spec, str):
        parts = spec.split(":")
        try:
            if parts[0] in ("poly", "polynomial") and len(parts) == 3:
                spec = {"kind": "polynomial", "gamma1": float(parts[1]), "a": float(parts[2])}
            elif parts[0] in ("const", "constant") and len(parts) == 2:
                spec = {"kind": "polynomial", "gamma1": float(parts[1]), "a": 0.0}
            elif parts[0] == "explicit" and len(parts) == 2:
                spec = {"kind": "explicit", "values": [float(v) for v in parts[1].split(",")]}
            else:
                raise ValueError
        except ValueError:
            errors.append(f"schedule: cannot parse {spec!r} (expected poly:GAMMA1:A, const:G or explicit:V1,V2,...)")
            return None
    if not isinstance(spec, dict):
        errors.append("schedule: expected a string or an object")
        return None
    kind = spec.get("kind")
    if kind not in _SCHEDULE_KEYS:
        errors.append(f'schedule.kind: must be "polynomial" or "explicit" (got {kind!r})')
        return None
    ok = True
    keys = _SCHEDULE_KEYS[kind]
    for k in spec:
        if k != "kind" and k not in keys:
            errors.append(_unknown("schedule", k, set(keys) | {"kind"}))
            ok = False
    for k, (check, what) in keys.items():
        if k not in spec:
            errors.append(f"schedule.{k}: missing required key")
            ok = False
        elif not check(spec[k]):
            errors.append(f"schedule.{k}: must be {what} (got {spec[k]!r})")
            ok = False
    if ok:
        try:
            schedule_from_spec(spec)
        except ValueError as exc:
            errors.append(f"schedule: {exc}")
            return None
    return dict(spec) if ok else None


def parse_config(text):
    """Validate a JSON config; raises :class:`ConfigError` listing every problem."""
    errors = []
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("utf-8")
    if isinstance(text, str):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"not valid JSON: {exc}"]) from None
    else:
        doc = text
    if not isinstance(doc, dict):
        raise ConfigError(["top level must be a JSON object"])
    for k in doc:
        if k not in _TOP_KEYS:
            errors.append(_unknown("", k, _TOP_KEYS))
    for k in ("model", "experiment", "output"):
        if k not in doc:
            errors.append(f"{k}: missing required key")

    model = _parse_model(doc["model"], errors) if "model" in doc else None

    exp = doc.get("experiment", {})
    kind, params = None, {}
    if not isinstance(exp, dict):
        errors.append("experiment: expected an object")
    else:
        kind = exp.get("kind")
        if "experiment" in doc and kind not in KINDS:
            errors.append(f"experiment.kind: must be one of {', '.join(KINDS)} (got {kind!r})")
            kind = None
    if kind is not None:
        schema = _SCHEMA[kind]
        for k, v in exp.items():
            if k == "kind":
                continue
            if k not in schema:
                errors.append(_unknown("experiment", k, set(schema) | {"kind"}))
                continue
            default, check, what = schema[k]
            if not check(v):
                errors.append(f"experiment.{k}: must be {what} (got {v!r})")
            else:
                params[k] = v
        for k, (default, _, _) in schema.items():
            if k not in exp:
                params[k] = _DEFAULT_PATHS.get(kind) if k == "paths" else default
        if kind == "oracle" and model is not None and model.get("name") != "ou":
            errors.append("model: the oracle needs an OU model")
        for key in ("checkpoints",):
            cps = params.get(key)
            if cps is not None and len(set(cps)) != len(cps):
                errors.append(f"experiment.{key}: entries must be distinct")
        if kind == "run" and params.get("checkpoints") is not None and "steps" in params:
            if max(params["checkpoints"]) > params["steps"]:
                errors.append("experiment.checkpoints: checkpoint beyond experiment.steps")

    schedule = None
    if "schedule" in doc:
        schedule = _parse_schedule(doc["schedule"], errors)
    elif kind in _NEEDS_SCHEDULE:
        errors.append(f"schedule: missing required key (needed by {kind})")

    out = doc.get("output")
    if "output" in doc and not (isinstance(out, str) and out):
        errors.append("output: must be a non-empty path")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(model, schedule, kind, params, out)


# ----------------------------------------------------------------------
# Running
# ----------------------------------------------------------------------


def _version():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        desc = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                              capture_output=True, text=True, timeout=5, check=True).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def _point_arr(v, d):
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.size == 1 and d > 1:
        a = np.full(d, float(a[0]))
    if a.size != d:
        raise ConfigError([f"experiment: point has {a.size} coordinates, model dimension is {d}"])
    return a


def _table_text(header, rows):
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(v if isinstance(v, str) else ("" if v is None else format_number(v))
                              for v in r))
    return "\n".join(lines) + "\n"


def _fit_summary(fit):
    if fit is None:
        return None
    return {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2}


def _execute(cfg):
    """Run a validated config; returns ``(files, summary, exit_code)`` with
    ``files`` mapping output paths to bytes."""
    model = model_from_spec(cfg.model)
    sched = schedule_from_spec(cfg.schedule) if cfg.schedule is not None else None
    p = cfg.params
    summary, code = {}, EXIT_OK
    files = {}

    if cfg.kind == "oracle":
        alpha, sigma = model.meta["ou"]
        o = OuOracle(alpha, sigma, sched, initial_variance=p["initial_variance"])
        tab = o.table(p["n"] + 1)
        text = _table_text(["n", "gamma", "Gamma", "variance", "w1", "tv_lower_bound"],
                           [[int(r[0]), *r[1:]] for r in tab.tolist()])
        files[cfg.output] = text.encode()
        summary = {"invariant_variance": o.invariant_variance,
                   "square_summable": o.square_summable(p["n"])[1]}

    elif cfg.kind == "run":
        steps = p["steps"]
        cps = p["checkpoints"] if p["checkpoints"] is not None else [steps]
        x0 = p["x0"] if p["x0"] == "invariant" else _point_arr(p["x0"], model.d)
        obs = [EmpiricalMeasureRecorder(model.d)] if p["export"] == "measure" else []
        res = simulate(model, sched, steps, x0, seed=p["seed"], n_paths=p["paths"],
                       checkpoints=cps, observers=obs, on_blowup=p["on_blowup"])
        if p["export"] == "measure":
            G = sched.gamma_sum(steps)
            rows = np.concatenate([rows_from_measure(obs[0].measures[s], s, steps, G)
                                   for s in res.streams.tolist()])
        else:
            rows = np.concatenate([rows_from_snapshot(res.snapshots[n], n, sched.gamma_sum(n), res.streams)
                                   for n in sorted(cps)])
        buf = io.StringIO()
        write_csv(buf, rows, model.d)
        files[cfg.output] = buf.getvalue().encode()
        if p["binary"]:
            bbuf = io.BytesIO()
            write_binary(bbuf, rows, model.d)
            files[p["binary"]] = bbuf.getvalue()
        summary = {"dropped": int(res.dropped.sum()), "rows": int(rows.shape[0])}

    elif cfg.kind in ("one-step-strong", "one-step-weak"):
        x = _point_arr(p["x"], model.d)
        if cfg.kind == "one-step-strong":
            pts, fit = strong_sweep(model, x, p["gammas"], p=p["p"], n_paths=p["paths"],
                                    n_substeps=p["substeps"], seed=p["seed"], reference=p["reference"])
        else:
            pts, fit = weak_sweep(model, TEST_FUNCTIONS[p["g"]], x, p["gammas"], n_paths=p["paths"],
                                  n_substeps=p["substeps"], seed=p["seed"], reference=p["reference"],
                                  paired=p["paired"], max_substeps=p["max_substeps"])
            if any(pt.inconclusive for pt in pts):
                code = EXIT_INCONCLUSIVE
        header = ["gamma", "error", "std_error", "n_paths", "n_substeps", "reference",
                  "bias_estimate", "inconclusive"]
        rows = [[pt.gamma, pt.error, pt.std_error, pt.n_paths, pt.n_substeps, pt.reference,
                 pt.bias_estimate, pt.inconclusive] for pt in pts]
        files[cfg.output] = _table_text(header, rows).encode()
        summary = {"fit": _fit_summary(fit)}

    elif cfg.kind == "long-run":
        x0 = p["x0"] if p["x0"] == "invariant" else _point_arr(p["x0"], model.d)
        r = long_run_rate_experiment(model, sched, p["checkpoints"], n_paths=p["paths"],
                                     target=p["target"], distance=p["distance"], seed=p["seed"],
                                     x0=x0, t_burn=p["t_burn"], refine=p["refine"], bins=p["bins"],
                                     on_blowup=p["on_blowup"])
        rows = [[row["n"], row["gamma"], row["Gamma"], row["value"], row["fitted"]] for row in r.rows]
        files[cfg.output] = _table_text(["n", "gamma", "Gamma", "value", "fitted"], rows).encode()
        summary = {"fit": _fit_summary(r.fit), "burn_in_time": r.burn_in_time, "target": r.target,
                   "strictly_decreasing": r.strictly_decreasing, "dropped": r.meta["dropped"]}

    elif cfg.kind == "check":
        kw = dict(sample_count=p["samples"], radius=p["radius"], seed=p["seed"])
        dis = check_dissipativity(model, **kw)
        ell = check_ellipticity(model, **kw)
        rows = [["dissipativity_estimate", dis.estimate], ["ellipticity_min_eigenvalue", ell.min_eigenvalue]]
        if model.has_lyapunov:
            mr = check_mean_reversion(model, **kw)
            rows += [["mean_reversion_alpha", mr.alpha], ["mean_reversion_beta", mr.beta],
                     ["mean_reversion_worst_violation", mr.worst_violation]]
        rows.append(["empirical_only", "true"])
        files[cfg.output] = _table_text(["quantity", "value"], rows).encode()
        summary = {k: v for k, v in rows if not isinstance(v, str)}

    elif cfg.kind == "bel":
        x = _point_arr(p["x"], model.d)
        r = bel_gradient(model, TEST_FUNCTIONS[p["f"]], x, p["t"], n_paths=p["paths"],
                         n_substeps=p["substeps"], seed=p["seed"])
        rows = [[i, float(g), float(s)] for i, (g, s) in enumerate(zip(r.gradient, r.std_error))]
        files[cfg.output] = _table_text(["coordinate", "gradient", "std_error"], rows).encode()
        summary = {"rejected": r.rejected}
    return files, summary, code


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(u) for k, u in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(u) for u in v]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def run(cfg, force=False, stream=sys.stdout):
    """Run a validated :class:`ExperimentConfig` and write its files.

    Existing outputs are kept unless ``force``.  Returns the exit code.
    """
    manifest_path = cfg.output + ".manifest.json"
    targets = [cfg.output, manifest_path] + ([cfg.params["binary"]] if cfg.params.get("binary") else [])
    if not force:
        clash = [t for t in targets if os.path.exists(t)]
        if clash:
            print(f"error: refusing to overwrite {', '.join(clash)} (use --force)", file=sys.stderr)
            return EXIT_IO
    for t in targets:
        parent = os.path.dirname(os.path.abspath(t))
        if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
            print(f"error: cannot write {t}", file=sys.stderr)
            return EXIT_IO
    t0 = time.perf_counter()
    try:
        files, summary, code = _execute(cfg)
    except BlowUpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    wall = time.perf_counter() - t0
    try:
        for path, data in files.items():
            with open(path, "wb") as f:
                f.write(data)
        manifest = {
            "config": cfg.as_dict(),
            "seed": cfg.params.get("seed"),
            "version": _version(),
            "wall_time": wall,
            "exit_code": code,
            "summary": _jsonable(summary),
            "outputs": {path: hashlib.sha256(data).hexdigest() for path, data in files.items()},
        }
        with open(manifest_path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps({"output": cfg.output, "exit_code": code, **_jsonable(summary)}, sort_keys=True),
          file=stream)
    return code


# ----------------------------------------------------------------------
# Presets
# ----------------------------------------------------------------------

PRESETS = {
    "ou-variance": {
        "model": {"name": "ou", "alpha": 1.0, "sigma": math.sqrt(2.0)},
        "schedule": {"kind": "polynomial", "gamma1": 0.5, "a": 0.9},
        "experiment": {"kind": "run", "steps": 100000, "paths": 10000,
                       "checkpoints": [100, 1000, 10000, 100000]},
    },
    "ou-oracle": {
        "model": {"name": "ou", "alpha": 1.0, "sigma": math.sqrt(2.0)},
        "schedule": {"kind": "polynomial", "gamma1": 0.5, "a": 0.9},
        "experiment": {"kind": "oracle", "n": 100000},
    },
    "ou-long-run-w1": {
        "model": {"name": "ou", "alpha": 1.0, "sigma": math.sqrt(2.0)},
        "schedule": {"kind": "polynomial", "gamma1": 0.5, "a": 0.9},
        "experiment": {"kind": "long-run", "paths": 8000, "target": "exact", "x0": "invariant",
                       "checkpoints": [1000, 1778, 3162, 5623, 10000, 17783, 31623, 56234, 100000]},
    },
    "strong-additive": {
        "model": {"name": "ou", "alpha": 1.0, "sigma": math.sqrt(2.0)},
        "experiment": {"kind": "one-step-strong", "x": 1.0, "paths": 100000},
    },
    "strong-multiplicative": {
        "model": {"name": "heavytail", "d": 1, "kappa": 1.0},
        "experiment": {"kind": "one-step-strong", "x": 1.0, "paths": 100000},
    },
    "weak-additive": {
        "model": {"name": "ou", "alpha": 1.0, "sigma": math.sqrt(2.0)},
        "experiment": {"kind": "one-step-weak", "g": "x2", "x": 1.0, "paths": 100000},
    },
    "weak-multiplicative": {
        "model": {"name": "heavytail", "d": 1, "kappa": 1.0},
        "experiment": {"kind": "one-step-weak", "g": "cos", "x": 0.5, "paths": 100000,
                       "gammas": [0.25, 0.125, 0.0625, 0.03125, 0.015625]},
    },
    "multiplicative-long-run": {
        "model": {"name": "heavytail", "d": 1, "kappa": 1.0},
        "schedule": {"kind": "polynomial", "gamma1": 1.0, "a": 0.5},
        "experiment": {"kind": "long-run", "paths": 40000, "target": "reference", "refine": 10,
                       "x0": "invariant", "checkpoints": [2**k for k in range(5, 13)]},
    },
    "bel-ou": {
        "model": {"name": "ou", "alpha": 1.0, "sigma": 1.0},
        "experiment": {"kind": "bel", "f": "x", "x": 0.0, "t": 1.0, "paths": 20000, "substeps": 200},
    },
    "check-heavytail": {
        "model": {"name": "heavytail", "d": 2, "kappa": 1.0},
        "experiment": {"kind": "check"},
    },
}


# ----------------------------------------------------------------------
# Argument parsing
# ----------------------------------------------------------------------


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(float(v)) for v in text.split(",") if v.strip()]


def _point_arg(text):
    if text == "invariant":
        return text
    v = _floats(text)
    return v[0] if len(v) == 1 else v


def _common(p, paths=True, schedule=False, model=True):
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    if model:
        p.add_argument("--model", help='built-in model, e.g. "ou:alpha=1,sigma=1.4142" or "heavytail:d=1,kappa=1"')
    if schedule:
        p.add_argument("--schedule", help='step schedule, e.g. "poly:0.5:0.9"')
    p.add_argument("--seed", type=int)
    if paths:
        p.add_argument("--paths", type=int)
    p.add_argument("--out", help="output CSV path (a manifest is written next to it)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser():
    ap = argparse.ArgumentParser(prog="langstep", description="Decreasing-step Euler sampler and convergence-order experiments.")
    ap.add_argument("--version", action="version", version=f"langstep {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate chains and export snapshots or empirical measures")
    _common(p, schedule=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--x0", type=_point_arg)
    p.add_argument("--checkpoints", type=_ints)
    p.add_argument("--export", choices=["snapshots", "measure"])
    p.add_argument("--binary", help="also write the rows in the LSTP binary layout")
    p.add_argument("--on-blowup", dest="on_blowup", choices=["abort", "drop"])

    p = sub.add_parser("oracle", help="dump exact OU chain curves")
    _common(p, paths=False, schedule=True, model=False)
    p.add_argument("--alpha", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--initial-variance", dest="initial_variance", type=float)

    rates = sub.add_parser("rates", help="convergence-order sweeps")
    rsub = rates.add_subparsers(dest="rate_kind", required=True)
    for name in ("one-step-strong", "one-step-weak"):
        p = rsub.add_parser(name)
        _common(p)
        p.add_argument("--gammas", type=_floats)
        p.add_argument("--x", type=_point_arg)
        p.add_argument("--substeps", type=int)
        p.add_argument("--reference", choices=["auto", "exact", "fine"])
        if name == "one-step-strong":
            p.add_argument("--p", type=int, choices=[1, 2, 4])
        else:
            p.add_argument("--g", choices=sorted(TEST_FUNCTIONS))
            p.add_argument("--max-substeps", dest="max_substeps", type=int)
            p.add_argument("--unpaired", dest="paired", action="store_const", const=False)
    p = rsub.add_parser("long-run")
    _common(p, schedule=True)
    p.add_argument("--checkpoints", type=_ints)
    p.add_argument("--target", choices=["auto", "analytic", "exact", "reference"])
    p.add_argument("--distance", choices=["w1_exact_1d", "w1_sliced", "tv_histogram"])
    p.add_argument("--x0", type=_point_arg)
    p.add_argument("--t-burn", dest="t_burn", type=float)
    p.add_argument("--refine", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--on-blowup", dest="on_blowup", choices=["abort", "drop"])

    p = sub.add_parser("check", help="sampling probes of the model assumptions")
    _common(p, paths=False)
    p.add_argument("--samples", type=int)
    p.add_argument("--radius", type=float)

    p = sub.add_parser("bel", help="Bismut-Elworthy-Li gradient estimate")
    _common(p)
    p.add_argument("--f", choices=sorted(TEST_FUNCTIONS))
    p.add_argument("--x", type=_point_arg)
    p.add_argument("--t", type=float)
    p.add_argument("--substeps", type=int)

    p = sub.add_parser("preset", help="run a documented preset experiment")
    p.add_argument("name", nargs="?", choices=sorted(PRESETS))
    p.add_argument("--list", action="store_true", help="print the presets as JSON")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    return ap


_NON_PARAMS = {"command", "rate_kind", "config", "model", "schedule", "out", "force",
               "alpha", "sigma", "name", "list"}


def _load_config_file(path):
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if isinstance(doc, dict) and "config" in doc and "outputs" in doc:
        doc = doc["config"]  # a manifest: rerun its config
    return doc


def _config_from_args(args):
    doc = _load_config_file(args.config) if getattr(args, "config", None) else {}
    kind = args.rate_kind if args.command == "rates" else args.command
    exp = dict(doc.get("experiment", {}))
    exp["kind"] = kind
    for k, v in vars(args).items():
        if k not in _NON_PARAMS and v is not None:
            exp[k] = v
    doc["experiment"] = exp
    if getattr(args, "model", None):
        doc["model"] = args.model
    if kind == "oracle" and (args.alpha is not None or args.sigma is not None or "model" not in doc):
        m = {"name": "ou", "alpha": 1.0, "sigma": math.sqrt(2.0)}
        if isinstance(doc.get("model"), dict):
            m.update({k: v for k, v in doc["model"].items() if k in ("alpha", "sigma")})
        if args.alpha is not None:
            m["alpha"] = args.alpha
        if args.sigma is not None:
            m["sigma"] = args.sigma
        doc["model"] = m
    if getattr(args, "schedule", None):
        doc["schedule"] = args.schedule
    if args.out:
        doc["output"] = args.out
    return doc


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "preset":
        if args.list or not args.name:
            print(json.dumps(PRESETS, indent=2, sort_keys=True))
            return EXIT_OK
        doc = json.loads(json.dumps(PRESETS[args.name]))
        doc["output"] = args.out or f"{args.name}.csv"
    else:
        try:
            doc = _config_from_args(args)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return EXIT_IO
    try:
        cfg = parse_config(doc)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return run(cfg, force=args.force)


if __name__ == "__main__":
    sys.exit(main())
