"""Command line harness: polykin --config run.json [--seed S] [--threads K] [--out DIR] [--check].

Exit codes: 0 success, 2 invalid configuration or parameters, 3 runtime
error, 4 an acceptance check failed under --check.
"""

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .experiments import COMMANDS, DEFAULTS, USES_PARAMS, merge_defaults
from .kinetic_types import ParameterError, SystemParams

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4
TOP_KEYS = {"command", "seed", "params", "experiment"}
PLOT_COLUMNS = ("series", "x", "y", "y_err")


class ConfigError(ValueError):
    """Configuration missing, malformed or failing the schema."""


def _type_ok(default, value):
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _check_types(defaults, values, path):
    for key, val in values.items():
        if isinstance(defaults[key], dict):
            _check_types(defaults[key], val, f"{path}.{key}")
        elif not _type_ok(defaults[key], val):
            raise ConfigError(f"{path}.{key} has the wrong type")


def load_config(doc):
    """Validate a RunConfig document and return it with defaults filled in."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    command = doc.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"command must be one of {sorted(COMMANDS)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    overrides = doc.get("experiment", {})
    if not isinstance(overrides, dict):
        raise ConfigError("experiment must be an object")
    try:
        experiment = merge_defaults(DEFAULTS[command], overrides)
    except (KeyError, TypeError) as exc:
        raise ConfigError(str(exc).strip("'\"")) from exc
    _check_types(DEFAULTS[command], overrides, "experiment")
    params = doc.get("params")
    if params is not None:
        if command not in USES_PARAMS:
            raise ConfigError(f"command {command} takes no params block")
        try:
            SystemParams.from_dict(params).validate(ratio_max=1.0)
        except (ParameterError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid params: {exc}") from exc
    return {"command": command, "seed": seed, "params": params, "experiment": experiment}


def config_hash(config):
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows, chash):
    """CSV text with a '# config_hash' header line; columns are the union in first-seen order."""
    cols = []
    for row in rows:
        for key in row:
            if key not in cols:
                cols.append(key)
    if not cols:
        cols = list(PLOT_COLUMNS)
    buf = io.StringIO()
    buf.write(f"# config_hash: {chash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_fmt(row.get(c, "")) for c in cols])
    return buf.getvalue()


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _dump(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def write_outputs(out_dir, config, result, wallclock, threads):
    """Write results.csv, summary.json, checks.json, artifacts and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config)
    files = {
        "results.csv": rows_to_csv(result.rows, chash),
        "summary.json": _dump({"config_hash": chash, "summary": result.summary}),
        "checks.json": _dump({"config_hash": chash,
                              "checks": [c.to_dict() for c in result.checks],
                              "passed": result.passed}),
    }
    for name, text in result.artifacts.items():
        if name.endswith(".jsonl"):
            text = json.dumps({"config_hash": chash}) + "\n" + text
        files[name] = text
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {
        "config_hash": chash, "config": config, "seed": config["seed"],
        "threads": threads, "wallclock_seconds": wallclock,
        "versions": {"polykin": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "files": {name: hashlib.sha256(text.encode()).hexdigest()
                  for name, text in sorted(files.items())},
    }
    (out / "manifest.json").write_text(_dump(manifest))
    return sorted(files) + ["manifest.json"]


def run(config_path, seed=None, threads=None, out=None, check=False, stream=None):
    """Execute one configured experiment; returns the process exit status."""
    from .experiments import run_command

    stream = sys.stdout if stream is None else stream
    try:
        if config_path is None or not os.path.exists(config_path):
            raise ConfigError(f"config not found: {config_path}")
        try:
            doc = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc}") from exc
        if seed is not None:
            doc["seed"] = seed
        config = load_config(doc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = out or f"polykin-{config['command']}"
    start = time.perf_counter()
    try:
        result = run_command(config["command"], config["experiment"], config["params"],
                             config["seed"], threads)
    except ParameterError as exc:
        print(f"parameter error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure inside an experiment is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    wall = time.perf_counter() - start
    write_outputs(out, config, result, wall, threads)
    for c in result.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name}: {c.value!r} (target {c.target})", file=stream)
    if check and not result.passed:
        return EXIT_CHECK
    return EXIT_OK


def read_result_csv(path):
    """Parse a result CSV into (header, rows of strings), skipping '#' lines."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not lines:
        return list(PLOT_COLUMNS), []
    reader = csv.reader(lines)
    header = next(reader)
    rows = list(reader)
    if any(len(r) != len(header) for r in rows):
        raise ValueError(f"malformed result file: {path}")
    missing = [c for c in ("series", "x", "y") if c not in header]
    if missing:
        raise ValueError(f"result file {path} lacks columns {missing}")
    return header, rows


def emit_plot_data(result_csvs, out_path=None):
    """Merge result files into long-format (series, x, y, y_err) CSV text.

    Values are copied verbatim; rows are grouped by series (first appearance)
    and stably sorted by numeric x within each series.
    """
    if isinstance(result_csvs, (str, os.PathLike)):
        result_csvs = [result_csvs]
    order, groups = [], {}
    for path in result_csvs:
        header, rows = read_result_csv(path)
        idx = {c: header.index(c) for c in header}
        for r in rows:
            series = r[idx["series"]]
            try:
                float(r[idx["x"]])
                float(r[idx["y"]])
            except ValueError as exc:
                raise ValueError(f"non-numeric x or y in {path}") from exc
            err = r[idx["y_err"]] if "y_err" in idx else ""
            if series not in groups:
                order.append(series)
                groups[series] = []
            groups[series].append((r[idx["series"]], r[idx["x"]], r[idx["y"]], err))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PLOT_COLUMNS)
    for series in order:
        for row in sorted(groups[series], key=lambda t: float(t[1])):
            writer.writerow(row)
    text = buf.getvalue()
    if out_path is not None:
        Path(out_path).write_text(text)
    return text


def config_schema():
    """JSON schema of RunConfig derived from the per-command defaults."""

    def node(value):
        if isinstance(value, dict):
            return {"type": "object", "additionalProperties": False,
                    "properties": {k: node(v) for k, v in value.items()}}
        if isinstance(value, bool):
            return {"type": "boolean"}
        if isinstance(value, (int, float)):
            return {"type": "number"}
        if isinstance(value, str):
            return {"type": "string"}
        return {"type": "array"}

    variants = []
    for cmd, defaults in DEFAULTS.items():
        props = {"command": {"const": cmd}, "seed": {"type": "integer", "minimum": 0},
                 "experiment": node(defaults)}
        if cmd in USES_PARAMS:
            props["params"] = {"type": "object"}
        variants.append({"type": "object", "additionalProperties": False,
                         "required": ["command"], "properties": props})
    return {"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "RunConfig",
            "oneOf": variants}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="polykin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="action")
    parser.add_argument("--config", help="RunConfig JSON file")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--threads", type=int, help="worker bound (default POLYKIN_THREADS or 1)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--check", action="store_true",
                        help="exit 4 when an acceptance threshold fails")
    plot = sub.add_parser("plot-data", help="merge result CSVs into (series, x, y, y_err)")
    plot.add_argument("inputs", nargs="+")
    plot.add_argument("--output", "-o")
    sub.add_parser("schema", help="print the RunConfig JSON schema")
    args = parser.parse_args(argv)
    if args.action == "plot-data":
        try:
            text = emit_plot_data(args.inputs, args.output)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if args.output is None:
            sys.stdout.write(text)
        return EXIT_OK
    if args.action == "schema":
        sys.stdout.write(_dump(config_schema()))
        return EXIT_OK
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("config error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.config, args.seed, args.threads, args.out, args.check)


if __name__ == "__main__":
    sys.exit(main())
