"""Command line entry point: ``chaoskit run|validate|scenarios``.

Configs are YAML (JSON is accepted too). Numeric fields may be written as
powers of two, e.g. ``dt: 2^-8`` or ``proxy_count: 2^10``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import re
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import yaml

from . import __version__
from ._parallel import THREADS_ENV
from .errors import ChaoskitError, ConfigError, DivergenceError, InvalidInputError
from .harness import STUDIES, ExperimentConfig, MomentAudit, run_study
from .metrics import RateReport
from .model import SCENARIOS

log = logging.getLogger("chaoskit")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 2, 3
FORMATS = ("csv", "report", "both")

CONFIG_KEYS = {
    "schema_version", "scenario", "d", "study", "p_values", "particle_counts", "proxy_count",
    "dt", "dt_ladder", "T", "seeds", "repetitions", "output",
    "n_particles", "reference_dt", "gamma",
}
OUTPUT_KEYS = {"dir", "format", "chart"}

_POWER = re.compile(r"^\s*([-+]?\d+(?:\.\d*)?)\s*(?:\^|\*\*)\s*\(?\s*([-+]?\d+)\s*\)?\s*$")


@dataclass(frozen=True)
class OutputOptions:
    dir: str = "results"
    format: str = "csv"
    chart: bool = False


def _number(value, key):
    if isinstance(value, bool):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return value
    if isinstance(value, str):
        m = _POWER.match(value)
        if m:
            base, exp = float(m.group(1)), int(m.group(2))
            result = base**exp
            return int(result) if exp >= 0 and base.is_integer() else result
        try:
            return float(value)
        except ValueError:
            pass
    raise ConfigError(key, f"expected a number, got {value!r}")


def _integer(value, key):
    num = _number(value, key)
    if float(num) != int(num):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    return int(num)


def _positive_float(value, key):
    num = float(_number(value, key))
    if not (math.isfinite(num) and num > 0):
        raise ConfigError(key, f"must be a positive finite number, got {value!r}")
    return num


def _list(value, key, convert):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(key, f"expected a list, got {value!r}")
    return tuple(convert(v, key) for v in value)


def load_document(text: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"malformed config document: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("", "config document must be a mapping of keys to values")
    return doc


def parse_document(text: str) -> Tuple[ExperimentConfig, OutputOptions]:
    doc = load_document(text)
    unknown = sorted(set(doc) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(unknown[0], f"unknown key (allowed: {', '.join(sorted(CONFIG_KEYS))})")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported schema version {version!r}, expected {SCHEMA_VERSION}")
    if "scenario" not in doc:
        raise ConfigError("scenario", "required")
    if not isinstance(doc["scenario"], str):
        raise ConfigError("scenario", "must be a string")
    study = doc.get("study", "poc_in_N")
    if study not in STUDIES:
        raise ConfigError("study", f"must be one of {STUDIES}, got {study!r}")

    fields = {"scenario": doc["scenario"], "study": study}
    if "d" in doc:
        fields["d"] = _integer(doc["d"], "d")
    if "p_values" in doc:
        fields["p_values"] = tuple(float(v) for v in _list(doc["p_values"], "p_values", _number))
    if "particle_counts" in doc:
        fields["particle_counts"] = _list(doc["particle_counts"], "particle_counts", _integer)
    for key in ("proxy_count", "n_particles", "repetitions"):
        if key in doc:
            fields[key] = _integer(doc[key], key)
    for key in ("dt", "reference_dt", "T", "gamma"):
        if key in doc:
            fields[key] = _positive_float(doc[key], key)
    if "dt_ladder" in doc:
        fields["dt_ladder"] = _list(doc["dt_ladder"], "dt_ladder", _positive_float)
    if "seeds" in doc:
        seeds = _list(doc["seeds"], "seeds", _integer)
        if any(s < 0 for s in seeds):
            raise ConfigError("seeds", "seeds must be nonnegative")
        fields["seeds"] = seeds
        fields.setdefault("repetitions", len(seeds))

    config = ExperimentConfig(**fields)
    config = config.validate()
    # materialise defaults so the echo fully pins the run
    config = ExperimentConfig(**{**asdict(config), "seeds": config.resolved_seeds()})
    return config, _parse_output(doc.get("output", {}))


def _parse_output(raw) -> OutputOptions:
    if raw is None:
        raw = {}
    if isinstance(raw, str):
        raw = {"dir": raw}
    if not isinstance(raw, dict):
        raise ConfigError("output", "must be a mapping or a directory string")
    unknown = sorted(set(raw) - OUTPUT_KEYS)
    if unknown:
        raise ConfigError(f"output.{unknown[0]}", "unknown key")
    opts = OutputOptions(**raw)
    if opts.format not in FORMATS:
        raise ConfigError("output.format", f"must be one of {FORMATS}")
    if not isinstance(opts.chart, bool):
        raise ConfigError("output.chart", "must be true or false")
    return opts


def parse_config(text: str) -> ExperimentConfig:
    return parse_document(text)[0]


def config_to_dict(config: ExperimentConfig, output: Optional[OutputOptions] = None) -> dict:
    doc = {"schema_version": SCHEMA_VERSION}
    for key, value in asdict(config).items():
        if value is None or (isinstance(value, tuple) and not value):
            continue
        doc[key] = list(value) if isinstance(value, tuple) else value
    if output is not None:
        doc["output"] = asdict(output)
    return doc


def emit_config(config: ExperimentConfig, output: Optional[OutputOptions] = None) -> str:
    """Serialise a config; floats use shortest round-trip decimals."""
    return json.dumps(config_to_dict(config, output), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# result files


def _fmt(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".17g")


def csv_text(report: RateReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["study", "p", "abscissa", "error_mean", "error_stderr", "reps"])
    for row in report.rows:
        writer.writerow([report.study, _fmt(report.p), _fmt(row.abscissa), _fmt(row.error_mean),
                         _fmt(row.error_stderr), row.reps])
    writer.writerow(["slope", _fmt(report.slope)])
    writer.writerow(["intercept", _fmt(report.intercept)])
    writer.writerow(["r_squared", _fmt(report.r_squared)])
    return buf.getvalue()


def emit_csv(report: RateReport, destination) -> Path:
    if not report.rows:
        raise InvalidInputError("report has no rows")
    path = Path(destination)
    path.write_text(csv_text(report), encoding="utf-8", newline="")
    return path


def moment_csv_text(audit: MomentAudit) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["study", "p", "abscissa", "moment_mean", "moment_stderr", "moment_max", "reps", "finite"])
    for row in audit.rows:
        writer.writerow([audit.study, _fmt(row.p), _fmt(row.abscissa), _fmt(row.moment_mean),
                         _fmt(row.moment_stderr), _fmt(row.moment_max), row.reps, _fmt(row.finite)])
    writer.writerow(["all_finite", _fmt(audit.all_finite)])
    return buf.getvalue()


def emit_loglog_chart(report: RateReport, destination, reference_slope: Optional[float] = None) -> Path:
    """Write an SVG log-log chart of the measured errors with a dashed reference slope."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points = [(r.abscissa, r.error_mean) for r in report.rows if r.error_mean > 0]
    if len(points) < 2:
        raise InvalidInputError("chart needs at least two rows with positive error")
    if reference_slope is None:
        reference_slope = 0.5 if report.study.startswith("strong_in_dt") else -0.5
    xs, ys = zip(*points)
    x0, y0 = xs[0], ys[0]
    ref = [y0 * (x / x0) ** reference_slope for x in xs]
    label = "no fit" if report.slope is None else f"{report.slope:.4g}"

    with matplotlib.rc_context({"svg.hashsalt": "chaoskit", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.loglog(xs, ys, "o-", label=f"L{report.p:g} error")
        ax.loglog(xs, ref, "k--", label=f"slope {reference_slope:g}")
        ax.set_xlabel("dt" if report.study.startswith("strong_in_dt") else "N")
        ax.set_ylabel("error")
        ax.set_title(report.study)
        ax.text(0.05, 0.05, f"fitted slope {label}", transform=ax.transAxes)
        ax.legend()
        path = Path(destination)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def manifest(config: ExperimentConfig, results, duration: float) -> dict:
    if isinstance(results, MomentAudit):
        studies = [results.to_dict()]
    else:
        studies = [r.to_dict() for r in results]
    return {
        "tool": "chaoskit",
        "version": __version__,
        "config": config_to_dict(config),
        "seeds": list(config.resolved_seeds()),
        "wall_clock_seconds": duration,
        "studies": studies,
    }


def _stem(config: ExperimentConfig, p: float) -> str:
    return f"{config.study}_{config.scenario}_d{config.d}_p{p:g}"


def write_outputs(config: ExperimentConfig, results, out_dir, fmt="csv", chart=False, duration=0.0):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        if isinstance(results, MomentAudit):
            path = out / f"{config.study}_{config.scenario}_d{config.d}.csv"
            path.write_text(moment_csv_text(results), encoding="utf-8", newline="")
            written.append(path)
        else:
            written += [emit_csv(r, out / f"{_stem(config, r.p)}.csv") for r in results]
    if fmt in ("report", "both"):
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest(config, results, duration), indent=2) + "\n", encoding="utf-8")
        written.append(path)
    if chart and not isinstance(results, MomentAudit):
        for r in results:
            try:
                written.append(emit_loglog_chart(r, out / f"{_stem(config, r.p)}.svg"))
            except InvalidInputError as exc:
                log.warning("chart skipped for p=%g: %s", r.p, exc)
    return written


# ---------------------------------------------------------------------------
# verbs


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc}") from None


def cmd_run(args) -> int:
    config, output = parse_document(_read(args.config))
    out_dir = args.out or output.dir
    fmt = args.format or output.format
    chart = args.chart or output.chart
    start = time.perf_counter()
    results = run_study(config)
    duration = time.perf_counter() - start
    for path in write_outputs(config, results, out_dir, fmt, chart, duration):
        print(path)
    if isinstance(results, MomentAudit):
        print(f"all moments finite: {results.all_finite}")
    else:
        for r in results:
            print(f"p={r.p:g} slope={_fmt(r.slope)} r_squared={_fmt(r.r_squared)} {r.note}".rstrip())
    return EXIT_OK


def cmd_validate(args) -> int:
    config, output = parse_document(_read(args.config))
    sys.stdout.write(emit_config(config, output))
    return EXIT_OK


def _pow2(value) -> str:
    if isinstance(value, list):
        return "[" + ", ".join(_pow2(v) for v in value) + "]"
    k = math.log2(value)
    return f"2^{int(k)}" if k.is_integer() else f"{value:g}"


def cmd_scenarios(args) -> int:
    for info in SCENARIOS.values():
        dims = "d=1" if info.scalar_only else "any d"
        ref = ", ".join(f"{k}={_pow2(v)}" for k, v in info.reference_setup.items())
        print(f"{info.name} ({dims}): {info.summary}")
        print(f"    reference setup: {ref}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chaoskit",
        description="Particle simulation of McKean-Vlasov SDEs and convergence-rate studies.",
        epilog=f"{THREADS_ENV} caps worker threads. Exit codes: 0 ok, 2 config error, 3 divergence.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the study described by a config file")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (overrides output.dir)")
    run.add_argument("--format", choices=FORMATS, help="csv, report (JSON manifest) or both")
    run.add_argument("--chart", action="store_true", help="also write log-log SVG charts")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    val.add_argument("config")
    val.set_defaults(func=cmd_validate)

    scen = sub.add_parser("scenarios", help="list built-in scenarios")
    scen.set_defaults(func=cmd_scenarios)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ChaoskitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
