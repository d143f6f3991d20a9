"""Batch experiment front door.

Subcommands: ``pretrain`` (build + checkpoint a frozen backbone), ``run``
(one method, one or more seeds), ``sweep`` (one hyperparameter axis over a
value list), ``ablate`` (the five-variant module comparison) and ``plot``
(CSV to a deterministic SVG chart).

Configuration comes from an optional ``key = value`` file with dotted keys
(``spec.grid_side = 8``) overridden by command-line flags; the fully
resolved configuration is echoed into the output directory as JSON, next to
the per-run trace files and the summary CSV, which is enough to replay any
run exactly.  Exit codes: 0 success, 1 runtime abort, 2 configuration
error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from cpsp.harness import (
    Hyper,
    SyntheticSpec,
    backbone_from_checkpoint,
    generate_stream,
    pretrain_backbone,
    run_sequence,
)
from cpsp.sampling import patch_budget
from cpsp.tensor import ContractError
from cpsp.training import RunAbortError
from cpsp.vit import BackboneConfig

__all__ = ["ConfigError", "DataError", "RunConfig", "cmd_ablate", "cmd_sweep",
           "emit_svg", "main", "parse_config"]

CSV_SCHEMA_LINE = "# schema=1"
CSV_COLUMNS = ("run_id", "method", "axis", "value", "seed", "acc", "fgt",
               "peak_live_elements", "total_macs", "wall_time_s")
ABLATION_VARIANTS = ("full", "pd", "cps", "pd+dpct", "cps+dpct")


class ConfigError(ValueError):
    """Bad configuration key or value (exit code 2)."""


class DataError(ValueError):
    """Malformed input artifact such as a CSV (exit code 3)."""


@dataclasses.dataclass
class RunConfig:
    method: str = "cps"
    spec: SyntheticSpec = dataclasses.field(default_factory=SyntheticSpec)
    hyper: Hyper = dataclasses.field(default_factory=Hyper)
    seeds: tuple = (0,)
    out: str = "runs"
    workers: int = 1
    checkpoint: str | None = None
    pretrain_epochs: int = 30

    def to_json(self) -> str:
        payload = {
            "method": self.method,
            "spec": dataclasses.asdict(self.spec),
            "hyper": dataclasses.asdict(self.hyper),
            "seeds": list(self.seeds),
            "out": self.out,
            "workers": self.workers,
            "checkpoint": self.checkpoint,
            "pretrain_epochs": self.pretrain_epochs,
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        raw = json.loads(text)
        return RunConfig(
            method=raw["method"],
            spec=SyntheticSpec(**raw["spec"]),
            hyper=Hyper(**raw["hyper"]),
            seeds=tuple(raw["seeds"]),
            out=raw["out"],
            workers=raw["workers"],
            checkpoint=raw.get("checkpoint"),
            pretrain_epochs=raw.get("pretrain_epochs", 30),
        )


_SPEC_KEYS = {f"spec.{f.name}": f.name for f in dataclasses.fields(SyntheticSpec)}
_HYPER_KEYS = {f"hyper.{f.name}": f.name for f in dataclasses.fields(Hyper)}
_TOP_KEYS = ("method", "seeds", "out", "workers", "checkpoint", "pretrain_epochs")


def _parse_value(key: str, text: str):
    text = text.strip()
    if key == "seeds":
        try:
            return tuple(int(s) for s in text.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"invalid value for {key!r}: {text!r}")
    if key in ("method", "out", "checkpoint"):
        return text
    if key == "hyper.freeze_previous_components":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"invalid value for {key!r}: {text!r}")
    caster = float if ("ratio" in key or "noise" in key or key.endswith(("lr", "temperature"))) else int
    try:
        return caster(text)
    except ValueError:
        raise ConfigError(f"invalid value for {key!r}: {text!r}")


def _read_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}")
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, text = (part.strip() for part in line.split("=", 1))
        values[key] = text
    return values


def parse_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, the optional config file and flag overrides.

    Unknown keys and out-of-range values raise :class:`ConfigError` naming
    the offending key.
    """
    merged: dict = {}
    if path is not None:
        merged.update(_read_config_file(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value if not isinstance(value, str) else value

    spec_kw: dict = {}
    hyper_kw: dict = {}
    top: dict = {}
    for key, raw in merged.items():
        value = _parse_value(key, raw) if isinstance(raw, str) else raw
        if key in _SPEC_KEYS:
            spec_kw[_SPEC_KEYS[key]] = value
        elif key in _HYPER_KEYS:
            hyper_kw[_HYPER_KEYS[key]] = value
        elif key in _TOP_KEYS:
            top[key] = value
        else:
            raise ConfigError(f"unknown configuration key {key!r}")

    try:
        spec = SyntheticSpec(**spec_kw)
        hyper = Hyper(**hyper_kw)
        if not 0.0 <= hyper.phase_ratio <= 1.0:
            raise ContractError("hyper.phase_ratio outside [0, 1]")
        if not hyper.temperature > 0:
            raise ContractError("hyper.temperature must be > 0")
        patch_budget(spec.num_patches, hyper.reduction_ratio)
    except ContractError as exc:
        raise ConfigError(str(exc))

    config = RunConfig(spec=spec, hyper=hyper, **top)
    if config.method not in ("cps", "pd", "topk", "full", "sgd_naive"):
        raise ConfigError(f"unknown method {config.method!r}")
    if config.workers < 1:
        raise ConfigError("workers must be >= 1")
    if not config.seeds:
        raise ConfigError("seeds must be nonempty")
    return config


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def _ensure_out(config: RunConfig) -> str:
    os.makedirs(config.out, exist_ok=True)
    with open(os.path.join(config.out, "config.json"), "w") as fh:
        fh.write(config.to_json() + "\n")
    return config.out


def _checkpoint_stem(config: RunConfig) -> str:
    return config.checkpoint or os.path.join(config.out, "backbone")


def _load_or_pretrain(config: RunConfig):
    stem = _checkpoint_stem(config)
    bb_config = BackboneConfig(grid_side=config.spec.grid_side,
                               input_patch_dim=config.spec.patch_dim)
    if os.path.exists(stem + ".json"):
        return backbone_from_checkpoint(stem, bb_config)
    stream = generate_stream(config.spec)
    return pretrain_backbone(stream.pretrain, bb_config, seed=config.spec.seed,
                             max_epochs=config.pretrain_epochs,
                             checkpoint_stem=stem)


def _one_run(config_json: str, method: str, axis: str, value: float, seed: int):
    """Worker entry: execute one sequence and leave its artifacts on disk."""
    config = RunConfig.from_json(config_json)
    hyper = dataclasses.replace(config.hyper, seed=seed)
    if axis == "r":
        hyper = dataclasses.replace(hyper, reduction_ratio=float(value))
    elif axis == "tau":
        hyper = dataclasses.replace(hyper, temperature=float(value))
    elif axis == "lambda":
        hyper = dataclasses.replace(hyper, phase_ratio=float(value))
    elif axis not in ("", "ablation"):
        raise ConfigError(f"unknown sweep axis {axis!r}")

    run_method, run_hyper = method, hyper
    if method == "pd+dpct":
        run_method = "pd"
    elif method == "cps+dpct":
        run_method = "cps"
    elif method in ("pd", "cps") and axis == "ablation":
        run_hyper = dataclasses.replace(hyper, phase_ratio=1.0)

    backbone = _load_or_pretrain(config)
    result = run_sequence(run_method, config.spec, run_hyper, backbone=backbone)

    run_id = f"{method.replace('+', '_')}-{axis or 'single'}-{value:g}-s{seed}" \
        if axis not in ("",) else f"{method.replace('+', '_')}-s{seed}"
    run_dir = os.path.join(config.out, run_id)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        payload = json.loads(config.to_json())
        payload.update({"resolved_method": run_method, "axis": axis, "value": value,
                        "seed": seed, "hyper": dataclasses.asdict(run_hyper)})
        json.dump(payload, fh, indent=1, sort_keys=True)
    result.trace.to_jsonl(os.path.join(run_dir, "trace.jsonl"))
    with open(os.path.join(run_dir, "report.json"), "w") as fh:
        fh.write(result.report.to_json() + "\n")
    fgt = result.fgt
    return {
        "run_id": run_id,
        "method": method,
        "axis": axis,
        "value": f"{value:g}" if axis not in ("", "ablation") else "",
        "seed": seed,
        "acc": f"{result.acc:.6f}",
        "fgt": "" if fgt is None else f"{fgt:.6f}",
        "peak_live_elements": result.report.peak_live_elements,
        "total_macs": result.report.total_macs,
        "wall_time_s": f"{result.report.wall_time_s:.3f}",
    }


def _write_csv(path: str, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_SCHEMA_LINE + "\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path: str) -> list:
    """Read a summary CSV back, checking the schema line."""
    try:
        with open(path) as fh:
            first = fh.readline().strip()
            if first != CSV_SCHEMA_LINE:
                raise DataError(f"{path}: missing schema line {CSV_SCHEMA_LINE!r}")
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path!r}: {exc}")


def _execute_jobs(config: RunConfig, jobs: list) -> list:
    """Run (method, axis, value, seed) jobs, possibly in worker processes."""
    _load_or_pretrain(config)  # materialise the checkpoint once, serially
    blob = config.to_json()
    if config.workers == 1:
        return [_one_run(blob, *job) for job in jobs]
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        futures = [pool.submit(_one_run, blob, *job) for job in jobs]
        return [f.result() for f in futures]


def cmd_sweep(config: RunConfig, axis: str, values) -> str:
    """One run per (axis value, seed); returns the summary CSV path."""
    if axis not in ("r", "tau", "lambda"):
        raise ConfigError(f"sweep axis must be r, tau or lambda, got {axis!r}")
    for v in values:
        if axis == "r":
            patch_budget(config.spec.num_patches, float(v))
        elif axis == "tau" and not float(v) > 0:
            raise ConfigError(f"temperature {v} must be > 0")
        elif axis == "lambda" and not 0 <= float(v) <= 1:
            raise ConfigError(f"phase ratio {v} outside [0, 1]")
    _ensure_out(config)
    jobs = [(config.method, axis, float(v), seed)
            for v in values for seed in config.seeds]
    rows = _execute_jobs(config, jobs)
    path = os.path.join(config.out, "sweep.csv")
    _write_csv(path, rows)
    return path


def cmd_ablate(config: RunConfig) -> str:
    """The five-variant comparison at one reduction ratio, shared seeds."""
    _ensure_out(config)
    jobs = [(variant, "ablation", config.hyper.reduction_ratio, seed)
            for variant in ABLATION_VARIANTS for seed in config.seeds]
    rows = _execute_jobs(config, jobs)
    path = os.path.join(config.out, "ablation.csv")
    _write_csv(path, rows)
    return path


def cmd_run(config: RunConfig) -> str:
    _ensure_out(config)
    jobs = [(config.method, "", 0.0, seed) for seed in config.seeds]
    rows = _execute_jobs(config, jobs)
    path = os.path.join(config.out, "summary.csv")
    _write_csv(path, rows)
    return path


def cmd_pretrain(config: RunConfig) -> str:
    _ensure_out(config)
    stem = _checkpoint_stem(config)
    stream = generate_stream(config.spec)
    bb_config = BackboneConfig(grid_side=config.spec.grid_side,
                               input_patch_dim=config.spec.patch_dim)
    pretrain_backbone(stream.pretrain, bb_config, seed=config.spec.seed,
                      max_epochs=config.pretrain_epochs, checkpoint_stem=stem)
    return stem


# ---------------------------------------------------------------------------
# plotting: deterministic SVG
# ---------------------------------------------------------------------------

_SVG_W, _SVG_H, _MARGIN = 640, 420, 56
_PALETTE = ("#1f6fb2", "#c23b22", "#2e8b57", "#8860b2", "#b8860b", "#444444")


def emit_svg(csv_path: str, out_path: str, x: str = "value", y: str = "acc",
             group: str = "method") -> str:
    """Line chart of ``y`` against ``x``, one polyline per ``group`` value.

    Byte-deterministic for fixed input: groups sorted, floats fixed-format,
    no timestamps.
    """
    rows = read_csv(csv_path)
    series: dict = {}
    for row in rows:
        if set((x, y, group)) - set(row):
            raise DataError(f"{csv_path}: missing column among {x!r}, {y!r}, {group!r}")
        if row[x] == "" or row[y] == "":
            continue
        try:
            series.setdefault(row[group], []).append((float(row[x]), float(row[y])))
        except ValueError:
            raise DataError(f"{csv_path}: non-numeric cell in {x!r}/{y!r}")

    points = [p for pts in series.values() for p in pts]
    if points:
        xs, ys = zip(*points)
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        if x0 == x1:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y0 == y1:
            y0, y1 = y0 - 0.5, y1 + 0.5
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0

    def sx(v):
        return _MARGIN + (v - x0) / (x1 - x0) * (_SVG_W - 2 * _MARGIN)

    def sy(v):
        return _SVG_H - _MARGIN - (v - y0) / (y1 - y0) * (_SVG_H - 2 * _MARGIN)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{_MARGIN}" y1="{_SVG_H - _MARGIN}" x2="{_SVG_W - _MARGIN}" '
        f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" '
        f'y2="{_SVG_H - _MARGIN}" stroke="black"/>',
        f'<text x="{_SVG_W // 2}" y="{_SVG_H - 12}" text-anchor="middle" '
        f'font-size="13">{x}</text>',
        f'<text x="16" y="{_SVG_H // 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {_SVG_H // 2})">{y}</text>',
    ]
    for idx, name in enumerate(sorted(series)):
        pts = sorted(series[name])
        # average duplicate x positions (several seeds per value)
        collapsed = []
        for xv in sorted({p[0] for p in pts}):
            yv = sum(p[1] for p in pts if p[0] == xv) / sum(1 for p in pts if p[0] == xv)
            collapsed.append((xv, yv))
        color = _PALETTE[idx % len(_PALETTE)]
        coords = " ".join(f"{sx(px):.2f},{sy(py):.2f}" for px, py in collapsed)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                     f'points="{coords}"/>')
        for px, py in collapsed:
            parts.append(f'<circle cx="{sx(px):.2f}" cy="{sy(py):.2f}" r="3" '
                         f'fill="{color}"/>')
        parts.append(f'<text x="{_SVG_W - _MARGIN + 6}" y="{_MARGIN + 16 * idx + 4}" '
                     f'font-size="12" fill="{color}">{name}</text>')
    parts.append("</svg>")
    payload = "\n".join(parts) + "\n"
    with open(out_path, "w") as fh:
        fh.write(payload)
    return out_path


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpsp",
                                     description="continual-learning experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "run", "sweep", "ablate", "plot"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--method", default=None)
        p.add_argument("--reduction-ratio", dest="reduction_ratio", default=None)
        p.add_argument("--temperature", default=None)
        p.add_argument("--phase-ratio", dest="phase_ratio", default=None)
        p.add_argument("--epochs", default=None)
        p.add_argument("--tasks", default=None)
        p.add_argument("--seeds", default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--workers", default=None)
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=("r", "tau", "lambda"))
            p.add_argument("--values", required=True)
        if name == "plot":
            p.add_argument("--csv", required=True)
            p.add_argument("--svg", required=True)
            p.add_argument("--x", default="value")
            p.add_argument("--y", default="acc")
            p.add_argument("--group", default="method")
    return parser


def _overrides_from_args(args) -> dict:
    mapping = {
        "method": "method",
        "reduction_ratio": "hyper.reduction_ratio",
        "temperature": "hyper.temperature",
        "phase_ratio": "hyper.phase_ratio",
        "epochs": "hyper.epochs",
        "tasks": "spec.num_tasks",
        "seeds": "seeds",
        "out": "out",
        "workers": "workers",
    }
    overrides = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if "out" not in overrides and os.environ.get("CPSP_OUT_DIR"):
        overrides["out"] = os.environ["CPSP_OUT_DIR"]
    return overrides


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            emit_svg(args.csv, args.svg, x=args.x, y=args.y, group=args.group)
            return 0
        config = parse_config(args.config, _overrides_from_args(args))
        if args.command == "pretrain":
            cmd_pretrain(config)
        elif args.command == "run":
            cmd_run(config)
        elif args.command == "sweep":
            values = [float(v) for v in args.values.replace(",", " ").split()]
            cmd_sweep(config, args.axis, values)
        elif args.command == "ablate":
            cmd_ablate(config)
        return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (RunAbortError, ContractError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
