"""Command-line entry points: gen-data, extract, train-central, fed-run,
report.

Exit codes: 0 success, 2 configuration error, 3 protocol abort.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from . import harness
from .explorer import Budget, Strategy, explore, parse_model
from .fedproto import AggregationMode
from .scdg import ParseError, build_scdg, serialize_scdg, serialize_traces

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3


class ConfigError(Exception):
    pass


_CONFIG_KEYS = {
    "families": int, "per_family": int, "scheme": str, "n_clients": int,
    "rounds": int, "epochs": int, "seed": int, "mode": str, "hidden": int,
    "max_paths": int, "max_path_len": int, "noise_rate": float, "alpha": float,
    "he_enabled": str, "security_param": int, "fraction_bits": int,
    "transport": str,
}


def parse_config(text: str) -> harness.ExperimentConfig:
    """Key-value run config, one "key = value" per line, # comments."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc

    transport = values.pop("transport", "inproc")
    if transport != "inproc":
        raise ConfigError(f"unsupported transport {transport!r}: only inproc "
                          "orchestration is implemented")
    if "mode" in values:
        try:
            values["mode"] = AggregationMode(values["mode"])
        except ValueError as exc:
            raise ConfigError(f"mode must be full or partly: {exc}") from exc
    if "he_enabled" in values:
        flag = values["he_enabled"].lower()
        if flag not in ("true", "false", "on", "off", "1", "0"):
            raise ConfigError(f"he_enabled must be boolean, got {flag!r}")
        values["he_enabled"] = flag in ("true", "on", "1")
    if values.get("scheme") not in (None, "homogeneous", "inhomogeneous"):
        raise ConfigError(f"scheme must be homogeneous or inhomogeneous, "
                          f"got {values['scheme']!r}")
    try:
        return replace(harness.ExperimentConfig(), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _load_config(path: str) -> harness.ExperimentConfig:
    try:
        return parse_config(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _parse_budget(text: str) -> Budget:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"budget must be states,length,traces, got {text!r}")
    try:
        return Budget(*(int(p) for p in parts))
    except ValueError as exc:
        raise ConfigError(f"bad budget {text!r}: {exc}") from exc


def _write_out(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen_data(args) -> int:
    data = harness.gen_synthetic_dataset(
        args.families, args.per_family, args.seed, args.noise,
        Strategy(args.strategy))
    blocks = [f"label {item.label}\n{serialize_scdg(item.graph)}" for item in data]
    _write_out("\n".join(blocks), args.out)
    return EXIT_OK


def cmd_extract(args) -> int:
    model = parse_model(Path(args.model).read_text())
    budget = _parse_budget(args.budget)
    traces = explore(model, Strategy(args.strategy), budget)
    if args.traces:
        _write_out(serialize_traces(traces), args.out)
    else:
        _write_out(serialize_scdg(build_scdg(traces)), args.out)
    return EXIT_OK


def cmd_train_central(args) -> int:
    cfg = _load_config(args.config)
    acc = harness.run_centralized(cfg)
    print(f"centralized accuracy {acc:.6f}")
    return EXIT_OK


def cmd_fed_run(args) -> int:
    cfg = _load_config(args.config)
    baseline = harness.run_centralized(cfg) if args.baseline else None
    _, csv_text, records, _ = harness.run_federated(cfg, baseline=baseline)
    _write_out(csv_text, args.out)
    if any(r.aborted for r in records):
        print("protocol aborted in at least one round", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        csv_text = Path(args.csv).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.csv}: {exc}") from exc
    summary, table = harness.report(csv_text)
    _write_out(table, args.out)
    for client in sorted(summary.curves):
        print(f"client {client}: final {summary.final(client):.4f} "
              f"peak {summary.peak(client):.4f}")
    if summary.baseline is not None:
        print(f"centralized baseline: {summary.baseline:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedscdg",
        description="Federated malware classification over syscall "
                    "dependency graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labelled synthetic dataset")
    p.add_argument("--families", type=int, default=5)
    p.add_argument("--per-family", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="cdfs")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract", help="explore a program model into a graph")
    p.add_argument("--model", required=True)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], required=True)
    p.add_argument("--budget", required=True, metavar="STATES,LENGTH,TRACES")
    p.add_argument("--traces", action="store_true",
                   help="emit raw traces instead of the graph")
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-central", help="train one model on pooled data")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train_central)

    p = sub.add_parser("fed-run", help="run the federated protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--inproc", action="store_true", default=True,
                   help="run all parties in-process (default)")
    p.add_argument("--baseline", action="store_true",
                   help="also train the centralized baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fed_run)

    p = sub.add_parser("report", help="summarize a run CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
