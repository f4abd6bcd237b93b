"""Command-line front end: run experiments, compare runs, generate configs.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import dump_toml, load_config, template_config
from .nn import param_count
from .orchestrator import ConfigError, RunResult, metrics_to_csv, run_experiment, tabulated_cost
from .protocol import Method, reduced_rate

ARTIFACT_SCHEMA_VERSION = 1


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_manifest(out_dir: Path, raw_config: dict) -> Path:
    manifest = {
        "schema_version": ARTIFACT_SCHEMA_VERSION,
        "method": raw_config["method"],
        "seed": raw_config["seed"],
        "config": raw_config,
        "artifacts": {"metrics_csv": "metrics.csv", "summary": "summary.json"},
    }
    path = out_dir / "manifest.json"
    _write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_summary(out_dir: Path, cfg, result: RunResult) -> dict:
    # with homogeneous specs the weight-exchange cost is known, so the saving
    # relative to it can be reported without a separate fedavg run
    reduced = None
    if all(spec == cfg.client_specs[0] for spec in cfg.client_specs):
        reduced = reduced_rate(tabulated_cost(cfg), param_count(cfg.client_specs[0]))
    summary = {
        "schema_version": ARTIFACT_SCHEMA_VERSION,
        "method": cfg.method.value,
        "seed": cfg.seed,
        "clients": cfg.num_clients,
        "class_count": cfg.dataset.class_count,
        "rounds": cfg.rounds,
        "final_accuracies": result.final_accuracies,
        "final_mean_accuracy": result.final_mean_accuracy,
        "per_round_floats": tabulated_cost(cfg),
        "total_floats": result.ledger.total(),
        "reduced_rate_vs_fedavg": reduced,
    }
    _write_atomic(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_run(args) -> int:
    try:
        cfg, raw = load_config(args.config, args.set or [])
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1

    out_dir = Path(args.out or os.environ.get("FEDHE_OUT", "runs"))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = _write_manifest(out_dir, raw)
        result = run_experiment(cfg)
        _write_atomic(out_dir / "metrics.csv", metrics_to_csv(result.rows, cfg.num_clients))
        summary = _write_summary(out_dir, cfg, result)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2

    accs = ",".join(f"{a:.3f}" for a in summary["final_accuracies"])
    rate = summary["reduced_rate_vs_fedavg"]
    rate_part = f" reduced_vs_fedavg={_format_rate(rate)}" if rate is not None else ""
    print(
        f"{cfg.method.value}: rounds={cfg.rounds} "
        f"final_acc=[{accs}] mean={summary['final_mean_accuracy']:.4f} "
        f"floats/round/client={summary['per_round_floats']} "
        f"total_floats={summary['total_floats']}{rate_part} -> {manifest_path}"
    )
    return 0


def _format_rate(rate: float) -> str:
    return ">99.9%" if rate > 0.999 else f"{100.0 * rate:.1f}%"


def _load_manifest(path: Path) -> tuple[dict, dict]:
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    version = manifest.get("schema_version")
    if version != ARTIFACT_SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: unknown artifact schema version {version!r} "
            f"(this build reads version {ARTIFACT_SCHEMA_VERSION})"
        )
    summary_path = path.parent / manifest["artifacts"]["summary"]
    with open(summary_path, "r", encoding="utf-8") as f:
        summary = json.load(f)
    if summary.get("schema_version") != ARTIFACT_SCHEMA_VERSION:
        raise ConfigError(f"{summary_path}: unknown summary schema version")
    return manifest, summary


def cmd_compare(args) -> int:
    try:
        if len(args.manifests) < 2:
            raise ConfigError("compare needs at least two manifests")
        loaded = [_load_manifest(Path(p)) for p in args.manifests]

        datasets = [m["config"]["dataset"] for m, _ in loaded]
        if any(d != datasets[0] for d in datasets[1:]):
            raise ConfigError("manifests were produced on different datasets; cannot compare")

        baseline = args.fedavg_floats
        if baseline is None:
            for _, summary in loaded:
                if summary["method"] == Method.FEDAVG.value:
                    baseline = summary["per_round_floats"]
                    break
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (OSError, KeyError, json.JSONDecodeError) as e:
        print(f"error reading manifests: {type(e).__name__}: {e}", file=sys.stderr)
        return 2

    header = f"{'method':<10} {'final_mean_acc':>14} {'floats/round':>14} {'reduced_rate':>13}"
    print(header)
    print("-" * len(header))
    for _, summary in loaded:
        cost = summary["per_round_floats"]
        if baseline:
            rate = _format_rate(reduced_rate(cost, baseline))
        else:
            rate = "-"
        print(
            f"{summary['method']:<10} {summary['final_mean_accuracy']:>14.4f} "
            f"{cost:>14} {rate:>13}"
        )
    return 0


def cmd_gen_config(args) -> int:
    try:
        raw = template_config(args.template)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    text = dump_toml(raw)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedhe-sim",
        description="Deterministic simulator of logit-exchange federated learning "
        "and its baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a TOML config")
    p_run.add_argument("--config", required=True, help="path to the experiment config")
    p_run.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a top-level or dataset.* config field (repeatable)",
    )
    p_run.add_argument(
        "--out",
        help="output directory for manifest/metrics/summary "
        "(default: $FEDHE_OUT or ./runs)",
    )
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="tabulate two or more finished runs")
    p_cmp.add_argument("manifests", nargs="+", help="manifest.json paths")
    p_cmp.add_argument(
        "--fedavg-floats",
        type=int,
        help="weight-exchange cost to compute reduced rates against "
        "(defaults to a fedavg manifest's cost when present)",
    )
    p_cmp.set_defaults(func=cmd_compare)

    p_gen = sub.add_parser("gen-config", help="emit a template config")
    p_gen.add_argument(
        "template", help="one of: homogeneous, heterogeneous, synthetic-smoke"
    )
    p_gen.add_argument("--out", help="write to this file instead of stdout")
    p_gen.set_defaults(func=cmd_gen_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
