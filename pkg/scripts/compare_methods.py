#!/usr/bin/env python3
"""Run all four methods on one shared synthetic dataset and print a
side-by-side table of final accuracy and communication cost.

Usage:
    python scripts/compare_methods.py --rounds 120 --seed 7 --out runs/compare
"""
from __future__ import annotations

import argparse
from pathlib import Path

from fedhe_sim.nn import ModelSpec
from fedhe_sim.orchestrator import (
    DatasetConfig,
    ExperimentConfig,
    metrics_to_csv,
    run_experiment,
    tabulated_cost,
)
from fedhe_sim.protocol import Method, reduced_rate


def build_config(method: str, args) -> ExperimentConfig:
    spec = ModelSpec((args.input_dim, 16, 16, args.classes), dropout_rate=0.1)
    # async methods count one completion per round, so give them
    # rounds * clients events to equalize per-client work with the sync methods
    rounds = args.rounds * (args.clients if method in ("fedhe", "private") else 1)
    return ExperimentConfig(
        method=Method(method),
        seed=args.seed,
        rounds=rounds,
        client_specs=[spec] * args.clients,
        client_speeds=[1.0] * args.clients,
        dataset=DatasetConfig(
            kind="synthetic",
            class_count=args.classes,
            input_dim=args.input_dim,
            n_per_class=args.n_per_class,
        ),
        batch_size=16,
        inner_epochs=3,
        alpha=1.0,
        lr=0.001,
        eval_every=max(1.0, args.rounds / 8),
        n_public=10,
    )


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--clients", type=int, default=5)
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--input-dim", type=int, default=16)
    parser.add_argument("--n-per-class", type=int, default=200)
    parser.add_argument("--rounds", type=int, default=120)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--out", type=Path, default=Path("runs/compare"))
    args = parser.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    results = {}
    for method in ("fedavg", "fedhe", "fedmd", "private"):
        cfg = build_config(method, args)
        result = run_experiment(cfg)
        (args.out / f"{method}.csv").write_text(metrics_to_csv(result.rows, cfg.num_clients))
        results[method] = (result, tabulated_cost(cfg))
        print(f"ran {method}: final mean acc {result.final_mean_accuracy:.4f}")

    baseline = results["fedavg"][1]
    print()
    print(f"{'method':<10} {'final_acc':>10} {'floats/round':>14} {'reduced_rate':>13}")
    for method, (result, cost) in results.items():
        rate = reduced_rate(cost, baseline)
        rate_text = ">99.9%" if rate > 0.999 else f"{100 * rate:.1f}%"
        print(f"{method:<10} {result.final_mean_accuracy:>10.4f} {cost:>14} {rate_text:>13}")
    print(f"\nmetrics CSVs written to {args.out}/")


if __name__ == "__main__":
    main()
