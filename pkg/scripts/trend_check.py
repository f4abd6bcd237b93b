#!/usr/bin/env python3
"""Paired logit-exchange vs isolated-training runs on image data with
heterogeneous client architectures, repeated over several seeds.

By default trains on the built-in deterministic image surrogate; pass
--mnist-dir to use real MNIST IDX files (train-images-idx3-ubyte and
train-labels-idx1-ubyte) instead.

Usage:
    python scripts/trend_check.py --seeds 101 202 303 --rounds 300
"""
from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from fedhe_sim.data import gen_cluster_images, write_idx
from fedhe_sim.nn import ModelSpec
from fedhe_sim.orchestrator import DatasetConfig, ExperimentConfig, run_fedhe, run_private
from fedhe_sim.protocol import Method

CLIENT_SPECS = [
    ModelSpec((784, 32, 64, 10)),
    ModelSpec((784, 64, 64, 10)),
    ModelSpec((784, 16, 32, 64, 10)),
    ModelSpec((784, 32, 32, 32, 10)),
    ModelSpec((784, 32, 32, 50, 10)),
]


def data_files(args) -> tuple[str, str]:
    if args.mnist_dir:
        base = Path(args.mnist_dir)
        return str(base / "train-images-idx3-ubyte"), str(base / "train-labels-idx1-ubyte")
    tmp = Path(tempfile.mkdtemp(prefix="fedhe-trend-"))
    images, labels = gen_cluster_images(10, 28, args.pool_per_class, seed=args.data_seed)
    img, lab = tmp / "images-idx3-ubyte", tmp / "labels-idx1-ubyte"
    write_idx(images, labels, img, lab)
    print(f"generated surrogate pool of {len(labels)} images in {tmp}")
    return str(img), str(lab)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[101, 202, 303])
    parser.add_argument("--rounds", type=int, default=300)
    parser.add_argument("--limit", type=int, default=10_000)
    parser.add_argument("--pool-per-class", type=int, default=1400)
    parser.add_argument("--data-seed", type=int, default=20)
    parser.add_argument("--alpha", type=float, default=1.0)
    parser.add_argument("--mnist-dir", default=None)
    args = parser.parse_args()

    images, labels = data_files(args)

    def config(method: str, seed: int) -> ExperimentConfig:
        return ExperimentConfig(
            method=Method(method),
            seed=seed,
            rounds=args.rounds,
            client_specs=list(CLIENT_SPECS),
            client_speeds=[1.0] * len(CLIENT_SPECS),
            dataset=DatasetConfig(
                kind="idx", class_count=10, input_dim=784,
                images=images, labels=labels, test_fraction=0.2, limit=args.limit,
            ),
            batch_size=32,
            inner_epochs=3,
            alpha=args.alpha,
            lr=0.001,
            eval_every=100.0,
        )

    wins = 0
    for seed in args.seeds:
        exchange = run_fedhe(config("fedhe", seed))
        isolated = run_private(config("private", seed))
        diff = exchange.final_mean_accuracy - isolated.final_mean_accuracy
        wins += diff >= 0
        print(
            f"seed {seed}: logit-exchange {exchange.final_mean_accuracy:.4f}  "
            f"isolated {isolated.final_mean_accuracy:.4f}  diff {diff:+.4f}"
        )
    print(f"\nlogit exchange matched or beat isolated training on {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
