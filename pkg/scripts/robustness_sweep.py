"""Train vanilla and GroupNL toy CNNs over several seeds and tabulate corruption robustness."""
import argparse

import numpy as np

from groupnl.cost import render_table
from groupnl.toytrain import Corruption, TrainConfig, generate_dataset, mean_over_kinds, robustness, train
from groupnl.zoo import build_model, instantiate

SEVERITIES = (0, 1, 2, 3, 4, 5)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--variants", nargs="+", default=["vanilla", "groupnl"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--r", type=int, default=2)
    args = ap.parse_args()
    rows = []
    for variant in args.variants:
        curves = []
        for seed in args.seeds:
            ds = generate_dataset(seed=seed)
            model = instantiate(build_model("tinycnn", variant, r=args.r, seed=seed), init_seed=seed)
            log = train(model, ds, TrainConfig(epochs=args.epochs, seed=seed))
            table = robustness(log.model, ds)
            curves.append(mean_over_kinds(table))
            for kind in Corruption:
                rows.append({"variant": variant, "seed": seed, "kind": kind.value, **dict(zip(map(str, SEVERITIES), np.round(table[kind.value], 3)))})
        mean = np.mean(curves, axis=0)
        rows.append({"variant": variant, "seed": "mean", "kind": "all", **dict(zip(map(str, SEVERITIES), np.round(mean, 3)))})
    print(render_table(rows, ["variant", "seed", "kind", *map(str, SEVERITIES)]))


if __name__ == "__main__":
    main()
