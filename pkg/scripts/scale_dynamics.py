"""Track the adaptive scale and margin through training and plot them.

    python3 scripts/scale_dynamics.py --rho 0.02 --out results/scale
"""

import argparse
import csv
import os

from cfcd.data import SyntheticSpec, generate
from cfcd.experiments import scale_trend
from cfcd.plots import lines_svg
from cfcd.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rho", type=float, nargs="+", default=[0.02])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--T", type=int, default=30)
    ap.add_argument("--E", type=int, default=20)
    ap.add_argument("--out", default="results/scale")
    args = ap.parse_args()

    g = generate(SyntheticSpec(seed=args.seed))
    os.makedirs(args.out, exist_ok=True)
    per_epoch = {}
    for rho in args.rho:
        cfg = TrainConfig(T=args.T, E=args.E, rho=rho, seed=args.seed, validate=False)
        log = train(g.database, cfg).log
        log.write_steps_csv(os.path.join(args.out, f"steps_rho{rho:g}.csv"))
        s, share, rises = scale_trend(log, phase=1)
        print(f"rho {rho:g}: phase-1 s {s[0]:.2f} -> {s[-1]:.2f}, non-decreasing in {100 * share:.0f}% of epochs")
        per_epoch[f"s rho={rho:g}"] = log.epoch_mean("s")
        per_epoch[f"m rho={rho:g}"] = log.epoch_mean("m")

    epochs = list(range(1, args.T + 1))
    with open(os.path.join(args.out, "scale.svg"), "w") as fh:
        fh.write(lines_svg(epochs, {k: v for k, v in per_epoch.items() if k.startswith("s")},
                           "mean scale per epoch", "epoch", "s"))
    with open(os.path.join(args.out, "margin.svg"), "w") as fh:
        fh.write(lines_svg(epochs, {k: v for k, v in per_epoch.items() if k.startswith("m")},
                           "mean margin per epoch", "epoch", "m"))
    with open(os.path.join(args.out, "per_epoch.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *per_epoch])
        for i, e in enumerate(epochs):
            w.writerow([e, *(f"{v[i]:.6f}" for v in per_epoch.values())])


if __name__ == "__main__":
    main()
