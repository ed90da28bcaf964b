"""Float pretraining at several Scale-Clip factors: accuracy, per-layer kurtosis,
and first-layer quantized-loss per bitwidth.

    python3 scripts/reshape_study.py --k 2 2.5 3 4 inf --seeds 0 1 2
"""

import argparse
import math

from gdrq.experiments import default_dataset, reshape_study
from gdrq.train import Schedule


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--k", type=float, nargs="+", default=[2.0, 2.5, 3.0, 4.0, math.inf])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=30)
    args = p.parse_args(argv)

    for seed in args.seeds:
        res = reshape_study(default_dataset(seed), args.k, seed, Schedule(epochs=args.epochs))
        print(f"seed {seed}")
        for k, r in res.items():
            kurt = " ".join(f"{n}={v:+.2f}" for n, v in r["kurtosis"].items())
            ql = " ".join(f"{b}:{q:.3f}" for b, q in r["first_layer_ql"].items())
            print(f"  k={k:<4} acc={r['acc']:.1f}  kurtosis {kurt}")
            print(f"         first-layer QL {ql}")


if __name__ == "__main__":
    main()
