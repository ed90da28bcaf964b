"""Group-size x bitwidth grid: accuracy before and after low-bit finetuning.

    python3 scripts/group_size_table.py --seeds 0 1 2 --out table1.csv
"""

import argparse
import math
import sys

from gdrq.cli import csv_text
from gdrq.experiments import TABLE1_HEADER, default_dataset, group_size_grid, summarize_grid
from gdrq.train import Schedule


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--bits", type=int, nargs="+", default=[2, 3])
    p.add_argument("--gs", type=int, nargs="+", default=[1, 4, -1])
    p.add_argument("--k-w", type=float, default=2.0, help="Scale-Clip factor during pretraining (inf = none)")
    p.add_argument("--alpha-source", default="scale_clip", choices=["scale_clip", "ql_search"])
    p.add_argument("--pretrain-epochs", type=int, default=30)
    p.add_argument("--finetune-epochs", type=int, default=5)
    p.add_argument("--out", default="-")
    args = p.parse_args(argv)

    rows = []
    for seed in args.seeds:
        data = default_dataset(seed)
        rows += group_size_grid(data, gs_list=args.gs, bits_list=args.bits, seed=seed, k_w=args.k_w,
                                alpha_source=args.alpha_source, skip_first_layer=True,
                                pretrain=Schedule(epochs=args.pretrain_epochs),
                                finetune=Schedule(epochs=args.finetune_epochs, lr=0.01),
                                progress=lambda r: print(*r, file=sys.stderr, flush=True))
    text = csv_text(TABLE1_HEADER, rows)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as f:
            f.write(text)
    for key, ok in summarize_grid(rows).items():
        print(f"seed={key[0]} bits_w={key[1]} ordering before={ok['before']} after={ok['after']}", file=sys.stderr)


if __name__ == "__main__":
    main()
