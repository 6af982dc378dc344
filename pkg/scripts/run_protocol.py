"""Run the full cross-generator experiment and print the result tables.

    python scripts/run_protocol.py --out runs/main --seed 0
"""

import argparse
import logging

from bilora.protocol import ProtocolConfig, run_protocol


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/main")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pretrain-epochs", type=int, default=ProtocolConfig.pretrain_epochs)
    ap.add_argument("--finetune-epochs", type=int, default=ProtocolConfig.finetune_epochs)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = ProtocolConfig(seed=args.seed, pretrain_epochs=args.pretrain_epochs, finetune_epochs=args.finetune_epochs)
    res = run_protocol(args.out, cfg)
    print(res.matrix.to_markdown())
    print(f"best diagonal adapter: {res.best_family}\n")
    print(res.degradation.to_markdown())
    print(f"total {res.seconds:.0f}s, outputs in {args.out}")


if __name__ == "__main__":
    main()
