#!/usr/bin/env python3
"""Build a frozen context-embedding table file (the pretrained-text-encoder
stand-in) for frozen_external mode.

Rows 0..V are token embeddings (row 0 unused), row V+1 the separator, row
V+2 the no-history embedding. By default rows are random unit-scale
vectors; with --from-predictor they are copied from a trained checkpoint's
vocabulary-predictor embedding table (padded with separator/no-history
rows), which gives the frozen table the trained model's token geometry.

Usage:
    python scripts/make_frozen_context.py --out ctx.lfce --vocab-size 24 --dim 32 --seed 0
    python scripts/make_frozen_context.py --out ctx.lfce --from-predictor model.lfck
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from fnt import checkpoint as ck  # noqa: E402
from fnt import longform as lf  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--vocab-size", type=int, default=24)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--from-predictor", default=None,
                    help="checkpoint whose vocab_pred.embed rows to reuse")
    args = ap.parse_args()

    if args.from_predictor:
        loaded = ck.load_checkpoint(args.from_predictor)
        embed = np.asarray(loaded["params"]["vocab_pred.embed"])
        vocab = loaded["header"]["config"]["vocab_size"]
        rng = np.random.default_rng(args.seed)
        extra = rng.standard_normal((2, embed.shape[1])).astype(np.float32)
        rows = np.concatenate([embed[: vocab + 1], extra], axis=0)
    else:
        rng = np.random.default_rng(args.seed)
        rows = rng.standard_normal((args.vocab_size + 3, args.dim)).astype(np.float32)
    lf.write_context_table(args.out, rows)
    print(f"wrote {rows.shape[0]} x {rows.shape[1]} table to {args.out}")


if __name__ == "__main__":
    main()
