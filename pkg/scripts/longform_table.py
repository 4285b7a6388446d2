#!/usr/bin/env python3
"""Train the three model variants on a synthetic session corpus and print
the gt/hyp WER comparison table (the long-form gain experiment).

Usage:
    python scripts/longform_table.py --out /tmp/longform_run [--steps 2500]
        [--corpus-seed 11] [--model-seed 7] [--beam 4] [--control]
"""

import argparse
import json
import os
import sys
import time

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from fnt import corpus as cp  # noqa: E402
from fnt import model as md  # noqa: E402
from fnt import training as tr  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, default=2500)
    ap.add_argument("--corpus-seed", type=int, default=11)
    ap.add_argument("--model-seed", type=int, default=7)
    ap.add_argument("--beam", type=int, default=4)
    ap.add_argument("--control", action="store_true",
                    help="use the control corpus (no history signal)")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    spec_kw = {"seed": args.corpus_seed}
    if args.control:
        spec_kw.update(entity_rate=0.0, confusable_pairs=0, entity_tokens=0)
    spec = cp.CorpusSpec(**spec_kw)
    corpus_dir = os.path.join(args.out, "corpus")
    cp.gen_corpus(spec, corpus_dir)
    items = tr.build_train_items(cp.load_split(corpus_dir, "train"))
    test = cp.load_split(corpus_dir, "test")
    print(f"corpus: {len(items)} train utterances, {len(test)} test utterances")

    variants = [
        ("mfnt", dict(sentence_mode="off", token_level=False), 0, 0),
        ("mfnt+text-history", dict(sentence_mode="both", token_level=True), 2, 0),
        ("mfnt+text+speech-history", dict(sentence_mode="both", token_level=True), 2, 2),
    ]
    rows = []
    for name, flags, n_text, n_speech in variants:
        t0 = time.time()
        cfg = md.ModelConfig(vocab_size=spec.vocab_size, feature_dim=spec.feature_dim, **flags)
        model = md.build_model(cfg, args.model_seed)
        tc = tr.TrainConfig(seed=args.model_seed, steps=args.steps, batch_size=8, lr=2e-3,
                            warmup_steps=200, augment=True, n_text=n_text, n_speech=n_speech)
        metrics = tr.MetricsLog(os.path.join(args.out, f"{name}.train.jsonl"))
        tr.train(model, items, tc, metrics=metrics,
                 ckpt_path=os.path.join(args.out, f"{name}.lfck"))
        row = {"model": name, "train_s": round(time.time() - t0, 1)}
        for mode in ("gt", "hyp"):
            rep, _, _ = tr.evaluate_wer(model, test, mode=mode, n_text=n_text,
                                        n_speech=n_speech, beam=args.beam)
            row[f"{mode}_wer"] = round(rep.wer, 4)
        rows.append(row)
        print(json.dumps(row))

    print("\nmodel                         gt WER   hyp WER")
    for row in rows:
        print(f"{row['model']:28s}  {row['gt_wer']:.4f}   {row['hyp_wer']:.4f}")
    base = rows[0]["gt_wer"]
    for row in rows[1:]:
        print(f"{row['model']}: {1 - row['gt_wer'] / base:+.1%} relative vs mfnt (gt)")
    with open(os.path.join(args.out, "table.json"), "w") as f:
        json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
