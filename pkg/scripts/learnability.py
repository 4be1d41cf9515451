#!/usr/bin/env python3
"""Watch the attentional model learn a planted synthetic corpus.

Every ``--every`` epochs prints dev perplexity, dev exact-match accuracy and,
for each feature stream, the mean weight fusion gives that stream on the
planted question whose answer it carries.

    python scripts/learnability.py --epochs 120
"""

from __future__ import annotations

import argparse
import sys
import tempfile
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from avsd import diffcore as dc
from avsd import synth
from avsd.data import FeatureStore, build_vocab, detokenize, load_dialogs
from avsd.model import DialogModel, ModelConfig
from avsd.training import TrainConfig, fit, prepare_corpus


def dev_report(model, params, corpus, vocab):
    hits = total = 0
    weights = defaultdict(list)
    names = model.config.modality_names
    with dc.no_grad():
        for d in corpus:
            for r, ctx in zip(d.rounds, model.encode_rounds(params, d.rounds, d.features)):
                hits += model.generate(params, ctx, beam_size=1, max_len=30).tokens == r.answer
                total += 1
                q = synth.question_by_text(detokenize(vocab.decode(r.question)))
                if q.modality is not None and ctx.beta is not None:
                    weights[q.modality].append(float(ctx.beta[names.index(q.modality)]))
    return hits, total, {q: float(np.mean(v)) for q, v in weights.items()}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--epochs", type=int, default=120)
    ap.add_argument("--every", type=int, default=10)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--batch-size", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--text-only", action="store_true", help="drop the feature streams for comparison")
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        paths = synth.write_corpus(Path(tmp), synth.SynthConfig(seed=args.seed))
        train_split, dev_split = load_dialogs(paths["train"]), load_dialogs(paths["dev"], "validation")
        vocab = build_vocab(train_split.examples)
        modalities = () if args.text_only else synth.SYNTH_MODALITIES
        store = FeatureStore(paths["features"], modalities)
        train = prepare_corpus(train_split, vocab, store)
        dev = prepare_corpus(dev_split, vocab, store)

    d = args.dim
    model = DialogModel(ModelConfig(len(vocab), d, 2, d, 2, d, d, max(1, d // 2), tuple(modalities)))
    rng = np.random.default_rng(args.seed)
    params = model.init_params(rng)
    start = time.perf_counter()

    def on_epoch(rec):
        if rec.epoch % args.every and rec.epoch != args.epochs:
            return
        hits, total, beta = dev_report(model, params, dev, vocab)
        parts = [f"epoch {rec.epoch:4d}", f"train loss {rec.train_loss:.4f}", f"dev ppl {rec.dev_perplexity:.4f}"]
        parts.append(f"dev exact {hits}/{total}")
        parts += [f"beta[{m}] {b:.2f}" for m, b in sorted(beta.items())]
        print("  ".join(parts) + f"  ({time.perf_counter() - start:.0f}s)", flush=True)

    tc = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, seed=args.seed)
    result = fit(model, train, dev, tc, params=params, rng=rng, on_epoch=on_epoch)
    hits, total, _ = dev_report(model, result.params, dev, vocab)
    print(f"selected epoch {result.best_epoch}: dev ppl {result.best_perplexity:.4f}, dev exact {hits}/{total}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
