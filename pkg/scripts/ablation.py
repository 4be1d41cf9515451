#!/usr/bin/env python3
"""Train and score the input-feature ablation grid on a corpus.

Each variant is a plain RunConfig override, run through the same train and
evaluate code paths as the command line. Without ``--corpus`` a planted
synthetic corpus is generated first. The synthetic corpus has no optical-flow
stream, so "I3D" means ``i3d_rgb`` unless ``--i3d`` says otherwise.

    python scripts/ablation.py --out runs/ablation --epochs 40
"""

from __future__ import annotations

import argparse
import io
import re
import sys
from pathlib import Path

from avsd import cli, synth
from avsd.data import load_dialogs


def variants(i3d: str) -> list[tuple[str, dict[str, str]]]:
    both = f"{i3d},vggish"
    return [
        ("QA", {}),
        ("QA + captions", {"use_captions": "true"}),
        ("QA + I3D (naive)", {"modalities": i3d, "fusion": "naive"}),
        ("QA + I3D (attentional)", {"modalities": i3d, "fusion": "attentional"}),
        ("QA + I3D + VGGish (naive)", {"modalities": both, "fusion": "naive"}),
        ("QA + I3D + VGGish (attentional)", {"modalities": both, "fusion": "attentional"}),
    ]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--corpus", type=Path, help="directory with train/dev/test.json and features/")
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--config", type=Path, help="base config file shared by every variant")
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--dim", type=int, default=32, help="embedding, LSTM and projection width")
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--batch-size", type=int, default=2)
    ap.add_argument("--i3d", default="i3d_rgb", help="modality list standing in for I3D, e.g. i3d_rgb,i3d_flow")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    corpus = args.corpus
    if corpus is None:
        corpus = args.out / "corpus"
        synth.write_corpus(corpus, synth.SynthConfig(seed=args.seed))
    base = cli.load_config_file(args.config) if args.config else {}
    base.update(
        {
            "train": str(corpus / "train.json"),
            "dev": str(corpus / "dev.json"),
            "test": str(corpus / "test.json"),
            "features_dir": str(corpus / "features"),
            "embed_dim": str(args.dim),
            "enc_cells": str(args.dim),
            "dec_cells": str(args.dim),
            "proj_dim": str(args.dim),
            "att_dim": str(max(1, args.dim // 2)),
            "max_epochs": str(args.epochs),
            "learning_rate": str(args.lr),
            "batch_size": str(args.batch_size),
            "seed": str(args.seed),
        }
    )
    test = load_dialogs(corpus / "test.json", "test")

    rows = []
    for name, extra in variants(args.i3d):
        out = args.out / re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")
        cfg = cli.RunConfig.from_settings(dict(base, **extra, out=str(out)))
        archive = cli.cmd_train(cfg, io.StringIO())
        lines = (out / "epochs.log").read_text().splitlines()
        ppl = min(float(ln.rsplit("dev_perplexity=", 1)[1]) for ln in lines)
        _, report = cli.cmd_evaluate(cli.open_model(archive, cfg.settings()), test)
        rows.append((name, ppl, report))
        print(f"{name:<34} best dev perplexity {ppl:.4f}", file=sys.stderr)

    cols = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider")
    print(f"{'input features':<34} {'dev ppl':>8} " + " ".join(f"{c:>8}" for c in cols))
    for name, ppl, report in rows:
        d = report.to_dict()
        print(f"{name:<34} {ppl:8.4f} " + " ".join(f"{d[c]:8.4f}" for c in cols))
    return 0


if __name__ == "__main__":
    sys.exit(main())
