"""Overfit a small synthetic world end to end through the CLI and report training micro-F1.

    python scripts/overfit_run.py --out-dir /tmp/overfit --knowledge-positions herb
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from herbgen.cli import main as herbgen


def run(out: Path, args: argparse.Namespace) -> float:
    world, pre, fine, gen, ev = (out / d for d in ("world", "pretrain", "finetune", "generate", "evaluate"))
    model = ["--hidden-size", str(args.hidden_size), "--num-layers", str(args.num_layers),
             "--num-heads", "2", "--max-len", "128", "--lr", str(args.lr), "--seed", str(args.seed)]
    steps = [
        ["synth", "--num-examples", str(args.num_examples), "--num-anchors", str(args.num_anchors),
         "--seed", str(args.seed), "--out-dir", str(world)],
        ["pretrain", "--corpus", str(world / "corpus.txt"), "--vocab", str(world / "vocab.txt"),
         "--herbs", str(world / "herbs.txt"), "--epochs", str(args.pretrain_epochs), "--out-dir", str(pre), *model],
        ["finetune", "--train", str(world / "train.jsonl"), "--vocab", str(world / "vocab.txt"),
         "--herbs", str(world / "herbs.txt"), "--kg", str(world / "kg.tsv"), "--init", str(pre / "pretrain_best.ckpt"),
         "--epochs", str(args.finetune_epochs), "--knowledge-positions", args.knowledge_positions,
         "--out-dir", str(fine), *model],
        ["generate", "--checkpoint", str(fine / "finetune_last.ckpt"), "--input", str(world / "train.jsonl"),
         "--kg", str(world / "kg.tsv"), "--strategy", "greedy", "--out-dir", str(gen)],
        ["evaluate", "--generations", str(gen / "generations.jsonl"), "--reference", str(world / "train.jsonl"),
         "--out-dir", str(ev)],
    ]
    for argv in steps:
        code = herbgen(["--log-level", "WARNING", *argv])
        if code:
            sys.exit(f"herbgen {argv[0]} exited with {code}")
    return json.loads((ev / "report.json").read_text(encoding="utf-8"))["micro"]["f1"]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", type=Path, required=True)
    ap.add_argument("--num-examples", type=int, default=32)
    ap.add_argument("--num-anchors", type=int, default=16)
    ap.add_argument("--hidden-size", type=int, default=32)
    ap.add_argument("--num-layers", type=int, default=2)
    ap.add_argument("--pretrain-epochs", type=int, default=50)
    ap.add_argument("--finetune-epochs", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--knowledge-positions", choices=("sequential", "herb"), default="herb")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    start = time.time()
    f1 = run(args.out_dir, args)
    print(f"training micro-F1 {f1:.4f} ({time.time() - start:.0f}s)")


if __name__ == "__main__":
    main()
