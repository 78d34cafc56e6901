"""Seed-42 end-to-end run: synthesize, pretrain, then evaluate twice.

The second evaluation starts from He initialization instead of the
pretrained checkpoint, which gives the baseline for the margin.

    python3 scripts/desk_run.py --work /tmp/desk
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from protomoco import pipeline
from protomoco.config import validate

DESK = {
    "run.seed": 42,
    "pretrain.epochs": 30,
    "pretrain.batch": 16,
    "pretrain.queue_k": 256,
    "meta.ways": 2,
    "meta.shots": 1,
    "meta.episodes": 200,
    "eval.folds": 10,
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--work", default="desk")
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    work = Path(args.work)
    cfg = validate({**DESK, "run.seed": args.seed, "data.root": str(work / "data"),
                    "run.out": str(work / "pretrained")})
    start = time.perf_counter()
    pipeline.cmd_synth(cfg)
    pre = pipeline.cmd_pretrain(cfg)
    pretrained = pipeline.cmd_eval(cfg, pre.checkpoint)
    baseline = pipeline.cmd_eval(cfg.replace(run__out=str(work / "random")), None)
    seconds = time.perf_counter() - start

    first, last = pre.history[0], pre.history[-1]
    print(f"pretrain loss {first.loss:.4f} -> {last.loss:.4f}, gap {first.gap:.4f} -> {last.gap:.4f}")
    for name in pipeline.METRICS:
        a, b = pretrained.metric(name), baseline.metric(name)
        print(f"{name:<10} pretrained {pipeline.format_value(a):>8}  random {pipeline.format_value(b):>8}")
    margin = pretrained.metric("accuracy") - baseline.metric("accuracy")
    print(f"accuracy margin {margin:+.4f}, wall time {seconds:.0f}s")


if __name__ == "__main__":
    main()
