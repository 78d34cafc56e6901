"""Compare 1-shot and 4-shot accuracy over several seeds.

Each seed gets its own synthetic set and pretraining run; both shot counts
are then evaluated from the same checkpoint.

    python3 scripts/shot_scaling.py --work /tmp/shots --seeds 0 1 2
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from protomoco import pipeline
from protomoco.config import validate

from desk_run import DESK


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--work", default="shots")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    ap.add_argument("--shots", type=int, nargs="+", default=[1, 4])
    args = ap.parse_args()
    work = Path(args.work)
    table = {c: [] for c in args.shots}
    for seed in args.seeds:
        cfg = validate({**DESK, "run.seed": seed, "data.root": str(work / f"data{seed}"),
                        "run.out": str(work / f"s{seed}")})
        pipeline.cmd_synth(cfg)
        ckpt = pipeline.cmd_pretrain(cfg).checkpoint
        row = []
        for c in args.shots:
            acc = pipeline.cmd_eval(cfg.replace(meta__shots=c, run__out=str(work / f"s{seed}-c{c}")),
                                    ckpt).metric("accuracy")
            table[c].append(acc)
            row.append(f"C={c} {acc:.4f}")
        print(f"seed {seed}: " + "  ".join(row), flush=True)
    print("mean:   " + "  ".join(f"C={c} {np.mean(v):.4f}" for c, v in table.items()))


if __name__ == "__main__":
    main()
