"""Teacher -> pruned -> compressed -> fine-tuned over several seeds, with the
held-out perplexity of each stage."""
import argparse
from pathlib import Path

import numpy as np

from moei2.experiments import seeded_config
from moei2.pipeline import run_pipeline

from _common import emit, load_config

STAGES = ("original", "pruned", "compressed", "finetuned")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out-dir", default="runs/full")
    args = p.parse_args()
    base = load_config(args.config)
    rows = []
    for seed in range(args.seeds):
        rep = run_pipeline(seeded_config(base, seed), Path(args.out_dir) / f"seed{seed}")
        rows.append({k: rep["stages"][k]["heldout_ppl"] for k in STAGES if k in rep["stages"]})
        print(f"seed {seed}: " + "  ".join(f"{k} {v:.3f}" for k, v in rows[-1].items()))
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    print("mean:   " + "  ".join(f"{k} {v:.3f}" for k, v in mean.items()))
    emit({"rows": rows, "mean": mean}, Path(args.out_dir) / "summary.json")


if __name__ == "__main__":
    main()
