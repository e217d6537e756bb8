"""Uniform vs importance-driven pruning budgets and decomposition ranks."""
import argparse

from moei2.experiments import balance_comparison

from _common import emit, load_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--out")
    args = p.parse_args()
    res = balance_comparison(load_config(args.config))
    for r in res["budgets"]:
        print(f"budget {r['budget_mode']:20s} counts {r['per_layer_counts']}  calib loss {r['calib_loss']:.5f}")
    for r in res["ranks"]:
        print(f"ranks  {r['rank_mode']:20s} total rank {r['total_rank']}  expert params {r['expert_params']}  calib loss {r['calib_loss']:.5f}")
    emit(res, args.out)


if __name__ == "__main__":
    main()
