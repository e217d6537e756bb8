"""Genetic search against exhaustive enumeration on every layer of seeded toy models."""
import argparse

from moei2.experiments import oracle_check
from moei2.model import random_init

from _common import emit, load_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--n-remove", type=int, default=2)
    p.add_argument("--pretrained", action="store_true", help="pretrain each teacher instead of using random init")
    p.add_argument("--out")
    args = p.parse_args()
    cfg = load_config(args.config)
    kwargs = {} if args.pretrained else {"model_fn": lambda c: random_init(c.model)}
    res = oracle_check(cfg, range(args.seeds), args.n_remove, **kwargs)
    for seed, rate in res["per_seed_hit_rate"].items():
        print(f"seed {seed:3d}  layers at optimum {rate:6.1%}")
    print(f"{res['seeds_all_hit']}/{res['n_seeds']} seeds fully optimal, max relative gap {res['max_relative_gap']:.3e}, {res['wall_clock_s']:.1f}s")
    emit(res, args.out)


if __name__ == "__main__":
    main()
