"""Mean combination fitness and pruned calibration perplexity for the genetic
search and the TopLoss / Random baselines."""
import argparse
import dataclasses

from moei2.experiments import search_ablation

from _common import emit, load_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--pretrain-steps", type=int, default=150)
    p.add_argument("--methods", default="genetic,genetic+kt,toploss,random")
    p.add_argument("--out")
    args = p.parse_args()
    cfg = load_config(args.config)
    cfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, steps=args.pretrain_steps))
    res = search_ablation(cfg, range(args.seeds), tuple(args.methods.split(",")))
    print(f"{'method':12s} {'fitness':>10s} {'calib ppl':>10s}")
    for method, s in res["summary"].items():
        print(f"{method:12s} {s['mean_fitness']:10.4f} {s['mean_calib_ppl']:10.4f}")
    emit(res, args.out)


if __name__ == "__main__":
    main()
