"""Block-selection loss and held-out perplexity over a K x T grid."""
import argparse

from moei2.experiments import sweep_kt

from _common import emit, load_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--k", default="1,2,3,4")
    p.add_argument("--t", default="1,2,3")
    p.add_argument("--out")
    args = p.parse_args()
    rows = sweep_kt(load_config(args.config), [int(x) for x in args.k.split(",")], [int(x) for x in args.t.split(",")])
    print(f"{'K':>2s} {'T':>2s} {'block loss':>12s} {'calib loss':>11s} {'heldout ppl':>12s} {'sec':>6s}")
    for r in rows:
        print(f"{r['K']:2d} {r['T']:2d} {r['block_loss']:12.5f} {r['calib_loss']:11.5f} {r['heldout_ppl']:12.4f} {r['wall_clock_s']:6.1f}")
    emit(rows, args.out)


if __name__ == "__main__":
    main()
