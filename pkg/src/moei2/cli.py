"""Command-line entry point: ``python -m moei2 <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, MoEI2Error
from .importance import ImportanceReport
from .model import expert_param_count, lm_loss, total_param_count
from .pipeline import (
    PipelineConfig,
    data,
    evaluate_perplexity,
    pretrain_teacher,
    run_pipeline,
    stage_decompose,
    stage_finetune,
    stage_importance,
    stage_prune,
)


def _dump(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(args.config) if args.config else PipelineConfig().validate()


def cmd_init(args):
    cfg = PipelineConfig()
    if args.out:
        cfg.save(args.out)
    else:
        _dump(cfg.to_dict(), None)


def cmd_pretrain(args):
    cfg = _config(args)
    model, trace = pretrain_teacher(cfg.model, cfg.pretrain, cfg.chain_seed)
    save_checkpoint(model, args.out)
    _dump({"initial_loss": trace[0] if trace else None, "final_loss": trace[-1] if trace else None}, None)


def cmd_analyze(args):
    cfg = _config(args)
    report = stage_importance(cfg, load_checkpoint(args.model))
    _dump(report.to_dict(), args.out)


def cmd_prune(args):
    cfg = _config(args)
    model = load_checkpoint(args.model)
    if args.importance:
        report = ImportanceReport.from_dict(json.loads(Path(args.importance).read_text()))
    else:
        report = stage_importance(cfg, model)
    pruned, budget, plan = stage_prune(cfg, model, report)
    save_checkpoint(pruned, args.out)
    _dump({"budget": budget.per_layer_counts, "plan": plan.to_dict()}, args.plan_out)


def cmd_decompose(args):
    cfg = _config(args)
    compressed, _, plan, table = stage_decompose(cfg, load_checkpoint(args.model))
    save_checkpoint(compressed, args.out)
    _dump({"rank_plan": plan.to_dict(), "reconstruction": table}, args.plan_out)


def cmd_finetune(args):
    cfg = _config(args)
    result = stage_finetune(cfg, load_checkpoint(args.model), load_checkpoint(args.teacher))
    save_checkpoint(result.model, args.out)
    _dump({"initial_loss": result.initial_loss, "epoch_losses": result.epoch_losses}, None)


def cmd_eval(args):
    cfg = _config(args)
    model = load_checkpoint(args.model)
    spec = getattr(cfg, args.data)
    ds = data(cfg, spec)
    _dump(
        {
            "data": args.data,
            "loss": lm_loss(model, ds),
            "perplexity": evaluate_perplexity(model, ds),
            "total_params": total_param_count(model),
            "expert_params": expert_param_count(model),
        },
        None,
    )


def cmd_run(args):
    cfg = _config(args)
    report = run_pipeline(cfg, args.out_dir)
    summary = {k: {"heldout_ppl": v["heldout_ppl"], "expert_params": v["expert_params"]} for k, v in report["stages"].items() if "heldout_ppl" in v}
    _dump(summary, None)


def cmd_oracle_check(args):
    cfg = _config(args)
    result = experiments.oracle_check(cfg, range(args.seeds), args.n_remove)
    _dump(result if args.full else {k: v for k, v in result.items() if k != "rows"}, args.out)


def cmd_sweep_kt(args):
    cfg = _config(args)
    ks = [int(x) for x in args.k.split(",")]
    ts = [int(x) for x in args.t.split(",")]
    _dump(experiments.sweep_kt(cfg, ks, ts), args.out)


def cmd_compare_balance(args):
    _dump(experiments.balance_comparison(_config(args)), args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moei2", description="Two-stage MoE compression on a toy model.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        if name != "init":
            sp.add_argument("--config", help="pipeline config JSON (defaults if omitted)")
        return sp

    sp = add("init", cmd_init, "emit the default pipeline config")
    sp.add_argument("--out")
    sp = add("pretrain", cmd_pretrain, "pretrain a teacher on the synthetic chain")
    sp.add_argument("--out", required=True)
    sp = add("analyze", cmd_analyze, "expert and layer importance")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    sp = add("prune", cmd_prune, "search and remove experts")
    sp.add_argument("--model", required=True)
    sp.add_argument("--importance")
    sp.add_argument("--out", required=True)
    sp.add_argument("--plan-out")
    sp = add("decompose", cmd_decompose, "low-rank decomposition of surviving experts")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--plan-out")
    sp = add("finetune", cmd_finetune, "adapter recovery against a teacher")
    sp.add_argument("--model", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--out", required=True)
    sp = add("eval", cmd_eval, "loss and perplexity of a checkpoint")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", choices=("heldout", "calibration", "finetune_data"), default="heldout")
    sp = add("run", cmd_run, "full pipeline")
    sp.add_argument("--out-dir")
    sp = add("oracle-check", cmd_oracle_check, "genetic search vs brute force")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--n-remove", type=int, default=2)
    sp.add_argument("--full", action="store_true")
    sp.add_argument("--out")
    sp = add("sweep-kt", cmd_sweep_kt, "K/T grid for block selection")
    sp.add_argument("--k", default="1,2,3,4")
    sp.add_argument("--t", default="1,2,3")
    sp.add_argument("--out")
    sp = add("compare-balance", cmd_compare_balance, "uniform vs importance-driven budgets and ranks")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"moei2: invalid config: {exc}", file=sys.stderr)
        return 2
    except (MoEI2Error, OSError, ValueError) as exc:
        print(f"moei2: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
