"""Comparison harnesses: genetic search against the brute-force oracle and the
Random/TopLoss baselines, K/T sweeps, and balanced-vs-imbalanced budgets."""
from __future__ import annotations

import dataclasses
import math
import time

import numpy as np

from .importance import allocate_prune_budget, expert_importance
from .lowrank import allocate_ranks, apply_decomposition, capture_activations
from .model import MoEModel, expert_param_count, lm_loss
from .pipeline import PipelineConfig, data, evaluate_perplexity, pretrain_teacher
from .prune import FitnessEvaluator, apply_pruning, brute_force_search, genetic_search, plan_pruning


def seeded_config(config: PipelineConfig, seed: int) -> PipelineConfig:
    """Same experiment with model, data and search seeds all shifted to ``seed``."""
    return dataclasses.replace(
        config,
        model=dataclasses.replace(config.model, seed=seed),
        calibration=dataclasses.replace(config.calibration, seed=config.calibration.seed + 1000 * seed),
        pretrain=dataclasses.replace(config.pretrain, seed=seed),
        search=dataclasses.replace(config.search, seed=seed),
        train=dataclasses.replace(config.train, seed=seed),
    )


def teacher_for(config: PipelineConfig) -> MoEModel:
    return pretrain_teacher(config.model, config.pretrain, config.chain_seed)[0]


def oracle_check(config: PipelineConfig, seeds, n_remove: int = 2, model_fn=teacher_for) -> dict:
    """Per seed and layer: does the genetic best equal the brute-force optimum?"""
    rows = []
    t0 = time.perf_counter()
    for seed in seeds:
        cfg = seeded_config(config, seed)
        model = model_fn(cfg)
        calib = data(cfg, cfg.calibration)
        ev = FitnessEvaluator(model, calib, cfg.importance_batch_size)
        for layer in range(len(model.layers)):
            res = genetic_search(model, layer, n_remove, calib, cfg.search, ev)
            brute = brute_force_search(model, layer, n_remove, calib, cfg.search.brute_cap, ev)
            best = res.candidates[0]
            gap = (best.fitness - brute.fitness) / brute.fitness if brute.fitness > 0 else 0.0
            rows.append(
                {
                    "seed": seed,
                    "layer": layer,
                    "genetic": list(best.removed),
                    "genetic_fitness": best.fitness,
                    "brute": list(brute.removed),
                    "brute_fitness": brute.fitness,
                    "hit": best.removed == brute.removed,
                    "relative_gap": gap,
                }
            )
    per_seed = {}
    for r in rows:
        per_seed.setdefault(r["seed"], []).append(r["hit"])
    return {
        "rows": rows,
        "per_seed_hit_rate": {s: float(np.mean(h)) for s, h in per_seed.items()},
        "seeds_all_hit": sum(all(h) for h in per_seed.values()),
        "n_seeds": len(per_seed),
        "max_relative_gap": max(r["relative_gap"] for r in rows),
        "wall_clock_s": time.perf_counter() - t0,
    }


def search_ablation(config: PipelineConfig, seeds, methods=("genetic+kt", "toploss", "random"), model_fn=teacher_for) -> dict:
    """Total chosen fitness and pruned-model calibration perplexity per method."""
    rows = []
    for seed in seeds:
        cfg = seeded_config(config, seed)
        model = model_fn(cfg)
        calib = data(cfg, cfg.calibration)
        report = expert_importance(model, calib, cfg.importance_batch_size)
        budget = allocate_prune_budget(report, cfg.prune_ratio, cfg.budget_mode)
        ev = FitnessEvaluator(model, calib, cfg.importance_batch_size)
        for method in methods:
            plan = plan_pruning(model, calib, budget, cfg.search, method, evaluator=ev)
            pruned = apply_pruning(model, plan)
            rows.append(
                {
                    "seed": seed,
                    "method": method,
                    "fitness": plan.total_fitness,
                    "calib_ppl": math.exp(lm_loss(pruned, calib)),
                }
            )
    summary = {}
    for method in methods:
        sel = [r for r in rows if r["method"] == method]
        summary[method] = {
            "mean_fitness": float(np.mean([r["fitness"] for r in sel])),
            "mean_calib_ppl": float(np.mean([r["calib_ppl"] for r in sel])),
        }
    return {"rows": rows, "summary": summary}


def sweep_kt(config: PipelineConfig, ks=(1, 2, 3, 4), ts=(1, 2, 3), model: MoEModel | None = None) -> list[dict]:
    model = model if model is not None else teacher_for(config)
    calib = data(config, config.calibration)
    heldout = data(config, config.heldout)
    report = expert_importance(model, calib, config.importance_batch_size)
    budget = allocate_prune_budget(report, config.prune_ratio, config.budget_mode)
    ev = FitnessEvaluator(model, calib, config.importance_batch_size)
    rows = []
    for k in ks:
        for t in ts:
            params = dataclasses.replace(config.search, k_candidates=k, block_size=t)
            t0 = time.perf_counter()
            plan = plan_pruning(model, calib, budget, params, "genetic+kt", evaluator=ev)
            pruned = apply_pruning(model, plan)
            rows.append(
                {
                    "K": k,
                    "T": t,
                    "block_loss": math.fsum(b.chosen_loss for b in plan.blocks),
                    "calib_loss": lm_loss(pruned, calib),
                    "heldout_ppl": evaluate_perplexity(pruned, heldout),
                    "wall_clock_s": time.perf_counter() - t0,
                }
            )
    return rows


def balance_comparison(config: PipelineConfig, model: MoEModel | None = None) -> dict:
    """Calibration loss for uniform vs importance-driven pruning budgets, and
    for uniform vs importance-driven ranks at the same total rank budget."""
    model = model if model is not None else teacher_for(config)
    calib = data(config, config.calibration)
    report = expert_importance(model, calib, config.importance_batch_size)
    budgets = []
    pruned_by_mode = {}
    for mode in ("uniform", "inverse-importance"):
        budget = allocate_prune_budget(report, config.prune_ratio, mode)
        plan = plan_pruning(model, calib, budget, config.search, config.search_method, config.importance_batch_size)
        pruned = apply_pruning(model, plan)
        pruned_by_mode[mode] = pruned
        budgets.append(
            {
                "budget_mode": mode,
                "per_layer_counts": budget.per_layer_counts,
                "expert_params": expert_param_count(pruned),
                "calib_loss": lm_loss(pruned, calib),
            }
        )
    base = pruned_by_mode[config.budget_mode]
    post = expert_importance(base, calib, config.importance_batch_size)
    stats = capture_activations(base, calib)
    dims = (config.model.d_model, config.model.d_ff)
    by_importance = allocate_ranks(post, config.rank_target(), dims, config.rank_alpha, config.rank_epsilon, False, config.decomposition_mode)
    # uniform baseline gets the same total rank per layer as the importance plan actually used
    matched = [[sum(r) // len(r)] * len(r) for r in by_importance.ranks]
    for row, total in zip(matched, (sum(r) for r in by_importance.ranks)):
        for j in range(total - sum(row)):
            row[j] += 1
    uniform = dataclasses.replace(by_importance, ranks=matched, uniform=True)
    ranks = []
    for name, plan in (("uniform", uniform), ("importance", by_importance)):
        compressed = apply_decomposition(base, plan, stats)
        ranks.append(
            {
                "rank_mode": name,
                "total_rank": sum(map(sum, plan.ranks)),
                "expert_params": expert_param_count(compressed),
                "calib_loss": lm_loss(compressed, calib),
            }
        )
    return {"budgets": budgets, "ranks": ranks}
