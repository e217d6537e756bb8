"""Inter-expert pruning: which experts to drop, and dropping them."""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .calibration import CalibrationSet
from .errors import InfeasibleBudgetError, PlanError, SearchCapError
from .importance import PruneBudget, layer_inputs
from .model import Expert, MoELayer, MoEModel, copy_model, run_layers
from .parallel import parallel_map

METHODS = ("genetic+kt", "genetic", "brute", "toploss", "random")


@dataclass(frozen=True, order=True)
class Combination:
    layer: int
    removed: tuple[int, ...]
    fitness: float = math.nan

    def key(self):
        return (self.fitness, self.removed)


@dataclass(frozen=True)
class SearchParams:
    population: int = 100
    iterations: int = 50
    parent_fraction: float = 0.2
    mutation_rate: float = 0.1
    k_candidates: int = 3
    block_size: int = 3
    seed: int = 0
    brute_cap: int = 100_000
    kt_cap: int = 10_000
    carry_prior_blocks: bool = False

    def __post_init__(self):
        if self.population < self.k_candidates:
            raise ValueError("population must be >= k_candidates")
        for name in ("parent_fraction", "mutation_rate"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.k_candidates < 1 or self.block_size < 1 or self.iterations < 0:
            raise ValueError("k_candidates, block_size must be >= 1 and iterations >= 0")


class FitnessEvaluator:
    """Memoized layer- and block-level output divergence on a calibration set.

    Every layer is fed the hidden state of the unmasked model, so a layer's
    fitness depends only on the experts removed in that layer.
    """

    def __init__(self, model: MoEModel, calib: CalibrationSet, batch_size: int = 8):
        self.model = model
        self.sequences = calib.sequences
        self.batch_size = batch_size
        self.inputs = layer_inputs(model, self.sequences)
        self._memo: dict[tuple[int, tuple[int, ...]], float] = {}
        self.evaluations = 0

    def divergence(self, reference: np.ndarray, other: np.ndarray) -> float:
        """Sum over batches of the Frobenius norm of the difference."""
        diff = reference - other
        total = 0.0
        for s in range(0, diff.shape[0], self.batch_size):
            chunk = diff[s : s + self.batch_size]
            total += math.sqrt(float(np.sum(chunk * chunk)))
        return total

    def fitness(self, layer: int, removed) -> float:
        key = (layer, tuple(sorted(int(j) for j in removed)))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        out = run_layers(self.model, self.inputs[layer], layer, layer + 1, {layer: key[1]})
        val = self.divergence(self.inputs[layer + 1], out)
        self._memo[key] = val
        self.evaluations += 1
        return val

    def combination(self, layer: int, removed) -> Combination:
        removed = tuple(sorted(int(j) for j in removed))
        return Combination(layer, removed, self.fitness(layer, removed))

    def block_loss(self, start: int, stop: int, mask: dict, h_in: np.ndarray | None = None) -> float:
        """Divergence at the output of layer ``stop - 1`` when ``mask`` is applied
        to layers [start, stop) and both branches see the same block input."""
        if h_in is None:
            h_in = self.inputs[start]
            reference = self.inputs[stop]
        else:
            reference = run_layers(self.model, h_in, start, stop)
        return self.divergence(reference, run_layers(self.model, h_in, start, stop, mask))


def _check_budget(model: MoEModel, layer: int, n_remove: int):
    m = model.layers[layer].n_experts
    if n_remove < 1:
        raise InfeasibleBudgetError(f"layer {layer}: need to remove at least one expert")
    if n_remove > m - model.config.top_k:
        raise InfeasibleBudgetError(
            f"layer {layer}: removing {n_remove} of {m} experts leaves fewer than top_k={model.config.top_k}"
        )


def combination_fitness(
    model: MoEModel, layer: int, combo, calib: CalibrationSet, batch_size: int = 8, evaluator: FitnessEvaluator | None = None
) -> float:
    ev = evaluator or FitnessEvaluator(model, calib, batch_size)
    return ev.fitness(layer, combo)


@dataclass
class GeneticResult:
    candidates: list[Combination]  # K best distinct combinations ever evaluated
    best_trace: list[float]  # best-ever fitness after each generation
    population_best: list[float]
    evaluations: int  # distinct combinations scored


def genetic_search(
    model: MoEModel,
    layer: int,
    n_remove: int,
    calib: CalibrationSet,
    params: SearchParams = SearchParams(),
    evaluator: FitnessEvaluator | None = None,
) -> GeneticResult:
    """Layer-wise genetic search over removal sets of size ``n_remove``."""
    _check_budget(model, layer, n_remove)
    ev = evaluator or FitnessEvaluator(model, calib)
    m = model.layers[layer].n_experts
    N = params.population
    space = math.comb(m, n_remove)
    rng = np.random.default_rng([params.seed, layer, n_remove])

    def draw() -> tuple[int, ...]:
        return tuple(sorted(int(x) for x in rng.choice(m, n_remove, replace=False)))

    pop: list[tuple[int, ...]] = []
    seen: set = set()
    while len(seen) < min(space, N):
        c = draw()
        if c not in seen:
            seen.add(c)
            pop.append(c)
    while len(pop) < N:
        pop.append(draw())

    n_parents = max(1, math.ceil(params.parent_fraction * N))
    best_trace, pop_best = [], []

    visited: dict[tuple[int, ...], float] = {}

    def score(population):
        fits = parallel_map(lambda c: ev.fitness(layer, c), population)
        visited.update(zip(population, fits))
        return sorted(set(zip(fits, population)))

    for _ in range(params.iterations):
        ranked = score(pop)
        pop_best.append(ranked[0][0])
        best_trace.append(min(visited.values()))
        parents = [c for _, c in ranked[:n_parents]]
        children = [parents[0]]
        while len(children) < N:
            if len(parents) > 1:
                i, j = rng.choice(len(parents), 2, replace=False)
            else:
                i = j = 0
            union = sorted(set(parents[i]) | set(parents[j]))
            if len(union) >= n_remove:
                child = [int(x) for x in rng.choice(union, n_remove, replace=False)]
            else:
                rest = sorted(set(range(m)) - set(union))
                child = union + [int(x) for x in rng.choice(rest, n_remove - len(union), replace=False)]
            for g in range(n_remove):
                if rng.random() < params.mutation_rate:
                    outside = sorted(set(range(m)) - set(child))
                    if outside:
                        child[g] = int(outside[rng.integers(len(outside))])
            children.append(tuple(sorted(child)))
        pop = children
    ranked = score(pop)
    pop_best.append(ranked[0][0])
    everything = sorted((f, c) for c, f in visited.items())
    best_trace.append(everything[0][0])
    cands = [Combination(layer, c, f) for f, c in everything[: params.k_candidates]]
    return GeneticResult(cands, best_trace, pop_best, len(visited))


def brute_force_search(
    model: MoEModel,
    layer: int,
    n_remove: int,
    calib: CalibrationSet,
    cap: int = 100_000,
    evaluator: FitnessEvaluator | None = None,
) -> Combination:
    """Exhaustive minimizer of the layer fitness (lexicographic tie-break)."""
    _check_budget(model, layer, n_remove)
    m = model.layers[layer].n_experts
    count = math.comb(m, n_remove)
    if count > cap:
        raise SearchCapError(count, cap)
    ev = evaluator or FitnessEvaluator(model, calib)
    combos = list(itertools.combinations(range(m), n_remove))
    fits = parallel_map(lambda c: ev.fitness(layer, c), combos)
    f, c = min(zip(fits, combos))
    return Combination(layer, c, f)


def toploss_baseline(
    model: MoEModel, layer: int, n_remove: int, calib: CalibrationSet, evaluator: FitnessEvaluator | None = None
) -> Combination:
    """Remove the ``n_remove`` experts whose individual removal hurts least."""
    _check_budget(model, layer, n_remove)
    ev = evaluator or FitnessEvaluator(model, calib)
    m = model.layers[layer].n_experts
    singles = sorted((ev.fitness(layer, (j,)), j) for j in range(m))
    return ev.combination(layer, [j for _, j in singles[:n_remove]])


def random_baseline(layer: int, n_remove: int, seed: int, n_experts: int, top_k: int = 1) -> Combination:
    if not 1 <= n_remove <= n_experts - top_k:
        raise InfeasibleBudgetError(f"cannot remove {n_remove} of {n_experts} experts with top_k={top_k}")
    rng = np.random.default_rng([seed, layer, n_remove, 0x52])
    return Combination(layer, tuple(sorted(int(x) for x in rng.choice(n_experts, n_remove, replace=False))))


@dataclass
class BlockChoice:
    start: int
    stop: int
    options: int
    chosen: list[tuple[int, ...]]
    chosen_loss: float
    greedy_loss: float


def block_kt_select(
    model: MoEModel,
    layer_candidates: list[list[Combination]],
    params: SearchParams,
    calib: CalibrationSet,
    evaluator: FitnessEvaluator | None = None,
) -> tuple[list[Combination], list[BlockChoice]]:
    """Choose one candidate per layer by exhaustive search within blocks of
    ``params.block_size`` consecutive layers.

    Candidate lists are expected best-first; the first entry of each list
    forms the greedy tuple that is reported alongside the chosen one.
    """
    L = len(model.layers)
    if len(layer_candidates) != L:
        raise ValueError("need a candidate list for every layer")
    if any(len(c) == 0 for c in layer_candidates):
        raise ValueError("every layer needs at least one candidate")
    ev = evaluator or FitnessEvaluator(model, calib)
    T = params.block_size
    chosen: list[Combination] = []
    blocks: list[BlockChoice] = []
    carried_mask: dict[int, tuple[int, ...]] = {}
    for start in range(0, L, T):
        stop = min(start + T, L)
        lists = [layer_candidates[i] for i in range(start, stop)]
        options = math.prod(len(c) for c in lists)
        if options > params.kt_cap:
            raise SearchCapError(options, params.kt_cap)
        h_in = None
        if params.carry_prior_blocks and carried_mask:
            h_in = run_layers(model, ev.inputs[0], 0, start, carried_mask)
        tuples = list(itertools.product(*lists))

        def loss(tup):
            mask = {c.layer: c.removed for c in tup if c.removed}
            return ev.block_loss(start, stop, mask, h_in)

        losses = parallel_map(loss, tuples)
        best = min(range(len(tuples)), key=lambda n: (losses[n], tuple(c.removed for c in tuples[n])))
        picked = list(tuples[best])
        chosen.extend(picked)
        for c in picked:
            if c.removed:
                carried_mask[c.layer] = c.removed
        blocks.append(
            BlockChoice(start, stop, options, [c.removed for c in picked], losses[best], losses[0])
        )
    return chosen, blocks


@dataclass
class PruningPlan:
    layers: list[Combination]  # one per model layer, empty ``removed`` if untouched
    method: str
    seed: int
    params_removed: int = 0
    wall_clock_s: float = 0.0
    blocks: list[BlockChoice] = field(default_factory=list)
    traces: dict[int, list[float]] = field(default_factory=dict)

    def removed(self) -> dict[int, tuple[int, ...]]:
        return {c.layer: c.removed for c in self.layers if c.removed}

    @property
    def total_fitness(self) -> float:
        return math.fsum(c.fitness for c in self.layers if c.removed)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "params_removed": self.params_removed,
            "wall_clock_s": self.wall_clock_s,
            "layers": [{"layer": c.layer, "removed": list(c.removed), "fitness": c.fitness} for c in self.layers],
            "blocks": [asdict(b) for b in self.blocks],
            "traces": {str(k): v for k, v in self.traces.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        layers = [Combination(x["layer"], tuple(x["removed"]), x["fitness"]) for x in d["layers"]]
        blocks = [
            BlockChoice(b["start"], b["stop"], b["options"], [tuple(c) for c in b["chosen"]], b["chosen_loss"], b["greedy_loss"])
            for b in d.get("blocks", [])
        ]
        traces = {int(k): v for k, v in d.get("traces", {}).items()}
        return cls(layers, d["method"], d["seed"], d.get("params_removed", 0), d.get("wall_clock_s", 0.0), blocks, traces)


def plan_pruning(
    model: MoEModel,
    calib: CalibrationSet,
    budget: PruneBudget,
    params: SearchParams = SearchParams(),
    method: str = "genetic+kt",
    batch_size: int = 8,
    evaluator: FitnessEvaluator | None = None,
) -> PruningPlan:
    """Pick experts to remove in every layer according to ``budget``."""
    if method not in METHODS:
        raise ValueError(f"unknown search method {method!r}; expected one of {METHODS}")
    if len(budget.per_layer_counts) != len(model.layers):
        raise PlanError("budget does not cover every layer")
    t0 = time.perf_counter()
    ev = evaluator or FitnessEvaluator(model, calib, batch_size)
    top_k = model.config.top_k
    per_layer: list[list[Combination]] = []
    traces: dict[int, list[float]] = {}
    for i, p in enumerate(budget.per_layer_counts):
        if p == 0:
            per_layer.append([Combination(i, (), 0.0)])
            continue
        if method in ("genetic+kt", "genetic"):
            res = genetic_search(model, i, p, calib, params, ev)
            traces[i] = res.best_trace
            per_layer.append(res.candidates if method == "genetic+kt" else res.candidates[:1])
        elif method == "brute":
            per_layer.append([brute_force_search(model, i, p, calib, params.brute_cap, ev)])
        elif method == "toploss":
            per_layer.append([toploss_baseline(model, i, p, calib, ev)])
        else:
            c = random_baseline(i, p, params.seed, model.layers[i].n_experts, top_k)
            per_layer.append([ev.combination(i, c.removed)])
    blocks: list[BlockChoice] = []
    if method == "genetic+kt":
        chosen, blocks = block_kt_select(model, per_layer, params, calib, ev)
    else:
        chosen = [c[0] for c in per_layer]
    per_expert = [[e.n_params() for e in layer.experts] for layer in model.layers]
    removed_params = sum(per_expert[c.layer][j] for c in chosen for j in c.removed)
    return PruningPlan(chosen, method, params.seed, removed_params, time.perf_counter() - t0, blocks, traces)


def apply_pruning(model: MoEModel, plan: PruningPlan | dict) -> MoEModel:
    """Structurally delete the planned experts and their router rows."""
    removed = plan.removed() if isinstance(plan, PruningPlan) else {int(k): tuple(v) for k, v in plan.items() if v}
    out = copy_model(model)
    for i, drop in removed.items():
        if not 0 <= i < len(out.layers):
            raise PlanError(f"plan names layer {i} of {len(out.layers)}")
        layer = out.layers[i]
        bad = [j for j in drop if not 0 <= j < layer.n_experts]
        if bad or len(set(drop)) != len(drop):
            raise PlanError(f"layer {i}: plan references dead or repeated expert indices {list(drop)}")
        if layer.n_experts - len(drop) < model.config.top_k:
            raise PlanError(f"layer {i}: plan leaves fewer than top_k experts")
        keep = [j for j in range(layer.n_experts) if j not in set(drop)]
        experts: list[Expert] = [layer.experts[j] for j in keep]
        out.layers[i] = MoELayer(router=np.ascontiguousarray(layer.router[keep]), experts=experts)
    return out
