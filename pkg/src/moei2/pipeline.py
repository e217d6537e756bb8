"""End-to-end compression run: importance, expert pruning, post-prune
importance, low-rank decomposition, adapter fine-tuning."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backprop import backward, ce_loss_and_grad, forward_tape
from .calibration import CalibrationSet, make_calibration
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DivergenceError, StageError
from .importance import ImportanceReport, allocate_prune_budget, expert_importance
from .lowrank import allocate_ranks, apply_decomposition, break_even_rank, capture_activations, reconstruction_table
from .model import (
    SLOTS,
    ModelConfig,
    MoEModel,
    adapter_param_count,
    expert_param_count,
    lm_loss,
    random_init,
    total_param_count,
)
from .prune import METHODS, SearchParams, apply_pruning, plan_pruning
from .recover import TrainConfig, attach_adapters, finetune

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("pretrain", "importance", "prune", "decompose", "finetune")


@dataclass(frozen=True)
class DataSpec:
    n_sequences: int
    seq_len: int
    seed: int


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    batch_size: int = 16
    seq_len: int = 32
    learning_rate: float = 3e-3
    seed: int = 0


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint: str | None = None
    chain_seed: int = 0
    calibration: DataSpec = DataSpec(32, 32, 1)
    heldout: DataSpec = DataSpec(64, 32, 2)
    finetune_data: DataSpec = DataSpec(256, 32, 3)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    prune_ratio: float = 0.25
    budget_mode: str = "inverse-importance"
    search_method: str = "genetic+kt"
    search: SearchParams = field(default_factory=SearchParams)
    importance_batch_size: int = 8
    decomposition_rate: float = 0.4
    target_avg_rank: float | None = None
    rank_alpha: float = 0.15
    rank_epsilon: float = 1e-6
    rank_mode: str = "importance"  # or "uniform"
    decomposition_mode: str = "whitened"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=2.0, batch_size=16))
    stages: tuple[str, ...] = STAGES
    output_dir: str = "runs/default"

    def validate(self) -> "PipelineConfig":
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}; expected a subset of {STAGES}")
        positions = [STAGES.index(s) for s in self.stages]
        if positions != sorted(positions) or len(set(positions)) != len(positions):
            raise ConfigError(f"stages {list(self.stages)} violate the required order {STAGES}")
        if "prune" in self.stages and "importance" not in self.stages:
            raise ConfigError("the prune stage needs the importance stage")
        if not 0.0 < self.prune_ratio < 1.0:
            raise ConfigError("prune_ratio must lie in (0, 1)")
        if not 0.0 < self.decomposition_rate < 1.0:
            raise ConfigError("decomposition_rate must lie in (0, 1)")
        if self.budget_mode not in ("uniform", "inverse-importance"):
            raise ConfigError(f"unknown budget_mode {self.budget_mode!r}")
        if self.search_method not in METHODS:
            raise ConfigError(f"unknown search_method {self.search_method!r}")
        if self.rank_mode not in ("importance", "uniform"):
            raise ConfigError(f"unknown rank_mode {self.rank_mode!r}")
        if self.decomposition_mode not in ("plain", "whitened"):
            raise ConfigError(f"unknown decomposition_mode {self.decomposition_mode!r}")
        if self.checkpoint is not None and not Path(self.checkpoint).exists():
            raise ConfigError(f"checkpoint {self.checkpoint} does not exist")
        return self

    def rank_target(self) -> float:
        if self.target_avg_rank is not None:
            return self.target_avg_rank
        d, f = self.model.d_model, self.model.d_ff
        return float(max(1, round((1.0 - self.decomposition_rate) * break_even_rank(d, f))))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stages"] = list(self.stages)
        d["train"]["targets"] = list(self.train.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        nested = {
            "model": ModelConfig,
            "calibration": DataSpec,
            "heldout": DataSpec,
            "finetune_data": DataSpec,
            "pretrain": PretrainConfig,
            "search": SearchParams,
            "train": TrainConfig,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            for key, typ in nested.items():
                if key in d and isinstance(d[key], dict):
                    sub = dict(d[key])
                    if key == "train" and "targets" in sub:
                        sub["targets"] = tuple(sub["targets"])
                    d[key] = typ(**sub)
            if "stages" in d:
                d["stages"] = tuple(d["stages"])
            return cls(**d).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def data(config: PipelineConfig, spec: DataSpec) -> CalibrationSet:
    return make_calibration(config.model, spec.n_sequences, spec.seq_len, spec.seed, config.chain_seed)


def evaluate_perplexity(model: MoEModel, heldout: CalibrationSet) -> float:
    if len(heldout) == 0:
        raise ValueError("held-out set is empty")
    return math.exp(lm_loss(model, heldout))


def _trainable(model: MoEModel):
    """Every parameter array of a model whose expert slots are all dense."""
    yield "embedding", model.embedding
    for i, layer in enumerate(model.layers):
        yield f"router.{i}", layer.router
        for j, e in enumerate(layer.experts):
            for s in SLOTS:
                yield f"expert.{i}.{j}.{s}", e.slot(s).w


def pretrain_teacher(
    config: ModelConfig,
    pretrain: PretrainConfig = PretrainConfig(),
    chain_seed: int = 0,
    data: CalibrationSet | None = None,
) -> tuple[MoEModel, list[float]]:
    """Full-parameter Adam on next-token cross-entropy.

    Batches are drawn fresh from the synthetic chain each step unless ``data``
    is given, in which case they are sampled from it.
    """
    model = random_init(config)
    params = dict(_trainable(model))
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng([pretrain.seed, 0x7EAC])
    trace: list[float] = []
    initial = None
    for step in range(1, pretrain.steps + 1):
        if data is None:
            batch = make_calibration(config, pretrain.batch_size, pretrain.seq_len, int(rng.integers(2**62)), chain_seed).sequences
        else:
            batch = data.sequences[rng.choice(len(data), min(pretrain.batch_size, len(data)), replace=False)]
        tape = forward_tape(model, batch)
        loss, dlogits = ce_loss_and_grad(tape.logits, batch)
        if initial is None:
            initial = loss
        if not math.isfinite(loss) or loss > 10.0 * initial:
            raise DivergenceError(f"pretraining loss {loss} at step {step}")
        trace.append(loss)
        g = backward(model, tape, dlogits)
        grads = {"embedding": g.embedding}
        for i, layer in enumerate(model.layers):
            grads[f"router.{i}"] = g.routers[i]
            for j in range(layer.n_experts):
                for s in SLOTS:
                    grads[f"expert.{i}.{j}.{s}"] = g.experts[i][j][s]
        for k, p in params.items():
            gk = grads[k]
            m1[k] = b1 * m1[k] + (1 - b1) * gk
            m2[k] = b2 * m2[k] + (1 - b2) * gk * gk
            p -= pretrain.learning_rate * (m1[k] / (1 - b1**step)) / (np.sqrt(m2[k] / (1 - b2**step)) + eps)
    return model, trace


def model_summary(model: MoEModel, calib: CalibrationSet, heldout: CalibrationSet) -> dict:
    return {
        "total_params": total_param_count(model),
        "expert_params": expert_param_count(model),
        "adapter_params": adapter_param_count(model),
        "experts_per_layer": model.expert_counts,
        "calib_loss": lm_loss(model, calib),
        "heldout_ppl": evaluate_perplexity(model, heldout),
    }


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def strip_timing(obj):
    """Copy of a report with every wall-clock field removed."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if not k.startswith("wall_clock")}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


# Stage functions. Each takes and returns plain objects so the CLI can chain
# them across checkpoints and obtain the same result as ``run_pipeline``.


def stage_importance(config: PipelineConfig, model: MoEModel) -> ImportanceReport:
    return expert_importance(model, data(config, config.calibration), config.importance_batch_size)


def stage_prune(config: PipelineConfig, model: MoEModel, report: ImportanceReport):
    budget = allocate_prune_budget(report, config.prune_ratio, config.budget_mode)
    plan = plan_pruning(
        model, data(config, config.calibration), budget, config.search, config.search_method, config.importance_batch_size
    )
    return apply_pruning(model, plan), budget, plan


def stage_decompose(config: PipelineConfig, model: MoEModel):
    calib = data(config, config.calibration)
    report = expert_importance(model, calib, config.importance_batch_size)
    d = (config.model.d_model, config.model.d_ff)
    plan = allocate_ranks(
        report, config.rank_target(), d, config.rank_alpha, config.rank_epsilon, config.rank_mode == "uniform", config.decomposition_mode
    )
    stats = capture_activations(model, calib) if config.decomposition_mode == "whitened" else None
    compressed = apply_decomposition(model, plan, stats)
    return compressed, report, plan, reconstruction_table(model, compressed, stats)


def stage_finetune(config: PipelineConfig, model: MoEModel, teacher: MoEModel):
    student = attach_adapters(model, config.train)
    result = finetune(student, teacher, data(config, config.finetune_data), config.train)
    return result


def initial_model(config: PipelineConfig) -> tuple[MoEModel, list[float]]:
    if config.checkpoint is not None:
        return load_checkpoint(config.checkpoint), []
    if "pretrain" in config.stages:
        return pretrain_teacher(config.model, config.pretrain, config.chain_seed)
    return random_init(config.model), []


def run_pipeline(config: PipelineConfig, output_dir: str | Path | None = None) -> dict:
    """Run the configured stages in order, saving a checkpoint after each and
    a JSON report (plus CSV tables) at the end."""
    config.validate()
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    calib = data(config, config.calibration)
    heldout = data(config, config.heldout)
    report: dict = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "seeds": {
            "model": config.model.seed,
            "chain": config.chain_seed,
            "calibration": config.calibration.seed,
            "heldout": config.heldout.seed,
            "finetune_data": config.finetune_data.seed,
            "pretrain": config.pretrain.seed,
            "search": config.search.seed,
            "train": config.train.seed,
        },
        "calib_fingerprint": calib.fingerprint(),
        "stages": {},
    }
    stages = report["stages"]

    def save_report():
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    def run(name, fn):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            value = fn()
        except Exception as exc:
            report["failed_stage"] = name
            report["error"] = str(exc)
            save_report()
            raise StageError(name, exc) from exc
        return value, time.perf_counter() - t0

    (teacher, pre_trace), dt = run("pretrain", lambda: initial_model(config))
    save_checkpoint(teacher, out / "original.ckpt")
    stages["original"] = {**model_summary(teacher, calib, heldout), "pretrain_loss_trace": pre_trace[:: max(1, len(pre_trace) // 50)], "wall_clock_s": dt}
    current = teacher

    if "importance" in config.stages:
        imp, dt = run("importance", lambda: stage_importance(config, teacher))
        stages["importance"] = {**imp.to_dict(), "wall_clock_s": dt}
        _write_csv(
            out / "importance.csv",
            [{"layer": i, "expert": j, "importance": v} for i, row in enumerate(imp.expert_importance) for j, v in enumerate(row)],
        )

    if "prune" in config.stages:
        (current, budget, plan), dt = run("prune", lambda: stage_prune(config, teacher, imp))
        save_checkpoint(current, out / "pruned.ckpt")
        stages["pruned"] = {
            **model_summary(current, calib, heldout),
            "budget": dataclasses.asdict(budget),
            "plan": plan.to_dict(),
            "expert_param_reduction": 1.0 - expert_param_count(current) / expert_param_count(teacher),
            "wall_clock_s": dt,
        }

    if "decompose" in config.stages:
        (current, post_imp, rank_plan, table), dt = run("decompose", lambda: stage_decompose(config, current))
        save_checkpoint(current, out / "compressed.ckpt")
        stages["compressed"] = {
            **model_summary(current, calib, heldout),
            "post_prune_importance": post_imp.to_dict(),
            "rank_plan": rank_plan.to_dict(),
            "expert_param_reduction": 1.0 - expert_param_count(current) / expert_param_count(teacher),
            "wall_clock_s": dt,
        }
        _write_csv(out / "reconstruction.csv", table)

    if "finetune" in config.stages:
        result, dt = run("finetune", lambda: stage_finetune(config, current, teacher))
        current = result.model
        save_checkpoint(current, out / "finetuned.ckpt")
        stages["finetuned"] = {
            **model_summary(current, calib, heldout),
            "initial_loss": result.initial_loss,
            "epoch_losses": result.epoch_losses,
            "steps": result.steps,
            "wall_clock_s": dt,
        }

    _write_csv(
        out / "summary.csv",
        [
            {"stage": k, **{f: v[f] for f in ("total_params", "expert_params", "adapter_params", "calib_loss", "heldout_ppl")}}
            for k, v in stages.items()
            if "total_params" in v
        ],
    )
    save_report()
    return report
