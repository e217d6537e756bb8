import dataclasses
import json
import math

import numpy as np
import pytest

from moei2.calibration import CalibrationSet
from moei2.checkpoint import load_checkpoint
from moei2.cli import main
from moei2.errors import ConfigError, StageError
from moei2.model import ModelConfig, expert_param_count, lm_loss, random_init
from moei2.pipeline import (
    DataSpec,
    PipelineConfig,
    PretrainConfig,
    data,
    evaluate_perplexity,
    pretrain_teacher,
    run_pipeline,
    strip_timing,
)
from moei2.prune import SearchParams
from moei2.recover import TrainConfig


def tiny_config(**overrides) -> PipelineConfig:
    cfg = PipelineConfig(
        model=ModelConfig(vocab_size=16, d_model=8, d_ff=12, n_layers=3, experts_per_layer=4, top_k=2, seed=0),
        calibration=DataSpec(8, 12, 1),
        heldout=DataSpec(8, 12, 2),
        finetune_data=DataSpec(16, 12, 3),
        pretrain=PretrainConfig(steps=30, batch_size=8, seq_len=12),
        search=SearchParams(population=12, iterations=4, k_candidates=2, block_size=2),
        target_avg_rank=2,
        train=TrainConfig(lora_rank=2, learning_rate=0.3, batch_size=8, epochs=1),
    )
    return dataclasses.replace(cfg, **overrides).validate()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config()
    return cfg, out, run_pipeline(cfg, out)


def test_default_config_validates_and_roundtrips(tmp_path):
    cfg = PipelineConfig().validate()
    assert cfg.rank_target() == 13
    cfg.save(tmp_path / "c.json")
    again = PipelineConfig.load(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize(
    "change",
    [
        {"stages": ("importance", "pretrain")},
        {"stages": ("pretrain", "prune")},
        {"stages": ("pretrain", "bogus")},
        {"stages": ("pretrain", "importance", "importance")},
        {"prune_ratio": 1.0},
        {"decomposition_rate": 0.0},
        {"budget_mode": "even"},
        {"search_method": "annealing"},
        {"rank_mode": "flat"},
        {"decomposition_mode": "qr"},
        {"checkpoint": "/nonexistent/model.ckpt"},
    ],
)
def test_invalid_configs_rejected(change):
    with pytest.raises(ConfigError):
        dataclasses.replace(PipelineConfig(), **change).validate()


def test_from_dict_errors(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"not_a_key": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"model": {"d_model": 0}})
    (tmp_path / "bad.json").write_text("{oops")
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "bad.json")


def test_uniform_model_perplexity_is_vocab_size():
    cfg = ModelConfig(vocab_size=16, d_model=4, d_ff=6, n_layers=1, experts_per_layer=2, top_k=1)
    m = random_init(cfg)
    m.embedding[:] = 0.0
    ds = data(tiny_config(), DataSpec(4, 10, 9))
    assert abs(evaluate_perplexity(m, ds) - 16.0) < 1e-9


def test_perplexity_is_exp_loss(small_model, small_calib):
    assert abs(evaluate_perplexity(small_model, small_calib) - math.exp(lm_loss(small_model, small_calib))) <= 1e-12 * math.exp(
        lm_loss(small_model, small_calib)
    )
    empty = CalibrationSet(np.zeros((0, 5), dtype=np.int64), 0, 16, 0)
    with pytest.raises(ValueError):
        evaluate_perplexity(small_model, empty)


def test_pretrain_zero_steps_and_determinism():
    cfg = tiny_config()
    m0, trace0 = pretrain_teacher(cfg.model, dataclasses.replace(cfg.pretrain, steps=0))
    ref = random_init(cfg.model)
    np.testing.assert_array_equal(m0.embedding, ref.embedding)
    assert trace0 == []
    a, ta = pretrain_teacher(cfg.model, cfg.pretrain)
    b, tb = pretrain_teacher(cfg.model, cfg.pretrain)
    assert ta == tb
    np.testing.assert_array_equal(a.embedding, b.embedding)
    assert ta[-1] < ta[0]


def test_run_writes_artifacts(tiny_run):
    cfg, out, report = tiny_run
    for name in ("original", "pruned", "compressed", "finetuned"):
        assert (out / f"{name}.ckpt").exists()
        assert name in report["stages"]
    for name in ("report.json", "importance.csv", "reconstruction.csv", "summary.csv"):
        assert (out / name).exists()
    assert json.loads((out / "report.json").read_text())["schema_version"] == 1


def test_report_accounting_matches_checkpoints(tiny_run):
    cfg, out, report = tiny_run
    heldout = data(cfg, cfg.heldout)
    teacher = load_checkpoint(out / "original.ckpt")
    for name in ("original", "pruned", "compressed", "finetuned"):
        m = load_checkpoint(out / f"{name}.ckpt")
        st = report["stages"][name]
        assert st["expert_params"] == expert_param_count(m)
        assert st["experts_per_layer"] == m.expert_counts
        assert st["heldout_ppl"] == evaluate_perplexity(m, heldout)
    pruned = load_checkpoint(out / "pruned.ckpt")
    removed = sum(report["stages"]["pruned"]["budget"]["per_layer_counts"])
    assert removed == math.floor(0.25 * 12 + 0.5)
    assert report["stages"]["pruned"]["expert_param_reduction"] == pytest.approx(removed / 12, abs=1e-15)
    assert expert_param_count(pruned) * 12 == expert_param_count(teacher) * (12 - removed)


def test_run_is_deterministic(tiny_run, tmp_path):
    cfg, _, report = tiny_run
    again = run_pipeline(cfg, tmp_path)
    assert strip_timing(again) == strip_timing(report)


def test_run_without_pretrain_or_finetune(tmp_path):
    cfg = tiny_config(stages=("importance", "prune", "decompose"))
    report = run_pipeline(cfg, tmp_path)
    assert "finetuned" not in report["stages"] and "compressed" in report["stages"]


def test_stage_failure_writes_partial_report(tmp_path):
    cfg = tiny_config(train=TrainConfig(lora_rank=50))
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, tmp_path)
    assert info.value.stage == "finetune"
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["failed_stage"] == "finetune"
    assert "compressed" in rep["stages"]


def test_cli_init_run_eval(tiny_run, tmp_path, capsys):
    cfg, _, report = tiny_run
    cfg.save(tmp_path / "cfg.json")
    assert main(["init", "--out", str(tmp_path / "default.json")]) == 0
    assert PipelineConfig.load(tmp_path / "default.json").to_dict() == PipelineConfig().to_dict()
    assert main(["run", "--config", str(tmp_path / "cfg.json"), "--out-dir", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(tmp_path / "cfg.json"), "--model", str(tmp_path / "r" / "finetuned.ckpt")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["perplexity"] == report["stages"]["finetuned"]["heldout_ppl"]


def test_cli_stage_chain_matches_run(tiny_run, tmp_path, capsys):
    cfg, run_dir, report = tiny_run
    cfg.save(tmp_path / "cfg.json")
    c = ["--config", str(tmp_path / "cfg.json")]
    p = lambda n: str(tmp_path / n)
    assert main(["pretrain", *c, "--out", p("t.ckpt")]) == 0
    assert main(["analyze", *c, "--model", p("t.ckpt"), "--out", p("imp.json")]) == 0
    assert main(["prune", *c, "--model", p("t.ckpt"), "--importance", p("imp.json"), "--out", p("p.ckpt"), "--plan-out", p("plan.json")]) == 0
    assert main(["decompose", *c, "--model", p("p.ckpt"), "--out", p("c.ckpt"), "--plan-out", p("ranks.json")]) == 0
    assert main(["finetune", *c, "--model", p("c.ckpt"), "--teacher", p("t.ckpt"), "--out", p("f.ckpt")]) == 0
    capsys.readouterr()
    heldout = data(cfg, cfg.heldout)
    for mine, theirs in (("t", "original"), ("p", "pruned"), ("c", "compressed"), ("f", "finetuned")):
        assert evaluate_perplexity(load_checkpoint(p(f"{mine}.ckpt")), heldout) == report["stages"][theirs]["heldout_ppl"]


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "--no-such-flag"]) == 2
    assert main(["frobnicate"]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"prune_ratio": 2.0}))
    assert main(["run", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["eval", "--model", str(tmp_path / "missing.ckpt")]) == 1
    capsys.readouterr()


def test_cli_harnesses(tmp_path, capsys):
    cfg = tiny_config(search=SearchParams(population=12, iterations=4, k_candidates=2, block_size=2, brute_cap=1000))
    cfg.save(tmp_path / "cfg.json")
    c = ["--config", str(tmp_path / "cfg.json")]
    assert main(["oracle-check", *c, "--seeds", "2", "--out", str(tmp_path / "o.json")]) == 0
    o = json.loads((tmp_path / "o.json").read_text())
    assert o["n_seeds"] == 2 and "rows" not in o
    assert main(["sweep-kt", *c, "--k", "1,2", "--t", "1,2", "--out", str(tmp_path / "s.json")]) == 0
    rows = json.loads((tmp_path / "s.json").read_text())
    assert [(r["K"], r["T"]) for r in rows] == [(1, 1), (1, 2), (2, 1), (2, 2)]
    assert main(["compare-balance", *c, "--out", str(tmp_path / "b.json")]) == 0
    b = json.loads((tmp_path / "b.json").read_text())
    assert [r["budget_mode"] for r in b["budgets"]] == ["uniform", "inverse-importance"]
    assert [r["rank_mode"] for r in b["ranks"]] == ["uniform", "importance"]
    assert b["ranks"][0]["total_rank"] == b["ranks"][1]["total_rank"]
    assert b["ranks"][0]["expert_params"] == b["ranks"][1]["expert_params"]
