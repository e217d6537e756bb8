import numpy as np
import pytest
import sympy as sp

from moei2.backprop import mse_loss_and_grad
from moei2.calibration import make_calibration
from moei2.errors import BoundsError, DivergenceError
from moei2.lowrank import RankPlan, apply_decomposition
from moei2.model import (
    Dense,
    Expert,
    ModelConfig,
    MoELayer,
    MoEModel,
    adapter_param_count,
    forward,
    prefix_mean,
    random_init,
    route,
)
from moei2.recover import (
    TrainConfig,
    adapter_backward,
    adapter_items,
    attach_adapters,
    distill_loss,
    finetune,
    merge_adapters,
)

from reference import forward_ref


def compressed_pair(seed, rank=3):
    cfg = ModelConfig(vocab_size=16, d_model=6, d_ff=10, n_layers=2, experts_per_layer=4, top_k=2, seed=seed)
    teacher = random_init(cfg)
    student = apply_decomposition(teacher, RankPlan([[rank] * 4, [rank] * 4], rank, mode="plain"))
    return cfg, teacher, student


def randomize_adapters(model, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    for _, ad in adapter_items(model):
        ad.a[:] = rng.normal(0, scale, ad.a.shape)
    return model


def test_attach_is_exact_noop(small_model, small_calib):
    adapted = attach_adapters(small_model, TrainConfig(lora_rank=3))
    np.testing.assert_array_equal(forward(adapted, small_calib.sequences)[0], forward(small_model, small_calib.sequences)[0])
    assert all(np.all(ad.a == 0) for _, ad in adapter_items(adapted))


def test_attach_rank_too_large(small_model):
    with pytest.raises(BoundsError):
        attach_adapters(small_model, TrainConfig(lora_rank=7))


def test_adapter_param_count(small_model):
    adapted = attach_adapters(small_model, TrainConfig(lora_rank=3))
    per_expert = 3 * (10 + 6) * 3
    assert adapter_param_count(adapted) == 8 * per_expert
    only_down = attach_adapters(small_model, TrainConfig(lora_rank=2), targets=("down",))
    assert adapter_param_count(only_down) == 8 * 2 * (6 + 10)


@pytest.mark.parametrize("factored", [False, True])
def test_merge_preserves_logits(factored, small_calib):
    _, teacher, student = compressed_pair(4)
    base = student if factored else teacher
    adapted = randomize_adapters(attach_adapters(base, TrainConfig(lora_rank=2)), 1)
    merged = merge_adapters(adapted)
    assert not any(True for _ in adapter_items(merged))
    a = forward(adapted, small_calib.sequences)[0]
    b = forward(merged, small_calib.sequences)[0]
    assert np.max(np.abs(a - b)) < 1e-10


def test_distill_loss_examples(small_model, small_calib):
    assert distill_loss(small_model, small_model, small_calib.sequences) == 0.0
    t = np.random.default_rng(0).normal(size=(3, 5, 7))
    assert mse_loss_and_grad(t + 0.5, t)[0] == 0.25
    _, teacher, student = compressed_pair(2)
    got = distill_loss(student, teacher, small_calib.sequences)
    s_ref = np.array([forward_ref(student, list(s))[0] for s in small_calib.sequences])
    t_ref = np.array([forward_ref(teacher, list(s))[0] for s in small_calib.sequences])
    assert got > 0
    assert abs(got - float(np.mean((s_ref - t_ref) ** 2))) < 1e-12
    with pytest.raises(ValueError):
        mse_loss_and_grad(t, t[:, :4])


def test_gradients_vanish_when_student_is_teacher(small_model, small_calib):
    adapted = randomize_adapters(attach_adapters(small_model, TrainConfig(lora_rank=2)), 0)
    target = forward(adapted, small_calib.sequences)[0]
    grads = adapter_backward(adapted, target, small_calib.sequences)
    assert max(max(np.abs(ga).max(), np.abs(gb).max()) for ga, gb in grads.values()) <= 1e-12


def test_hand_derived_single_token_gradient():
    """One layer, one expert, one token, d=2: compare with sympy."""
    cfg = ModelConfig(vocab_size=2, d_model=2, d_ff=2, n_layers=1, experts_per_layer=1, top_k=1)
    rng = np.random.default_rng(5)
    E = rng.normal(size=(2, 2))
    G, U, D = (rng.normal(size=(2, 2)) for _ in range(3))
    A0, B0 = rng.normal(size=(2, 1)), rng.normal(size=(1, 2))
    scale = 1.5
    target = rng.normal(size=(1, 1, 2))
    model = MoEModel(cfg, E, [MoELayer(np.ones((1, 2)), [Expert(Dense(G), Dense(U), Dense(D))])])
    from moei2.model import LoraAdapter

    model.layers[0].experts[0].adapters["down"] = LoraAdapter(A0.copy(), B0.copy(), scale)
    grads = adapter_backward(model, target, np.array([[1]]))
    ga, gb = grads[(0, 0, "down")]

    a = sp.Matrix(2, 1, sp.symbols("a0:2"))
    b = sp.Matrix(1, 2, sp.symbols("b0:2"))
    x = sp.Matrix(E[1])
    silu = lambda v: v / (1 + sp.exp(-v))
    z = (sp.Matrix(G) * x).applyfunc(silu).multiply_elementwise(sp.Matrix(U) * x)
    y = x + (sp.Matrix(D) + scale * a * b) * z
    logits = sp.Matrix(E) * y
    loss = sum((logits[i] - target[0, 0, i]) ** 2 for i in range(2)) / 2
    subs = {**{a[i]: A0[i, 0] for i in range(2)}, **{b[i]: B0[0, i] for i in range(2)}}
    want_a = np.array([[float(sp.diff(loss, a[i]).subs(subs))] for i in range(2)])
    want_b = np.array([[float(sp.diff(loss, b[i]).subs(subs)) for i in range(2)]])
    np.testing.assert_allclose(ga, want_a, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(gb, want_b, rtol=1e-12, atol=1e-14)


# Gradients below this size are compared in absolute terms: float64 central
# differences at step 1e-5 carry roughly 1e-11 of roundoff.
FD_FLOOR = 1e-6


def fd_check(student, target, seqs, step=1e-5):
    grads = adapter_backward(student, target, seqs)
    worst = 0.0
    for key, ad in adapter_items(student):
        for arr, g in ((ad.a, grads[key][0]), (ad.b, grads[key][1])):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + step
                up = distill_loss(student, target, seqs)
                arr[idx] = old - step
                down = distill_loss(student, target, seqs)
                arr[idx] = old
                fd = (up - down) / (2 * step)
                worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), FD_FLOOR))
    return worst


def test_finite_difference_single_instance():
    _, teacher, student = compressed_pair(0)
    calib = make_calibration(teacher.config, 3, 8, 1)
    adapted = randomize_adapters(attach_adapters(student, TrainConfig(lora_rank=2, seed=1)), 2)
    target = forward(teacher, calib.sequences)[0]
    assert fd_check(adapted, target, calib.sequences) < 1e-5


def _train_setup(seed):
    _, teacher, student = compressed_pair(seed, rank=2)
    data = make_calibration(teacher.config, 32, 10, 100 + seed)
    cfg = TrainConfig(lora_rank=2, learning_rate=0.3, batch_size=8, epochs=2, seed=seed)
    return teacher, attach_adapters(student, cfg), data, cfg


def test_zero_epochs_is_noop():
    teacher, student, data, cfg = _train_setup(0)
    res = finetune(student, teacher, data, TrainConfig(**{**cfg.__dict__, "epochs": 0}))
    np.testing.assert_array_equal(forward(res.model, data.sequences)[0], forward(student, data.sequences)[0])
    assert res.epoch_losses == [] and res.steps == 0


def test_finetune_deterministic_and_improves():
    teacher, student, data, cfg = _train_setup(1)
    a = finetune(student, teacher, data, cfg)
    b = finetune(student, teacher, data, cfg)
    assert a.epoch_losses == b.epoch_losses
    final = distill_loss(a.model, teacher, data.sequences)
    assert final < a.initial_loss


def test_finetune_recovers_in_mean_over_seeds():
    initial, final = [], []
    for seed in range(5):
        teacher, student, data, cfg = _train_setup(seed)
        res = finetune(student, teacher, data, cfg)
        initial.append(res.initial_loss)
        final.append(distill_loss(res.model, teacher, data.sequences))
    assert np.mean(final) < np.mean(initial)


def test_finetune_ce_mode_runs():
    teacher, student, data, cfg = _train_setup(2)
    res = finetune(student, teacher, data, TrainConfig(**{**cfg.__dict__, "loss": "ce", "learning_rate": 0.1}))
    assert len(res.epoch_losses) == 2


def test_divergence_guard():
    teacher, student, data, cfg = _train_setup(3)
    with pytest.raises(DivergenceError):
        finetune(student, teacher, data, TrainConfig(**{**cfg.__dict__, "learning_rate": 1e4, "epochs": 5}))


def test_first_layer_selection_frozen():
    teacher, student, data, cfg = _train_setup(4)
    res = finetune(student, teacher, data, cfg)

    def first_layer_selection(model):
        mix = prefix_mean(model.embedding[data.sequences]).reshape(-1, model.config.d_model)
        return route(mix, model.layers[0].router, model.config.top_k)[0]

    np.testing.assert_array_equal(first_layer_selection(res.model), first_layer_selection(student))
    for la, lb in zip(res.model.layers, student.layers):
        np.testing.assert_array_equal(la.router, lb.router)
    np.testing.assert_array_equal(res.model.embedding, student.embedding)
