import math

import numpy as np
import pytest
import torch

from oracles import finite_difference_grads, relative_errors, tiny_batch, tiny_double_model
from linevit.synthgen import GenConfig, generate_dataset
from linevit.trainer import (
    DEFAULT_LOSS_WEIGHTS,
    AdamState,
    ContractError,
    EarlyStopping,
    LineDataset,
    PlateauScheduler,
    TrainConfig,
    TrainingError,
    adamw_step,
    backward,
    fit,
    huber,
    measure_inference_time,
    read_metrics,
    run_schedule,
    task_correlations,
    weighted_loss,
)
from linevit.vitmodel import ModelConfig, init_params, load_checkpoint


def t(*rows):
    return torch.tensor(rows, dtype=torch.float64)


# loss ------------------------------------------------------------------------


@pytest.mark.parametrize("r,expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (1.0, 0.5)])
def test_huber_examples(r, expected):
    assert huber(r, 1.0) == expected
    assert huber(torch.tensor(r), 1.0).item() == expected


def test_huber_c1_at_threshold():
    d = 0.7
    eps = 1e-7
    left = (huber(d, d) - huber(d - eps, d)) / eps
    right = (huber(d + eps, d) - huber(d, d)) / eps
    assert left == pytest.approx(d, abs=1e-6) and right == pytest.approx(d, abs=1e-6)
    with pytest.raises(ValueError):
        huber(1.0, 0.0)


def test_weighted_loss_worked_example():
    preds = {"angle": t([0.5]), "coords": t([0.2, 0.2, 0.2, 0.2]), "noise": t([0.1])}
    targets = {"angle": t([0.0]), "coords": t([0.2, 0.2, 0.2, 0.2]), "noise": t([0.1])}
    w = {k: DEFAULT_LOSS_WEIGHTS[k] for k in preds}
    assert weighted_loss(preds, targets, w).item() == 0.25
    assert weighted_loss(targets, targets, w).item() == 0.0
    doubled = {k: 2 * v for k, v in w.items()}
    preds["coords"] = t([0.0, 0.9, 0.2, 3.0])
    assert weighted_loss(preds, targets, doubled).item() == pytest.approx(2 * weighted_loss(preds, targets, w).item(), abs=1e-15)


def test_weighted_loss_decomposes():
    gen = torch.Generator().manual_seed(0)
    dims = {"angle": 1, "coords": 4, "noise": 1, "length": 1}
    preds = {k: torch.randn(5, d, generator=gen, dtype=torch.float64) for k, d in dims.items()}
    targets = {k: torch.randn(5, d, generator=gen, dtype=torch.float64) for k, d in dims.items()}
    w = {k: DEFAULT_LOSS_WEIGHTS[k] for k in dims}
    parts = sum(w[k] * np.mean(huber((preds[k] - targets[k]).numpy(), 1.0)) for k in dims)
    assert abs(weighted_loss(preds, targets, w).item() - parts) <= 1e-12


def test_weighted_loss_task_mismatch():
    with pytest.raises(ContractError):
        weighted_loss({"angle": t([0.0])}, {"angle": t([0.0]), "noise": t([0.0])}, DEFAULT_LOSS_WEIGHTS)
    with pytest.raises(ContractError):
        weighted_loss({"angle": t([0.0])}, {"angle": t([0.0])}, {"coords": 1.0})


# gradients -------------------------------------------------------------------


def test_gradients_match_finite_differences():
    model = tiny_double_model(seed=3)
    x, targets = tiny_batch(model, n=2, seed=1)
    w = {k: DEFAULT_LOSS_WEIGHTS[k] for k in targets}
    _, grads = backward(model, x, targets, w)
    fd = finite_difference_grads(model, x, targets, w)
    assert set(fd) == {n for n, p in model.named_parameters()}
    errs = relative_errors(grads, fd)
    assert max(errs.values()) < 1e-5, errs


def test_zero_weight_task_contributes_nothing():
    model = tiny_double_model(seed=1)
    x, targets = tiny_batch(model)
    w = {k: DEFAULT_LOSS_WEIGHTS[k] for k in targets}
    w["length"] = 0.0
    _, grads = backward(model, x, targets, w)
    assert torch.count_nonzero(grads["heads.length.weight"]) == 0
    _, grads2 = backward(model, x, {**targets, "length": targets["length"] * 0.5}, w)
    for k in grads:
        assert torch.equal(grads[k], grads2[k])


def test_frozen_backbone_gradients_zero():
    model = tiny_double_model(seed=2, freeze_backbone=True)
    x, targets = tiny_batch(model)
    _, grads = backward(model, x, targets, {k: 1.0 for k in targets})
    for name in model.backbone_parameters():
        assert torch.count_nonzero(grads[name]) == 0
    assert any(torch.count_nonzero(grads[n]) for n in model.lora_parameters())


# optimiser -------------------------------------------------------------------


def test_adamw_two_steps_by_hand():
    p = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
    state = AdamState()
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    expected = 1.0
    m = v = 0.0
    for step, g in enumerate([0.5, -0.2], start=1):
        adamw_step({"p": p}, {"p": torch.tensor([g], dtype=torch.float64)}, state, lr, (b1, b2), eps, wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        expected = expected * (1 - lr * wd) - lr * (m / (1 - b1 ** step)) / (math.sqrt(v / (1 - b2 ** step)) + eps)
        assert p.item() == pytest.approx(expected, abs=1e-15)
    # by hand: step 1 moves by lr (up to eps): mhat = 0.5, sqrt(vhat) = 0.5
    # step 2: m = 0.025, v = 0.00028975, mhat = 0.025 / 0.19, vhat = 0.00028975 / 0.001999
    step2 = 0.1 * (0.025 / 0.19) / (math.sqrt(0.00028975 / 0.001999) + 1e-8)
    step1 = 0.1 * 0.5 / (0.5 + 1e-8)
    assert p.item() == pytest.approx((0.999 - step1) * 0.999 - step2, abs=1e-12)
    assert p.item() == pytest.approx(0.86354, abs=1e-5)


def test_adamw_zero_grad_zero_decay():
    p = torch.tensor([0.3, -2.0], requires_grad=True)
    before = p.detach().clone()
    adamw_step({"p": p}, {"p": torch.zeros(2)}, AdamState(), 1e-3, weight_decay=0.0)
    assert torch.equal(p.detach(), before)


def test_adamw_decay_only():
    p = torch.tensor([2.0], dtype=torch.float64, requires_grad=True)
    adamw_step({"p": p}, {"p": torch.zeros(1, dtype=torch.float64)}, AdamState(), 0.1, weight_decay=0.5)
    assert p.item() == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)


def test_adamw_skips_frozen():
    p = torch.tensor([1.0], requires_grad=False)
    adamw_step({"p": p}, {"p": torch.ones(1)}, AdamState(), 1.0)
    assert p.item() == 1.0


def test_frozen_backbone_bit_identical_after_steps():
    model = init_params(ModelConfig(variant="II", image_size=16, patch_size=4, d_model=16, n_layers=2, n_heads=2))
    before = {k: v.detach().clone() for k, v in model.backbone_parameters().items()}
    lora_before = {k: v.detach().clone() for k, v in model.lora_parameters().items()}
    x, targets = tiny_batch(model)
    x = x.float()
    targets = {k: v.float() for k, v in targets.items()}
    state, params = AdamState(), dict(model.named_parameters())
    for _ in range(10):
        _, grads = backward(model, x, targets, DEFAULT_LOSS_WEIGHTS)
        adamw_step(params, grads, state, 1e-2)
    for k, v in model.backbone_parameters().items():
        assert torch.equal(v, before[k]), k
    assert any(not torch.equal(v, lora_before[k]) for k, v in model.lora_parameters().items())


# schedules -------------------------------------------------------------------


def test_plateau_decreasing_keeps_lr():
    s = PlateauScheduler(1e-4)
    assert {s.step(v) for v in [1.0, 0.9, 0.8, 0.7, 0.6, 0.5]} == {1e-4}


def test_plateau_single_drop():
    s = PlateauScheduler(1e-4, factor=0.1, patience=3)
    lrs = [s.step(1.0) for _ in range(4)]  # patience + 1 flat epochs
    assert lrs == [1e-4, 1e-4, 1e-4, 1e-4 * 0.1]
    assert lrs[-1] == pytest.approx(1e-5, rel=1e-15)


def test_plateau_reset_on_improvement():
    s = PlateauScheduler(1e-4, patience=3)
    lrs = [s.step(v) for v in [1.0, 1.0, 1.0, 0.5, 0.5, 0.5]]
    assert lrs == [1e-4] * 6


def test_plateau_min_delta_is_relative():
    s = PlateauScheduler(1.0, patience=1, min_delta=0.1)
    s.step(1.0)
    assert s.step(0.95) == 0.1  # 5% better does not beat a 10% threshold


def test_early_stop_after_patience():
    es = EarlyStopping(patience=5)
    trace = [1.0, 0.5] + [0.6] * 10
    stops = [es.step(v, i) for i, v in enumerate(trace, start=1)]
    assert stops.index(True) + 1 == 2 + 5
    assert es.best_epoch == 2


def test_run_schedule_trace():
    cfg = TrainConfig(lr=1e-4, plateau_patience=3, early_stop_patience=5)
    lrs, stop = run_schedule([1.0, 0.8] + [0.8] * 10, cfg)
    assert stop == 7
    assert lrs == [1e-4] * 4 + [1e-5, 1e-5, 1e-5]
    ratios = [b / a for a, b in zip(lrs, lrs[1:]) if b != a]
    assert ratios == [pytest.approx(0.1)]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(plateau_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(early_stop_patience=0)


# metrics ---------------------------------------------------------------------


def test_task_correlations_per_component_mean():
    y = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, 5.0]])
    p = np.array([[1.0, 5.0], [2.0, 1.0], [3.0, 0.0]])
    rho = task_correlations({"coords": p, "angle": y[:, :1]}, {"coords": y, "angle": y[:, :1]})
    expected = (1.0 + np.corrcoef(p[:, 1], y[:, 1])[0, 1]) / 2
    assert rho["coords"] == pytest.approx(expected, abs=1e-12)
    assert rho["angle"] == pytest.approx(1.0)
    assert math.isnan(task_correlations({"a": np.ones((3, 1))}, {"a": y[:, :1]})["a"])


def test_inference_time_stats():
    model = init_params(ModelConfig(image_size=16, patch_size=4, d_model=16, n_layers=1, n_heads=2))
    rows = measure_inference_time(model, (1, 4), repeats=5, warmup=1)
    assert [r["batch_size"] for r in rows] == [1, 4]
    for r in rows:
        assert r["q1_ms"] <= r["median_ms"] <= r["q3_ms"] and r["iqr_ms"] >= 0 and r["std_ms"] >= 0
        assert r["repeats"] == 5


# fit -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(GenConfig("II", 40, 5, root, image_size=32))
    return root


SMALL_MODEL = dict(variant="II", image_size=32, patch_size=8, d_model=32, n_layers=2, n_heads=2)


def test_split_deterministic_and_disjoint(small_data):
    ds = LineDataset.load(small_data, "II")
    tr, va = ds.split(0, 0.1)
    tr2, va2 = ds.split(0, 0.1)
    assert np.array_equal(tr, tr2) and np.array_equal(va, va2)
    assert len(va) == 4 and not set(tr) & set(va) and len(tr) + len(va) == 40
    assert not np.array_equal(ds.split(1, 0.1)[1], va)


def test_fit_lr_zero_constant_loss(small_data, tmp_path):
    cfg = TrainConfig(lr=0.0, max_epochs=3, weight_decay=0.0, batch_size=8)
    res = fit(small_data, ModelConfig(**SMALL_MODEL), cfg, tmp_path)
    losses = [m.train_loss for m in res.metrics]
    assert max(losses) - min(losses) <= 1e-6 * losses[0]
    assert len(set(m.val_loss for m in res.metrics)) == 1


def test_fit_overfit_smoke(tmp_path):
    root = tmp_path / "data"
    generate_dataset(GenConfig("II", 36, 1, root, image_size=32))
    ds = LineDataset.load(root, "II")
    mc = ModelConfig(**SMALL_MODEL, freeze_backbone=False, pos_embed="sincos")
    cfg = TrainConfig(lr=2e-3, max_epochs=300, batch_size=32, val_fraction=4 / 36, weight_decay=0.0,
                      plateau_patience=1000, early_stop_patience=1000)
    res = fit(root, mc, cfg, tmp_path / "run", dataset=ds)
    assert len(ds.split(0, cfg.val_fraction)[0]) == 32
    assert res.metrics[-1].train_loss < 0.05 * res.metrics[0].train_loss


def test_fit_outputs_and_determinism(small_data, tmp_path):
    cfg = TrainConfig(lr=1e-3, max_epochs=3, batch_size=8)
    a = fit(small_data, ModelConfig(**SMALL_MODEL), cfg, tmp_path / "a")
    b = fit(small_data, ModelConfig(**SMALL_MODEL), cfg, tmp_path / "b")
    assert [(m.train_loss, m.val_loss, m.lr, m.rho) for m in a.metrics] == \
           [(m.train_loss, m.val_loss, m.lr, m.rho) for m in b.metrics]
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert {"rho_angle", "rho_coords", "rho_noise", "rho_length", "inference_ms"} <= set(rows[0])
    assert all(-1 <= r["rho_angle"] <= 1 for r in rows)
    best_epoch = min(a.metrics, key=lambda m: m.val_loss).epoch
    _, extra, _ = load_checkpoint(a.best_checkpoint)
    assert extra["epoch"] == best_epoch


def test_fit_resume_continues(small_data, tmp_path):
    cfg4 = TrainConfig(lr=1e-3, max_epochs=4, batch_size=8, plateau_patience=1000, early_stop_patience=1000)
    cfg2 = TrainConfig(**{**cfg4.__dict__, "max_epochs": 2})
    full = fit(small_data, ModelConfig(**SMALL_MODEL), cfg4, tmp_path / "full")
    part = fit(small_data, ModelConfig(**SMALL_MODEL), cfg2, tmp_path / "part")
    resumed = fit(small_data, ModelConfig(**SMALL_MODEL), cfg4, tmp_path / "res", resume=part.last_checkpoint)
    key = lambda ms: [(m.epoch, m.train_loss, m.val_loss, m.lr) for m in ms]
    assert key(resumed.metrics) == key(full.metrics)


def test_fit_early_stop_soundness(small_data, tmp_path):
    cfg = TrainConfig(lr=0.0, max_epochs=20, batch_size=8, weight_decay=0.0, early_stop_patience=2)
    res = fit(small_data, ModelConfig(**SMALL_MODEL), cfg, tmp_path)
    # lr 0 means a flat val loss: best at epoch 1, stop two epochs later
    assert res.stopped_early and len(res.metrics) == 3


def test_fit_non_finite_loss(small_data, tmp_path):
    cfg = TrainConfig(lr=1e-3, max_epochs=1, batch_size=8, loss_weights={**DEFAULT_LOSS_WEIGHTS, "angle": float("nan")})
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        fit(small_data, ModelConfig(**SMALL_MODEL), cfg, tmp_path)


def test_fit_rejects_size_mismatch(small_data, tmp_path):
    with pytest.raises(ContractError):
        fit(small_data, ModelConfig(variant="II", image_size=64), TrainConfig(max_epochs=1), tmp_path)
