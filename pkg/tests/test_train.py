import math

import numpy as np
import pytest

from mapseg.dataset import Patch, center_patch
from mapseg.errors import LabelOutOfRange, NonFiniteGradient, SpecMismatch
from mapseg.net import (
    build_desk_network,
    net_forward,
    save_checkpoint,
    softmax,
)
from mapseg.train import (
    DESK_LR0,
    FULL_SCALE_LR0,
    HistoryPoint,
    OptimizerState,
    TrainConfig,
    TrainHistory,
    desk_config,
    evaluate_f1,
    fine_tune,
    multinomial_loss,
    sgd_momentum_step,
    train_loop,
)


def make_patch(seed=0, size=32, split="train"):
    rng = np.random.default_rng(seed)
    labels = np.zeros((size, size), dtype=np.uint8)
    labels[size // 2 - 4 : size // 2 + 4, :] = 2
    labels[4 : size // 4 + 4, 4 : size // 4 + 4] = 1
    palette = {0: (90, 140, 80), 1: (180, 60, 50), 2: (70, 70, 75)}
    img = np.empty((3, size, size))
    for k, color in palette.items():
        for c in range(3):
            img[c][labels == k] = color[c]
    img = np.clip(np.round(img + rng.normal(0, 6, img.shape)), 0, 255)
    return Patch(image=img, labels=labels, origin_px=(0, 0), split_tag=split)


# ---------------------------------------------------------------------------
# loss


def test_uniform_probs_loss_ln3():
    probs = np.full((3, 1, 1), 1.0 / 3.0)
    loss, grad = multinomial_loss(probs, np.array([[1]]))
    assert loss == pytest.approx(math.log(3.0), abs=1e-12)
    assert grad.shape == (3, 1, 1)


def test_perfect_probs_zero_loss():
    probs = np.zeros((3, 2, 2))
    labels = np.array([[0, 1], [2, 0]])
    for y in range(2):
        for x in range(2):
            probs[labels[y, x], y, x] = 1.0
    loss, grad = multinomial_loss(probs, labels)
    assert loss == 0.0
    assert np.abs(grad).max() == 0.0


def test_loss_matches_per_pixel_summation_oracle():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(3, 4, 4))
    probs = softmax(scores)
    labels = rng.integers(0, 3, size=(4, 4))
    loss, grad = multinomial_loss(probs, labels)
    oracle_loss = 0.0
    oracle_grad = probs.copy()
    for y in range(4):
        for x in range(4):
            oracle_loss += -math.log(probs[labels[y, x], y, x])
            oracle_grad[labels[y, x], y, x] -= 1.0
    assert loss == pytest.approx(oracle_loss, abs=1e-12)
    assert np.abs(grad - oracle_grad).max() < 1e-12


def test_loss_gradient_matches_finite_differences_through_softmax():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=(3, 3, 3))
    labels = rng.integers(0, 3, size=(3, 3))
    _, grad = multinomial_loss(softmax(scores), labels)
    eps = 1e-5
    for idx in [(0, 0, 0), (1, 2, 1), (2, 1, 2)]:
        orig = scores[idx]
        scores[idx] = orig + eps
        hi, _ = multinomial_loss(softmax(scores), labels)
        scores[idx] = orig - eps
        lo, _ = multinomial_loss(softmax(scores), labels)
        scores[idx] = orig
        fd = (hi - lo) / (2 * eps)
        assert abs(grad[idx] - fd) < 1e-6 * max(1.0, abs(fd))


def test_loss_label_out_of_range():
    with pytest.raises(LabelOutOfRange):
        multinomial_loss(np.full((3, 1, 1), 1 / 3), np.array([[5]]))


# ---------------------------------------------------------------------------
# optimizer


def make_state(params, lr):
    return OptimizerState(velocity={k: np.zeros_like(v) for k, v in params.items()}, lr_current=lr)


def test_sgd_plain_step():
    params = {"w.weight": np.array([1.0])}
    grads = {"w.weight": np.array([2.0])}
    cfg = TrainConfig(lr0=0.1, momentum=0.0, weight_decay=0.0)
    state = make_state(params, 0.1)
    sgd_momentum_step(params, grads, state, cfg)
    assert params["w.weight"][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_gradient_zero_velocity_noop():
    params = {"w.weight": np.array([3.0]), "w.bias": np.array([1.0])}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    cfg = TrainConfig(lr0=0.1, momentum=0.9, weight_decay=0.0)
    state = make_state(params, 0.1)
    sgd_momentum_step(params, grads, state, cfg)
    assert params["w.weight"][0] == 3.0 and params["w.bias"][0] == 1.0


def test_sgd_matches_scalar_recurrence():
    # quadratic f(w) = 0.5*w^2, grad = w; momentum recurrence by hand
    lr, mom = 0.1, 0.9
    cfg = TrainConfig(lr0=lr, momentum=mom, weight_decay=0.0)
    params = {"w.weight": np.array([1.0])}
    state = make_state(params, lr)
    w_ref, v_ref = 1.0, 0.0
    for _ in range(3):
        g = w_ref
        sgd_momentum_step(params, {"w.weight": np.array([params["w.weight"][0]])}, state, cfg)
        v_ref = mom * v_ref - lr * g
        w_ref = w_ref + v_ref
        assert params["w.weight"][0] == pytest.approx(w_ref, abs=1e-12)


def test_weight_decay_skips_biases():
    params = {"l.weight": np.array([2.0]), "l.bias": np.array([2.0])}
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    cfg = TrainConfig(lr0=0.1, momentum=0.0, weight_decay=0.5)
    state = make_state(params, 0.1)
    sgd_momentum_step(params, grads, state, cfg)
    assert params["l.weight"][0] < 2.0  # decayed
    assert params["l.bias"][0] == 2.0  # untouched


def test_bias_lr_doubled():
    params = {"l.weight": np.array([0.0]), "l.bias": np.array([0.0])}
    grads = {"l.weight": np.array([1.0]), "l.bias": np.array([1.0])}
    cfg = TrainConfig(lr0=0.1, momentum=0.0, weight_decay=0.0, bias_lr_multiplier=2.0)
    state = make_state(params, 0.1)
    sgd_momentum_step(params, grads, state, cfg)
    assert params["l.bias"][0] == pytest.approx(2 * params["l.weight"][0], abs=1e-15)


def test_non_finite_gradient_aborts():
    params = {"l.weight": np.array([1.0])}
    grads = {"l.weight": np.array([np.nan])}
    cfg = TrainConfig(lr0=0.1)
    with pytest.raises(NonFiniteGradient):
        sgd_momentum_step(params, grads, make_state(params, 0.1), cfg)


# ---------------------------------------------------------------------------
# config and history


def test_config_defaults_match_published_schedule():
    cfg = TrainConfig()
    assert cfg.lr0 == FULL_SCALE_LR0 == 5e-9
    assert cfg.momentum == 0.9
    assert cfg.weight_decay == 5e-4
    assert cfg.bias_lr_multiplier == 2.0
    assert cfg.dropout_rate == 0.5
    assert cfg.lr_drop_factor == 10 and cfg.max_lr_drops == 2
    assert DESK_LR0 == pytest.approx(5e-9 * (500 / 64) ** 2)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0.0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)


def test_history_strictly_increasing():
    h = TrainHistory()
    h.append(HistoryPoint(10, 1.0, 0.5, 1e-3))
    with pytest.raises(ValueError):
        h.append(HistoryPoint(10, 1.0, 0.5, 1e-3))


def test_history_csv_round_trip(tmp_path):
    h = TrainHistory()
    h.append(HistoryPoint(25, 123.456, 0.789, 3.05e-7))
    h.append(HistoryPoint(50, 12.3, 0.91, 3.05e-8))
    h.write_csv(tmp_path / "history.csv")
    h2 = TrainHistory.read_csv(tmp_path / "history.csv")
    assert h2 == h


# ---------------------------------------------------------------------------
# training loop


def small_net(seed=0):
    return build_desk_network(32, channels=(6, 12), head_channels=16, seed=seed)


def test_overfit_single_patch_quickly():
    p = make_patch(0)
    val = make_patch(0, split="val")
    net = small_net(1)
    cfg = desk_config(max_iterations=200, eval_interval=25, seed=1)
    best, hist, _ = train_loop(net, [p, val], cfg)
    probs, _ = net_forward(best, center_patch(p))
    acc = (probs.argmax(0) == p.labels).mean()
    assert acc > 0.95
    assert [pt.iteration for pt in hist.points] == sorted(pt.iteration for pt in hist.points)


def test_lr_schedule_drops_twice_then_stops():
    # force permanent stall: min_f1_gain so high nothing ever "improves"
    p = make_patch(2)
    val = make_patch(2, split="val")
    net = small_net(2)
    cfg = desk_config(
        max_iterations=10_000,
        eval_interval=5,
        patience=2,
        min_f1_gain=2.0,
        seed=2,
    )
    _, hist, _ = train_loop(net, [p, val], cfg)
    lrs = [pt.lr for pt in hist.points]
    distinct = sorted(set(lrs), reverse=True)
    assert len(distinct) == 3
    assert distinct[0] == pytest.approx(cfg.lr0)
    assert distinct[1] == pytest.approx(cfg.lr0 / 10)
    assert distinct[2] == pytest.approx(cfg.lr0 / 100)
    # first eval improves over -inf, then 2 evals per stall: 2 drops + stop
    assert len(hist.points) == 7


def test_train_loop_deterministic():
    patches = [make_patch(3), make_patch(5), make_patch(3, split="val")]
    cfg = desk_config(max_iterations=50, eval_interval=10, seed=9)
    net_a, hist_a, _ = train_loop(build_desk_network(32, channels=(6, 12), head_channels=16, seed=7), patches, cfg)
    net_b, hist_b, _ = train_loop(build_desk_network(32, channels=(6, 12), head_channels=16, seed=7), patches, cfg)
    assert hist_a == hist_b
    for k in net_a.params:
        assert np.array_equal(net_a.params[k], net_b.params[k])


def test_fine_tune_zero_iterations_identity(tmp_path):
    patches = [make_patch(6), make_patch(6, split="val")]
    net = small_net(3)
    cfg = desk_config(max_iterations=30, eval_interval=10, seed=3)
    best, _, path = train_loop(net, patches, cfg, checkpoint_dir=tmp_path / "ck")
    tuned, _, _ = fine_tune(tmp_path / "ck", patches, desk_config(max_iterations=0, seed=3))
    for k in best.params:
        assert np.array_equal(tuned.params[k], best.params[k])


def test_fine_tune_spec_mismatch(tmp_path):
    patches = [make_patch(7), make_patch(7, split="val")]
    net = small_net(4)
    cfg = desk_config(max_iterations=10, eval_interval=10, seed=4)
    train_loop(net, patches, cfg, checkpoint_dir=tmp_path / "ck")
    other = build_desk_network(32, channels=(4, 8), head_channels=8).spec
    with pytest.raises(SpecMismatch):
        fine_tune(tmp_path / "ck", patches, cfg, expected_spec=other)


def test_fine_tune_resumes_with_lower_initial_loss(tmp_path):
    # pre-train on a set, then compare iteration-0 loss of resumed vs fresh
    patches = [make_patch(8), make_patch(8, split="val")]
    p = patches[0]
    cfg = desk_config(max_iterations=150, eval_interval=25, seed=8)
    pre, _, _ = train_loop(small_net(5), patches, cfg, checkpoint_dir=tmp_path / "ck")

    fresh = small_net(5)
    x = center_patch(p)
    fresh_loss, _ = multinomial_loss(net_forward(fresh, x)[0], p.labels)
    resumed_loss, _ = multinomial_loss(net_forward(pre, x)[0], p.labels)
    assert resumed_loss <= fresh_loss


def test_evaluate_f1_perfect_prediction_patchset():
    # network output compared against its own argmax labels gives F1 1.0
    net = small_net(6)
    rng = np.random.default_rng(10)
    img = np.clip(np.round(rng.uniform(0, 255, (3, 32, 32))), 0, 255)
    p = Patch(image=img, labels=np.zeros((32, 32), dtype=np.uint8), origin_px=(0, 0), split_tag="val")
    probs, _ = net_forward(net, center_patch(p))
    p.labels = probs.argmax(0).astype(np.uint8)
    f1, cs = evaluate_f1(net, [p])
    present = [k for k in range(3) if (p.labels == k).any()]
    for k in present:
        assert cs.f1[k] == 1.0
