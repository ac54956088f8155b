"""Training-loop tests: AdamW recurrence, schedule pins, stochastic depth
statistics, and end-to-end determinism on the micro model.

Expected values in the oracle section are hand-derived from the update rule
and frozen; they must not be regenerated from the implementation.
"""

import numpy as np
import pytest

from nestvit import tensor as T
from nestvit.model import NestConfig, drop_path, forward, init_params
from nestvit.tensor import Tensor
from nestvit.training import (
    AdamWState,
    TrainConfig,
    adamw_step,
    augment_batch,
    evaluate,
    init_adamw,
    iterate_batches,
    lr_schedule,
    train,
    zero_grads,
)


def micro_config(**kw) -> NestConfig:
    base = dict(image_size=16, patch_size=2, num_classes=4,
                dims=(8, 8), heads=(2, 2), repeats=(1, 1))
    base.update(kw)
    return NestConfig(**base)


def leaf(value, grad=None) -> Tensor:
    t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    if grad is not None:
        t.grad = np.asarray(grad, dtype=np.float64)
    return t


# ---------------------------------------------------------------------------
# oracles: AdamW single-step hand recurrence
# ---------------------------------------------------------------------------
# w=1, g=1, lr=0.1, betas=(0.9, 0.999), eps=1e-8:
#   m = 0.1          -> mhat = m / (1 - 0.9)   = 1
#   v = 0.001        -> vhat = v / (1 - 0.999) = 1
#   step = lr * 1 / (1 + 1e-8) = 0.099999999
#   no decay:   w' = 1 - 0.099999999          ~= 0.9
#   decay 0.05: w' = w'_nodecay - 0.1*0.05*1  ~= 0.895
# g=0: moments stay zero, so the update is decay only: w' = w * (1 - lr*wd).


def test_adamw_first_step_matches_hand_value():
    p = {"w": leaf(1.0, grad=1.0)}
    st = init_adamw(p)
    adamw_step(p, st, lr=0.1, weight_decay=0.0)
    assert p["w"].data == pytest.approx(0.9, abs=1e-6)
    # eps slightly shrinks the step, so we land a hair above 0.9
    assert p["w"].data > 0.9
    assert st.step == 1


def test_adamw_first_step_with_decay():
    p = {"w": leaf(1.0, grad=1.0)}
    adamw_step(p, init_adamw(p), lr=0.1, weight_decay=0.05)
    assert p["w"].data == pytest.approx(0.895, abs=1e-6)


def test_adamw_decay_only_shrinks_weight_exactly():
    p = {"w": leaf(2.0, grad=0.0)}
    adamw_step(p, init_adamw(p), lr=0.1, weight_decay=0.05)
    assert p["w"].data == pytest.approx(2.0 * (1 - 0.1 * 0.05), rel=1e-12)


def test_adamw_zero_grad_zero_decay_is_identity():
    p = {"w": leaf([1.5, -2.0, 0.25], grad=[0.0, 0.0, 0.0])}
    before = p["w"].data.copy()
    adamw_step(p, init_adamw(p), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"].data, before)


def test_adamw_matches_reference_recurrence_over_steps():
    rng = np.random.default_rng(3)
    w0 = rng.standard_normal(5)
    grads = rng.standard_normal((6, 5))
    lr, wd, b1, b2, eps = 0.03, 0.05, 0.9, 0.999, 1e-8

    p = {"w": leaf(w0)}
    st = init_adamw(p)
    for g in grads:
        p["w"].grad = g.copy()
        adamw_step(p, st, lr=lr, weight_decay=wd)

    # independent functional replay of the recurrence
    w, m, v = w0.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps) \
            - lr * wd * w
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-12)


def test_adamw_rejects_nonfinite_gradients_with_step_index():
    p = {"w": leaf(1.0, grad=np.nan)}
    st = init_adamw(p)
    with pytest.raises(FloatingPointError, match="'w' at step 0"):
        adamw_step(p, st, lr=0.1)
    # state.step is only advanced by successful updates
    assert st.step == 0

    p = {"w": leaf(1.0, grad=1.0)}
    st = init_adamw(p)
    adamw_step(p, st, lr=0.1)
    p["w"].grad = np.array(np.inf)
    with pytest.raises(FloatingPointError, match="at step 1"):
        adamw_step(p, st, lr=0.1)


def test_adamw_requires_gradients():
    p = {"w": leaf(1.0)}
    with pytest.raises(ValueError, match="no gradient"):
        adamw_step(p, init_adamw(p), lr=0.1)


def test_zero_grads_clears_every_parameter():
    p = {"a": leaf(1.0, grad=1.0), "b": leaf(2.0, grad=2.0)}
    zero_grads(p)
    assert p["a"].grad is None and p["b"].grad is None


# ---------------------------------------------------------------------------
# oracles: schedule (total=11 steps, warmup=4, peak=1 gives round numbers)
#   step 0 -> 0, step 2 -> 0.5, step 4 -> 1, step 7 -> 0.5, step 10 -> 0
# ---------------------------------------------------------------------------


def test_schedule_frozen_points():
    pins = {0: 0.0, 2: 0.5, 4: 1.0, 7: 0.5, 10: 0.0}
    for step, want in pins.items():
        got = lr_schedule(step, total_steps=11, peak_lr=1.0, warmup_steps=4)
        assert got == pytest.approx(want, abs=1e-12), f"step {step}"


def test_schedule_endpoints_general():
    peak, total, warm = 3e-3, 137, 19
    assert lr_schedule(0, total, peak, warm) == 0.0
    assert lr_schedule(warm, total, peak, warm) == pytest.approx(peak, rel=1e-12)
    final = lr_schedule(total - 1, total, peak, warm)
    assert abs(final) < 1e-3 * peak
    assert final == pytest.approx(0.0, abs=1e-15)


def test_schedule_shape():
    peak, total, warm = 1.0, 50, 10
    lrs = [lr_schedule(s, total, peak, warm) for s in range(total)]
    assert all(b > a for a, b in zip(lrs[:warm], lrs[1:warm + 1]))
    assert all(b < a for a, b in zip(lrs[warm:], lrs[warm + 1:]))
    assert max(lrs) == pytest.approx(peak)


def test_schedule_without_warmup_starts_at_peak():
    assert lr_schedule(0, 10, 2.0, warmup_steps=0) == pytest.approx(2.0)


def test_schedule_single_step_run():
    assert lr_schedule(0, 1, 1.0, warmup_steps=0) == pytest.approx(1.0)


def test_schedule_rejects_bad_arguments():
    with pytest.raises(ValueError):
        lr_schedule(5, 5, 1.0, 2)
    with pytest.raises(ValueError):
        lr_schedule(-1, 5, 1.0, 2)
    with pytest.raises(ValueError):
        lr_schedule(0, 0, 1.0, 0)


# ---------------------------------------------------------------------------
# stochastic depth
# ---------------------------------------------------------------------------


def test_drop_path_eval_and_zero_prob_are_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
    assert drop_path(x, 0.5, training=False, rng=None) is x
    assert drop_path(x, 0.0, training=True, rng=None) is x


def test_drop_path_training_needs_rng():
    x = Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError, match="rng"):
        drop_path(x, 0.3, training=True, rng=None)


def test_drop_path_rows_are_kept_or_zeroed_exactly():
    rng = np.random.default_rng(5)
    a = np.random.default_rng(1).standard_normal((64, 7)).astype(np.float32)
    out = drop_path(Tensor(a), 0.5, training=True, rng=rng).data
    kept = dropped = 0
    for i in range(64):
        if np.array_equal(out[i], a[i]):
            kept += 1
        else:
            np.testing.assert_array_equal(out[i], np.zeros(7, np.float32))
            dropped += 1
    assert kept > 0 and dropped > 0   # p=0.5 over 64 rows


def test_drop_path_expectation_matches_unscaled_mixture():
    # Residual y = x + droppath(a): over many draws the mean output must sit
    # at (1-p)*(x+a) + p*x -- i.e. no 1/(1-p) rescale -- within 3 standard
    # errors of the Monte-Carlo estimate.
    p = 0.3
    gen = np.random.default_rng(11)
    x = np.random.default_rng(2).standard_normal((8, 5))
    a = np.abs(np.random.default_rng(3).standard_normal((8, 5))) + 0.5
    xt, at = Tensor(x), Tensor(a)

    draws = np.empty(1000)
    for k in range(1000):
        y = T.add(xt, drop_path(at, p, training=True, rng=gen))
        draws[k] = y.data.mean()
    expected = ((1 - p) * (x + a) + p * x).mean()
    se = draws.std(ddof=1) / np.sqrt(len(draws))
    assert abs(draws.mean() - expected) < 3 * se


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------


def test_augment_none_is_passthrough():
    x = np.random.default_rng(0).standard_normal((4, 16, 16, 3)).astype(np.float32)
    assert augment_batch(x, "none", np.random.default_rng(0)) is x


def test_augment_rejects_unknown_mode():
    with pytest.raises(ValueError, match="blur"):
        augment_batch(np.zeros((1, 4, 4, 3), np.float32), "blur",
                      np.random.default_rng(0))


def test_augment_output_is_flip_and_crop_of_padded_input():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((10, 16, 16, 3)).astype(np.float32)
    out = augment_batch(x, "flip_crop", np.random.default_rng(42))
    assert out.shape == x.shape and out.dtype == x.dtype
    padded = np.pad(x, ((0, 0), (4, 4), (4, 4), (0, 0)))
    for i in range(10):
        matches = 0
        for dy in range(9):
            for dx in range(9):
                crop = padded[i, dy:dy + 16, dx:dx + 16]
                for cand in (crop, crop[:, ::-1]):
                    if np.array_equal(out[i], cand):
                        matches += 1
        assert matches >= 1, f"sample {i} is not a flip/crop of its input"


def test_augment_is_deterministic_given_seed():
    x = np.random.default_rng(1).standard_normal((6, 16, 16, 3)).astype(np.float32)
    a = augment_batch(x, "flip_crop", np.random.default_rng(9))
    b = augment_batch(x, "flip_crop", np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_augment_produces_both_flipped_and_unflipped_samples():
    x = np.arange(2 * 16 * 16 * 3, dtype=np.float32).reshape(2, 16, 16, 3)
    x = np.tile(x, (16, 1, 1, 1))[:32]
    out = augment_batch(x, "flip_crop", np.random.default_rng(0))
    assert not np.array_equal(out, x)


def test_iterate_batches_covers_indices_once():
    seen = [idx for idx in iterate_batches(10, 4, rng=None)]
    assert [len(b) for b in seen] == [4, 4, 2]
    np.testing.assert_array_equal(np.concatenate(seen), np.arange(10))

    shuffled = np.concatenate(list(iterate_batches(10, 4, np.random.default_rng(0))))
    assert sorted(shuffled.tolist()) == list(range(10))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def test_evaluate_rejects_empty_set():
    cfg = micro_config()
    params = init_params(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError, match="empty"):
        evaluate(params, cfg, np.zeros((0, 16, 16, 3), np.float32),
                 np.zeros(0, np.int64))


def test_evaluate_constant_model_scores_label_frequency():
    cfg = micro_config()
    params = init_params(cfg, np.random.default_rng(0))
    for t in params.values():
        t.data[...] = 0.0
    params["head.b"].data[...] = np.array([0, 1, 0, 0], np.float32)
    images = np.random.default_rng(1).standard_normal((4, 16, 16, 3)).astype(np.float32)
    labels = np.array([1, 1, 0, 2])
    assert evaluate(params, cfg, images, labels) == pytest.approx(0.5)


def test_evaluate_batch_size_does_not_change_result():
    cfg = micro_config()
    params = init_params(cfg, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    images = rng.standard_normal((7, 16, 16, 3)).astype(np.float32)
    labels = rng.integers(0, 4, 7)
    assert evaluate(params, cfg, images, labels, batch=3) == \
        evaluate(params, cfg, images, labels, batch=256)


# ---------------------------------------------------------------------------
# optimization behaviour on the micro model
# ---------------------------------------------------------------------------


def _toy_batch(n=16, seed=0):
    """Random images with a class-dependent brightness offset so there is
    signal to fit quickly."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, n)
    images = rng.standard_normal((n, 16, 16, 3)).astype(np.float32) * 0.5
    images += labels[:, None, None, None].astype(np.float32) * 0.3 - 0.45
    return images, labels


def test_ten_steps_reduce_smoothed_loss():
    cfg = micro_config()
    params = init_params(cfg, np.random.default_rng(0))
    images, labels = _toy_batch()
    state = init_adamw(params)
    losses = []
    for _ in range(10):
        zero_grads(params)
        out = forward(params, cfg, images)
        loss = T.cross_entropy(out.logits, labels, label_smoothing=0.1)
        loss.backward()
        adamw_step(params, state, lr=3e-3, weight_decay=0.05)
        losses.append(loss.item())
    smoothed = np.convolve(losses, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smoothed) < 0), f"losses {losses}"
    assert losses[-1] < losses[0]


def test_train_is_deterministic_for_a_seed_and_seed_sensitive():
    cfg = micro_config(drop_path_rate=0.1)
    tcfg = TrainConfig(base_lr=5e-5, total_batch_size=8, warmup_epochs=1,
                       total_epochs=3, augment="flip_crop", seed=123)
    images, labels = _toy_batch(n=8, seed=2)

    def run(seed):
        params = init_params(cfg, np.random.default_rng(0))
        t = TrainConfig(**{**tcfg.__dict__, "seed": seed})
        hist = train(params, cfg, t, images, labels)
        return hist, {k: v.data.copy() for k, v in params.items()}

    h1, p1 = run(123)
    h2, p2 = run(123)
    assert h1 == h2
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])

    h3, _ = run(321)
    assert h3 != h1


def test_train_history_rows_and_callback():
    cfg = micro_config()
    tcfg = TrainConfig(base_lr=5e-5, total_batch_size=8, warmup_epochs=1,
                       total_epochs=2, seed=0)
    images, labels = _toy_batch(n=8, seed=3)
    seen = []
    hist = train(params=init_params(cfg, np.random.default_rng(0)), cfg=cfg,
                 tcfg=tcfg, train_images=images, train_labels=labels,
                 eval_images=images, eval_labels=labels,
                 on_epoch=seen.append)
    assert len(hist) == 2 and seen == hist
    assert list(hist[0]) == ["epoch", "lr", "train_loss", "train_acc", "eval_acc"]
    assert hist[0]["epoch"] == 0 and hist[1]["epoch"] == 1
    # 8 samples, batch 8 -> 1 step/epoch, 1 warmup epoch: first step has lr 0
    assert hist[0]["lr"] == 0.0
    assert hist[1]["lr"] == pytest.approx(tcfg.peak_lr)
    assert 0.0 <= hist[0]["eval_acc"] <= 1.0


def test_train_config_validation():
    with pytest.raises(ValueError, match="warmup"):
        TrainConfig(warmup_epochs=5, total_epochs=3).validate()
    with pytest.raises(ValueError, match="label_smoothing"):
        TrainConfig(label_smoothing=1.0).validate()
    with pytest.raises(ValueError, match="augment"):
        TrainConfig(augment="cutmix").validate()
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0.0).validate()
    assert TrainConfig().peak_lr == pytest.approx(2.5e-6 * 64)
