import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavseg.core import ClassMask, PlaneImage, flip_horizontal, softmax
from uavseg.model import make_config
from uavseg.synthetic import blob_dataset
from uavseg.train import (
    CONTINUE,
    STOP,
    EarlyStopState,
    NonFiniteGradientError,
    OptimizerState,
    TrainConfig,
    UndefinedLossError,
    adamw_step,
    adjust_brightness_contrast,
    build_augmenter,
    clahe,
    cross_entropy_loss,
    dice_loss,
    early_stop_update,
    hybrid_loss,
    normalize,
    poly_lr,
    train_loop,
)
from uavseg.train.augment import clahe_luma, rgb_to_ycbcr, ycbcr_to_rgb


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def max_rel(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# ---------------------------------------------------------------------------
# augmentation

def test_normalize_examples():
    img = PlaneImage(np.array([[[0.708, 0.456, 0.406]]]))
    out = normalize(img).data[0, 0]
    assert out[0] == pytest.approx(0.9738, abs=1e-4)
    assert out[1] == pytest.approx(0.0) and out[2] == pytest.approx(0.0)
    x = PlaneImage(np.random.default_rng(0).random((3, 4, 3)))
    np.testing.assert_allclose(normalize(x, (0, 0, 0), (1, 1, 1)).data, x.data)
    with pytest.raises(ValueError):
        normalize(x, std=(0.2, 0.0, 0.2))
    assert normalize(PlaneImage(np.zeros((2, 2, 3), np.float32))).data.dtype == np.float32


def test_brightness_contrast_examples():
    x = PlaneImage(np.random.default_rng(0).random((4, 4, 3)))
    np.testing.assert_allclose(adjust_brightness_contrast(x, 0, 0).data, x.data)
    assert np.all(adjust_brightness_contrast(x, 1, 0).data == 1.0)
    v = adjust_brightness_contrast(PlaneImage(np.full((1, 1, 3), 0.25)), 0, 0.2).data
    np.testing.assert_allclose(v, 0.2)


def test_ycbcr_round_trip(rng):
    rgb = rng.random((5, 6, 3))
    np.testing.assert_allclose(ycbcr_to_rgb(*rgb_to_ycbcr(rgb)), rgb, atol=1e-12)


def test_clahe_constant_image_stays_constant():
    out = clahe(PlaneImage(np.full((32, 40, 3), 0.3))).data
    assert np.ptp(out.reshape(-1, 3), axis=0).max() == 0


def test_clahe_single_tile_unclipped_is_global_equalization(rng):
    y = rng.random((30, 41)) ** 2
    bins = [int(math.floor(v * 255 + 0.5)) for v in y.ravel()]
    counts = [0] * 256
    for b in bins:
        counts[b] += 1
    cdf, acc = [], 0
    for c in counts:
        acc += c
        cdf.append(acc / len(bins))
    ref = np.array([cdf[b] for b in bins]).reshape(y.shape)
    np.testing.assert_allclose(clahe_luma(y, math.inf, (1, 1)), ref, atol=1e-12)


def test_clahe_range_chroma_and_errors(rng):
    img = PlaneImage(rng.random((24, 24, 3)) * 0.5 + 0.25)
    out = clahe(img, 2.0, 4).data
    assert out.min() >= 0 and out.max() <= 1
    _, cb0, cr0 = rgb_to_ycbcr(img.data.astype(np.float64))
    _, cb1, cr1 = rgb_to_ycbcr(out.astype(np.float64))
    inside = np.all((out > 0) & (out < 1), axis=-1)
    np.testing.assert_allclose(cb1[inside], cb0[inside], atol=1e-6)
    np.testing.assert_allclose(cr1[inside], cr0[inside], atol=1e-6)
    with pytest.raises(ValueError):
        clahe(PlaneImage(np.zeros((4, 4, 3))), 2.0, 8)


def test_clahe_clip_limit_bounds_contrast(rng):
    y = np.clip(0.5 + 0.02 * rng.standard_normal((64, 64)), 0, 1)
    strong = clahe_luma(y, math.inf, (2, 2))
    mild = clahe_luma(y, 1.0, (2, 2))
    assert np.ptp(mild) < np.ptp(strong)


def samples(n=6, size=32, seed=0):
    return blob_dataset(n, size, seed)


def test_augmenter_determinism_and_identity():
    cfg = TrainConfig(seed=3)
    img, mask = samples(1)[0]
    aug = build_augmenter(cfg)
    a = aug(img, mask, index=5, epoch=2)
    b = build_augmenter(cfg)(img, mask, index=5, epoch=2)
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)
    off = TrainConfig(p_flip=0, p_brightness_contrast=0, p_clahe=0)
    x, m = build_augmenter(off)(img, mask, index=0)
    np.testing.assert_array_equal(x.data, normalize(img).data)
    np.testing.assert_array_equal(m.data, mask.data)


def test_augmenter_flip_is_joint_and_preserves_histogram():
    cfg = TrainConfig(p_flip=1.0, p_brightness_contrast=0, p_clahe=0)
    img, mask = samples(1)[0]
    x, m = build_augmenter(cfg)(img, mask, index=0)
    np.testing.assert_array_equal(m.data, flip_horizontal(mask).data)
    np.testing.assert_array_equal(x.data, normalize(flip_horizontal(img)).data)
    full = build_augmenter(TrainConfig(p_flip=0.5, p_clahe=1.0))
    for i in range(8):
        _, m2 = full(img, mask, index=i)
        np.testing.assert_array_equal(np.bincount(m2.data.ravel()), np.bincount(mask.data.ravel()))


# ---------------------------------------------------------------------------
# losses

def random_case(rng, k=3, shape=(4, 4)):
    z = rng.standard_normal(shape + (k,))
    t = rng.integers(0, k, shape).astype(np.uint8)
    t[0, 0] = 255
    return z, t


def test_cross_entropy_examples():
    t = np.array([[0, 1]], dtype=np.uint8)
    z = np.array([[[50.0, -50.0], [-50.0, 50.0]]])
    assert cross_entropy_loss(z, t)[0] == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy_loss(np.zeros((1, 2, 2)), t)[0] == pytest.approx(math.log(2))
    with pytest.raises(UndefinedLossError):
        cross_entropy_loss(np.zeros((1, 2, 2)), np.full((1, 2), 255, np.uint8))


def test_cross_entropy_gradient(rng):
    z, t = random_case(rng)
    _, g = cross_entropy_loss(z, t)
    assert max_rel(g, fd_grad(lambda v: cross_entropy_loss(v, t)[0], z.copy())) <= 1e-5
    assert g[0, 0].max() == 0 and g[0, 0].min() == 0


def test_dice_examples():
    p = np.zeros((1, 4, 2))
    p[..., 0] = 1
    assert dice_loss(p, np.zeros((1, 4), np.uint8))[0] == pytest.approx(0.0)
    for n in (1, 3, 5):
        t = np.array([[0] * n + [1] * n], dtype=np.uint8)
        q = np.zeros((1, 2 * n, 2))
        q[0, :n, 1] = 1
        q[0, n:, 0] = 1
        assert dice_loss(q, t)[0] == pytest.approx(1 - 1 / (2 * n + 1))


def test_dice_gradient_and_range(rng):
    z, t = random_case(rng, k=4)
    p = softmax(z)
    loss, g = dice_loss(p, t)
    assert 0 <= loss <= 1
    assert max_rel(g, fd_grad(lambda v: dice_loss(v, t)[0], p.copy())) <= 1e-5


def test_hybrid_properties(rng):
    z, t = random_case(rng)
    ce, gce = cross_entropy_loss(z, t)
    d, _ = dice_loss(softmax(z), t)
    hl, g = hybrid_loss(z, t)
    assert hl == ce + d
    h0, g0 = hybrid_loss(z, t, dice_weight=0.0)
    assert h0 == ce and np.array_equal(g0, gce)
    assert max_rel(g, fd_grad(lambda v: hybrid_loss(v, t)[0], z.copy())) <= 1e-5
    perfect = np.where(np.eye(3, dtype=bool)[np.where(t == 255, 0, t)], 40.0, -40.0)
    assert hybrid_loss(perfect, t)[0] == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------------------
# optimization

def test_poly_lr_examples():
    cfg = TrainConfig()
    assert poly_lr(0, 1000, cfg) == pytest.approx(1e-4)
    assert poly_lr(1000, 1000, cfg) == pytest.approx(1e-7)
    assert poly_lr(500, 1000, cfg) == pytest.approx(5.005e-5)
    with pytest.raises(ValueError):
        poly_lr(1001, 1000, cfg)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.floats(0.1, 3.0))
def test_poly_lr_monotone(total, power):
    cfg = TrainConfig(poly_power=power)
    lrs = [poly_lr(s, total, cfg) for s in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamw_decay_only_path():
    p = {"w": np.ones((2, 2)), "b": np.ones(2)}
    adamw_step(p, {"w": np.zeros((2, 2)), "b": np.zeros(2)}, OptimizerState(), lr=1e-4, weight_decay=0.01)
    np.testing.assert_allclose(p["w"], 0.999999, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(p["b"], 1.0)


def test_adamw_first_step_magnitude():
    for g in (1e-3, 0.5, -20.0):
        p = {"w": np.zeros((3, 3))}
        adamw_step(p, {"w": np.full((3, 3), g)}, OptimizerState(), lr=1e-3, weight_decay=0.0)
        np.testing.assert_allclose(p["w"], -np.sign(g) * 1e-3, rtol=1e-4)


def test_adamw_deterministic_and_rejects_non_finite(rng):
    grads = [{"w": rng.standard_normal((4, 4))} for _ in range(5)]
    runs = []
    for _ in range(2):
        p, st_ = {"w": np.ones((4, 4))}, OptimizerState()
        for g in grads:
            adamw_step(p, g, st_, 1e-3)
        runs.append(p["w"])
    np.testing.assert_array_equal(*runs)
    with pytest.raises(NonFiniteGradientError, match="w"):
        adamw_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, OptimizerState(), 1e-3)


def test_early_stop_examples():
    s = EarlyStopState(patience=20)
    seq = [1.0, 0.9] + [0.95] * 19
    assert all(early_stop_update(s, v) == CONTINUE for v in seq)
    assert early_stop_update(s, 0.9) == STOP
    assert s.best_epoch == 2 and s.best_metric == 0.9
    s = EarlyStopState(patience=3)
    assert all(early_stop_update(s, v) == CONTINUE for v in np.linspace(1, 0, 50))
    s = EarlyStopState(patience=2)
    early_stop_update(s, 1.0)
    assert early_stop_update(s, math.nan) == CONTINUE and s.epochs_since_improvement == 1
    assert early_stop_update(s, math.nan) == STOP and s.best_metric == 1.0
    s = EarlyStopState(patience=0)
    assert early_stop_update(s, 1.0) == CONTINUE and early_stop_update(s, 1.0) == STOP


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=1, max_size=40), st.integers(0, 10))
def test_early_stop_counter_bounded(values, patience):
    s = EarlyStopState(patience=patience)
    for v in values:
        if early_stop_update(s, v) == STOP:
            break
        assert s.epochs_since_improvement <= patience


def test_train_config_validation():
    for bad in ({"max_epochs": 0}, {"patience": 5, "max_epochs": 3}, {"lr_final": 1e-3}, {"batch_size": 0},
                {"p_flip": 1.5}, {"stop_on": "acc"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochs": 3})
    c = TrainConfig(seed=4)
    assert TrainConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------------------
# loop

def small_run(tmp_path=None, **kw):
    cfg = make_config("Tiny", num_classes=2)
    tcfg = TrainConfig(**{"batch_size": 4, "max_epochs": 2, "patience": 2, "lr_init": 1e-3, **kw})
    hist = tmp_path / "h.csv" if tmp_path else None
    return train_loop(samples(8), samples(4, seed=1), cfg, tcfg, history_path=hist, record_time=False), hist


def test_train_loop_reproducible(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    r1, h1 = small_run(tmp_path / "a")
    r2, h2 = small_run(tmp_path / "b")
    assert h1.read_bytes() == h2.read_bytes()
    rows = list(csv.reader(h1.open()))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "val_mIoU", "lr", "seconds"]
    assert len(rows) == 3 and all(r[-1] == "0.000" for r in rows[1:])
    for k in r1.last:
        np.testing.assert_array_equal(r1.last[k], r2.last[k])
    assert 1 <= r1.best_epoch <= 2


def test_zero_dice_weight_equals_ce_loop():
    cfg = make_config("Tiny", num_classes=2)
    tcfg = TrainConfig(batch_size=4, max_epochs=2, patience=2, lr_init=1e-3, dice_weight=0.0)
    a = train_loop(samples(8), samples(4, seed=1), cfg, tcfg)
    b = train_loop(samples(8), samples(4, seed=1), cfg, tcfg, loss_fn=cross_entropy_loss)
    assert [r.row(False) for r in a.history] == [r.row(False) for r in b.history]
    for k in a.last:
        np.testing.assert_array_equal(a.last[k], b.last[k])


def test_patience_zero_stops_after_first_non_improvement():
    cfg = make_config("Tiny", num_classes=2)
    tcfg = TrainConfig(batch_size=4, max_epochs=6, patience=0, lr_init=1e-3)
    calls = {"n": 0}

    def rising(z, t):
        loss, g = hybrid_loss(z, t)
        calls["n"] += 1
        return loss + calls["n"], g  # validation loss grows every epoch

    r = train_loop(samples(4), samples(2, seed=1), cfg, tcfg, loss_fn=rising)
    assert r.stopped_early and len(r.history) == 2


def test_history_flushed_on_abort(tmp_path):
    cfg = make_config("Tiny", num_classes=2)
    tcfg = TrainConfig(batch_size=4, max_epochs=3, patience=3, lr_init=1e-3)
    calls = {"n": 0}

    def explode(z, t):
        calls["n"] += 1
        if calls["n"] > 3:  # 2 train batches + 1 val batch in epoch 1
            return math.nan, np.zeros_like(z)
        return hybrid_loss(z, t)

    with pytest.raises(FloatingPointError):
        train_loop(samples(8), samples(2, seed=1), cfg, tcfg, history_path=tmp_path / "h.csv", loss_fn=explode)
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 2


def test_train_loop_rejects_empty():
    with pytest.raises(ValueError):
        train_loop([], samples(1), make_config("Tiny", num_classes=2), TrainConfig(max_epochs=1, patience=1))
