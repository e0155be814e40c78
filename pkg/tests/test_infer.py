import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_coverage
from uavseg.core import LOGITS, PROBABILITIES, PlaneImage, ScoreMap, flip_horizontal, softmax_pixelwise
from uavseg.infer import (
    StitchAccumulator,
    argmax_decode,
    compute_window_grid,
    ensemble_geometric_mean,
    load_scores,
    save_scores,
    stitch_predict,
    tta_flip_predict,
)
from uavseg.core import Rect


def probs(*rows):
    return ScoreMap(np.array(rows, dtype=np.float64).reshape(1, len(rows), -1), PROBABILITIES)


class OriginStub:
    """Returns a constant map whose value is the crop's top-left pixel (its x origin)."""

    def __call__(self, img):
        return ScoreMap(np.full((img.height, img.width, 2), img.data[0, 0, 0], dtype=np.float32), LOGITS)


def pointwise_stub(img):
    d = img.data
    return ScoreMap(np.stack([d[..., 0] * 2 - d[..., 1], np.sin(d[..., 2])], -1), LOGITS)


def x_ramp(w, h):
    return PlaneImage(np.broadcast_to(np.arange(w, dtype=np.float32)[None, :, None], (h, w, 3)).copy())


# ---------------------------------------------------------------------------
# window grid

def test_window_grid_examples():
    g = compute_window_grid(4096, 2160, 1024, 128)
    xs = sorted({r.x for r in g.origins})
    ys = sorted({r.y for r in g.origins})
    assert xs == [0, 896, 1792, 2688, 3072] and ys == [0, 896, 1136] and len(g) == 15
    assert len(compute_window_grid(1024, 1024, 1024, 128)) == 1
    g = compute_window_grid(1100, 1024, 1024, 128)
    assert [r.x for r in g.origins] == [0, 76]
    assert g.stride == 896


def test_window_grid_clamps_small_images():
    g = compute_window_grid(300, 2000, 1024, 128)
    assert {(r.w, r.h) for r in g.origins} == {(300, 1024)}
    assert sorted({r.y for r in g.origins}) == [0, 896, 976]


def test_window_grid_errors():
    for ov in (1024, 2000):
        with pytest.raises(ValueError):
            compute_window_grid(100, 100, 1024, ov)
    with pytest.raises(ValueError):
        compute_window_grid(0, 100, 64, 8)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 150), st.integers(1, 150), st.integers(1, 64), st.data())
def test_window_grid_coverage(w, h, window, data):
    overlap = data.draw(st.integers(0, window - 1))
    g = compute_window_grid(w, h, window, overlap)
    count, inside = brute_coverage(w, h, g.origins)
    assert inside and count.min() >= 1


# ---------------------------------------------------------------------------
# stitching

def test_stitch_identity_single_window(tiny_model, rng):
    img = PlaneImage(rng.standard_normal((48, 70, 3)).astype(np.float32))
    out = stitch_predict(img, tiny_model, compute_window_grid(70, 48, 128, 16))
    np.testing.assert_array_equal(out.data, tiny_model(img).data)


def test_stitch_constant_stub():
    stub = lambda img: ScoreMap(np.full((img.height, img.width, 3), 1.7, np.float32))  # noqa: E731
    out = stitch_predict(PlaneImage(np.zeros((50, 90, 3))), stub, compute_window_grid(90, 50, 32, 12))
    assert np.all(out.data == np.float32(1.7))


def test_stitch_two_window_overlap_mean():
    img = x_ramp(12, 1)
    g = compute_window_grid(12, 1, 8, 4)
    assert [r.x for r in g.origins] == [0, 4]
    out = stitch_predict(img, OriginStub(), g).data[0, :, 0]
    np.testing.assert_array_equal(out, [0, 0, 0, 0, 2, 2, 2, 2, 4, 4, 4, 4])


def test_stitch_worker_count_independent(tiny_model, rng):
    img = PlaneImage(rng.standard_normal((80, 100, 3)).astype(np.float32))
    g = compute_window_grid(100, 80, 40, 12)
    a = stitch_predict(img, tiny_model, g, workers=1)
    b = stitch_predict(img, tiny_model, g, workers=3)
    np.testing.assert_array_equal(a.data, b.data)


def test_stitch_averaging_bound(rng):
    img = PlaneImage(rng.standard_normal((40, 57, 3)))
    model = lambda im: ScoreMap(np.cumsum(im.data[..., :2], axis=1))  # noqa: E731  window-dependent
    g = compute_window_grid(57, 40, 24, 9)
    out = stitch_predict(img, model, g).data
    lo = np.full(out.shape, np.inf)
    hi = np.full(out.shape, -np.inf)
    for r in g.origins:
        s = model(PlaneImage(img.data[r.slices])).data
        lo[r.slices] = np.minimum(lo[r.slices], s)
        hi[r.slices] = np.maximum(hi[r.slices], s)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_stitch_errors_name_window():
    def fails(img):
        if img.data[0, 0, 0] > 0:
            raise RuntimeError("boom")
        return OriginStub()(img)

    with pytest.raises(RuntimeError, match=r"x=4, y=0"):
        stitch_predict(x_ramp(12, 1), fails, compute_window_grid(12, 1, 8, 4))
    with pytest.raises(ValueError):
        stitch_predict(x_ramp(12, 1), OriginStub(), compute_window_grid(13, 1, 8, 4))
    acc = StitchAccumulator(2, 2, 1)
    acc.add(Rect(0, 0, 1, 2), np.ones((2, 1, 1)))
    with pytest.raises(ValueError, match="x=1"):
        acc.result()


# ---------------------------------------------------------------------------
# TTA

def test_tta_equivariant_stub_equals_base(rng):
    img = PlaneImage(rng.random((30, 45, 3)))
    g = compute_window_grid(45, 30, 16, 4)
    np.testing.assert_allclose(tta_flip_predict(img, pointwise_stub, g).data,
                               stitch_predict(img, pointwise_stub, g).data, atol=1e-6)


def test_tta_half_constant_stub_is_symmetric():
    def halves(img):
        out = np.zeros((img.height, img.width, 2), np.float32)
        out[:, : img.width // 2, 0] = 1.0
        return ScoreMap(out)

    img = PlaneImage(np.zeros((4, 10, 3)))
    out = tta_flip_predict(img, halves, compute_window_grid(10, 4, 16, 2))
    np.testing.assert_array_equal(out.data, flip_horizontal(out).data)


def test_tta_invariant_to_pre_flip(tiny_model, rng):
    img = PlaneImage(rng.standard_normal((40, 56, 3)).astype(np.float32))
    g = compute_window_grid(56, 40, 64, 8)
    a = tta_flip_predict(img, tiny_model, g)
    b = flip_horizontal(tta_flip_predict(flip_horizontal(img), tiny_model, g))
    np.testing.assert_allclose(a.data, b.data, atol=1e-6)


# ---------------------------------------------------------------------------
# ensembling and decoding

def test_ensemble_examples():
    out = ensemble_geometric_mean([probs([0.8, 0.2]), probs([0.2, 0.8])]).data[0, 0]
    np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-12)
    out = ensemble_geometric_mean([probs([0.9, 0.1]), probs([0.5, 0.5])]).data[0, 0]
    ref = np.sqrt([0.45, 0.05])
    np.testing.assert_allclose(out, ref / ref.sum(), atol=1e-12)
    np.testing.assert_allclose(out, [0.75, 0.25], atol=1e-12)  # sqrt(0.45) = 3 * sqrt(0.05)
    p = probs([0.7, 0.2, 0.1], [0.1, 0.1, 0.8])
    np.testing.assert_allclose(ensemble_geometric_mean([p, p, p]).data, p.data, atol=1e-12)


def test_ensemble_zero_floor_and_errors():
    out = ensemble_geometric_mean([probs([1.0, 0.0]), probs([0.0, 1.0])]).data[0, 0]
    np.testing.assert_allclose(out, [0.5, 0.5])
    with pytest.raises(ValueError):
        ensemble_geometric_mean([])
    with pytest.raises(ValueError):
        ensemble_geometric_mean([probs([0.5, 0.5]), probs([0.5, 0.5], [0.5, 0.5])])
    with pytest.raises(ValueError):
        ensemble_geometric_mean([ScoreMap(np.zeros((1, 1, 2)), LOGITS)])


def test_ensemble_scaled_member_keeps_argmax(rng):
    maps = [softmax_pixelwise(ScoreMap(rng.standard_normal((6, 6, 5)))) for _ in range(3)]
    base = argmax_decode(ensemble_geometric_mean(maps)).data
    from uavseg.infer import geometric_mean_fusion

    scaled = geometric_mean_fusion([maps[0].data * 0.3] + [m.data for m in maps[1:]])
    np.testing.assert_array_equal(scaled.argmax(-1), base)


def test_argmax_examples(rng):
    assert argmax_decode(probs([0.1, 0.7, 0.2])).data[0, 0] == 1
    assert argmax_decode(probs([0.5, 0.5])).data[0, 0] == 0
    z = ScoreMap(rng.standard_normal((5, 7, 4)))
    np.testing.assert_array_equal(argmax_decode(softmax_pixelwise(z)).data, argmax_decode(z).data)


def test_score_dump_round_trip(tmp_path, rng):
    for kind, data in ((LOGITS, rng.standard_normal((3, 5, 4))), (PROBABILITIES, probs([0.25, 0.75]).data)):
        m = ScoreMap(data.astype(np.float32), kind)
        save_scores(tmp_path / "s.smap", m)
        buf = (tmp_path / "s.smap").read_bytes()
        assert buf[:4] == b"SMAP" and struct.unpack("<IIIB", buf[4:17]) == (m.width, m.height, m.classes,
                                                                             0 if kind == LOGITS else 1)
        back = load_scores(tmp_path / "s.smap")
        assert back.kind == kind
        np.testing.assert_array_equal(back.data, m.data)
    (tmp_path / "bad").write_bytes(buf[:-1])
    with pytest.raises(ValueError):
        load_scores(tmp_path / "bad")
