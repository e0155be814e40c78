"""Independent reference implementations used by the test suite."""
from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

from uavseg.core import IGNORE_INDEX, Rect
from uavseg.model import ModelConfig, WeightStore, as_params, forward_batch
from uavseg.train import hybrid_loss


# ---------------------------------------------------------------------------
# counting oracles

def brute_confusion(pred: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g != IGNORE_INDEX:
            cm[g][p] += 1
    return cm


def brute_iou(pred: np.ndarray, gt: np.ndarray, k: int) -> List[float]:
    """Per-class IoU from explicit pixel sets (sentinel gt pixels dropped)."""
    coords = [(i, p, g) for i, (p, g) in enumerate(zip(pred.ravel().tolist(), gt.ravel().tolist())) if g != IGNORE_INDEX]
    out = []
    for c in range(k):
        ps = {i for i, p, _ in coords if p == c}
        gs = {i for i, _, g in coords if g == c}
        union = ps | gs
        out.append(len(ps & gs) / len(union) if union else math.nan)
    return out


def brute_coverage(w: int, h: int, rects: Sequence[Rect]) -> Tuple[np.ndarray, bool]:
    """Per-pixel hit counts from pixel-by-pixel containment, plus an in-bounds flag."""
    inside = all(r.x >= 0 and r.y >= 0 and r.x + r.w <= w and r.y + r.h <= h for r in rects)
    count = np.zeros((h, w), dtype=np.int64)
    for r in rects:
        for y in range(max(r.y, 0), min(r.y + r.h, h)):
            count[y, max(r.x, 0) : min(r.x + r.w, w)] += 1
    return count, inside


def enumerate_axis(dim: int, clip: int, stride: int) -> List[int]:
    """Origins by walking the axis: step by stride, then snap a final tile to the edge."""
    out, o = [], 0
    while o + clip <= dim:
        out.append(o)
        o += stride
    if out[-1] + clip < dim:
        out.append(dim - clip)
    return out


# ---------------------------------------------------------------------------
# attention reference

def naive_attention(x: np.ndarray, params: Dict[str, np.ndarray], prefix: str, heads: int) -> np.ndarray:
    """Per-token, per-head loops over plain multi-head attention (no reduction)."""
    n, c = x.shape
    d = c // heads
    q = x @ params[f"{prefix}.q.weight"].T + params[f"{prefix}.q.bias"]
    kv = x @ params[f"{prefix}.kv.weight"].T + params[f"{prefix}.kv.bias"]
    k, v = kv[:, :c], kv[:, c:]
    out = np.zeros((n, c))
    for hd in range(heads):
        sl = slice(hd * d, (hd + 1) * d)
        for i in range(n):
            s = np.array([np.dot(q[i, sl], k[j, sl]) / math.sqrt(d) for j in range(n)])
            a = np.exp(s - s.max())
            a /= a.sum()
            out[i, sl] = sum(a[j] * v[j, sl] for j in range(n))
    return out @ params[f"{prefix}.proj.weight"].T + params[f"{prefix}.proj.bias"]


# ---------------------------------------------------------------------------
# gradient check

def model_loss(x: np.ndarray, y: np.ndarray, cfg: ModelConfig, store: WeightStore) -> float:
    logits = forward_batch(x.astype(next(iter(store.values())).dtype), cfg, as_params(store)).data
    return hybrid_loss(logits, y)[0]


def model_grads(x: np.ndarray, y: np.ndarray, cfg: ModelConfig, store: WeightStore) -> Dict[str, np.ndarray]:
    params = as_params(store, requires_grad=True)
    logits = forward_batch(x.astype(next(iter(store.values())).dtype), cfg, params)
    _, g = hybrid_loss(logits.data, y)
    logits.backward(g)
    return {k: t.grad for k, t in params.items()}


def sample_coordinates(store: WeightStore, n: int, rng: np.random.Generator) -> List[Tuple[str, tuple]]:
    """One random entry from every tensor, then uniform extras until ``n`` are drawn."""
    names = sorted(store)
    picks = []
    for name in names:
        picks.append((name, tuple(int(rng.integers(s)) for s in store[name].shape)))
    sizes = np.array([store[k].size for k in names], dtype=np.float64)
    while len(picks) < n:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        picks.append((name, tuple(int(rng.integers(s)) for s in store[name].shape)))
    return picks


def finite_difference(
    x: np.ndarray, y: np.ndarray, cfg: ModelConfig, store64: WeightStore, coord: Tuple[str, tuple], h: float = 1e-5
) -> float:
    """Five-point central difference (truncation error O(h^4)) in 64-bit."""
    name, idx = coord
    s = store64.copy()
    orig = s[name][idx]

    def at(delta: float) -> float:
        s[name][idx] = orig + delta
        return model_loss(x, y, cfg, s)

    return (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h)


def relative_error(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
