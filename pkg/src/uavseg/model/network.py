"""Mix-Transformer encoder and all-MLP decoder built on :mod:`uavseg.autograd`.

Activations are channels-last: rasters are (B, H, W, C), token sequences
(B, N, C) with N = H * W in row-major order. There are no positional
embeddings; the depthwise convolution inside Mix-FFN carries position.
"""
from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..core import LOGITS, PlaneImage, ScoreMap
from .config import NUM_STAGES, PATCH_MERGE, ModelConfig
from .weights import WeightStore

Params = Mapping[str, Tensor]

PAD_MULTIPLE = 32


def as_params(store: WeightStore, requires_grad: bool = False) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in store.items()}


def overlapped_patch_merge(x: Tensor, params: Params, prefix: str, stage: int, eps: float = 1e-6) -> Tensor:
    """Strided conv (7/4/3 for stage 0, else 3/2/1) followed by channel layer norm."""
    k, s, p = PATCH_MERGE[stage]
    _, h, w, _ = x.shape
    if h + 2 * p < k or w + 2 * p < k:
        raise ValueError(f"stage {stage + 1} patch merge: input {h}x{w} smaller than kernel {k} after padding")
    y = ag.conv2d(x, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"], s, p)
    return ag.layer_norm(y, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"], eps)


def efficient_self_attention(
    x: Tensor,
    hw: Tuple[int, int],
    heads: int,
    ratio: int,
    params: Params,
    prefix: str,
    eps: float = 1e-6,
    attn_out: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """Multi-head attention whose keys/values come from an R x R strided reduction.

    ``attn_out``, when given, receives the (B, heads, N, M) attention weights.
    """
    b, n, c = x.shape
    h, w = hw
    if ratio > h or ratio > w:
        raise ValueError(f"reduction ratio {ratio} exceeds raster {h}x{w}")
    d = c // heads
    q = ag.linear(x, params[f"{prefix}.q.weight"], params[f"{prefix}.q.bias"])
    q = q.reshape(b, n, heads, d).transpose(0, 2, 1, 3)
    if ratio > 1:
        r = ag.conv2d(x.reshape(b, h, w, c), params[f"{prefix}.sr.weight"], params[f"{prefix}.sr.bias"], ratio, 0)
        m = r.shape[1] * r.shape[2]
        r = ag.layer_norm(r.reshape(b, m, c), params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"], eps)
    else:
        r, m = x, n
    kv = ag.linear(r, params[f"{prefix}.kv.weight"], params[f"{prefix}.kv.bias"])
    kv = kv.reshape(b, m, 2, heads, d).transpose(2, 0, 3, 1, 4)
    k, v = kv[0], kv[1]
    scores = ag.mul(ag.matmul(q, k.transpose(0, 1, 3, 2)), float(d) ** -0.5)
    attn = ag.softmax(scores, axis=-1)
    if attn_out is not None:
        attn_out.append(attn.data)
    out = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, c)
    return ag.linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def mix_ffn(x: Tensor, hw: Tuple[int, int], params: Params, prefix: str) -> Tensor:
    """fc1 -> 3x3 depthwise conv -> GELU -> fc2. The caller adds the residual."""
    b, n, _ = x.shape
    h, w = hw
    if n != h * w:
        raise ValueError(f"mix_ffn: {n} tokens do not match raster {h}x{w}")
    y = ag.linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"])
    hid = y.shape[-1]
    y = ag.depthwise_conv3x3(y.reshape(b, h, w, hid), params[f"{prefix}.dwconv.weight"], params[f"{prefix}.dwconv.bias"])
    y = ag.gelu(y).reshape(b, n, hid)
    return ag.linear(y, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def _drop_path(branch: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None or rate <= 0.0:
        return branch
    keep = (rng.random(branch.shape[0]) >= rate).astype(branch.dtype) / (1.0 - rate)
    return ag.mul(branch, keep.reshape((-1,) + (1,) * (branch.data.ndim - 1)))


def encode(
    x: Tensor,
    cfg: ModelConfig,
    params: Params,
    rng: Optional[np.random.Generator] = None,
    attn_out: Optional[List[np.ndarray]] = None,
) -> List[Tensor]:
    """Run the four encoder stages; returns rasters at 1/4, 1/8, 1/16, 1/32."""
    total = sum(cfg.stage_depths)
    rates = np.linspace(0.0, cfg.drop_path_rate, total) if total > 1 else np.zeros(1)
    feats = []
    blk = 0
    for s in range(NUM_STAGES):
        p = f"encoder.stage{s + 1}"
        x = overlapped_patch_merge(x, params, f"{p}.patch_embed", s, cfg.ln_eps)
        b, h, w, c = x.shape
        t = x.reshape(b, h * w, c)
        for j in range(cfg.stage_depths[s]):
            q = f"{p}.block{j + 1}"
            y = ag.layer_norm(t, params[f"{q}.norm1.weight"], params[f"{q}.norm1.bias"], cfg.ln_eps)
            y = efficient_self_attention(
                y, (h, w), cfg.stage_heads[s], cfg.reduction_ratios[s], params, f"{q}.attn", cfg.ln_eps, attn_out
            )
            t = ag.add(t, _drop_path(y, float(rates[blk]), rng))
            y = ag.layer_norm(t, params[f"{q}.norm2.weight"], params[f"{q}.norm2.bias"], cfg.ln_eps)
            y = mix_ffn(y, (h, w), params, f"{q}.ffn")
            t = ag.add(t, _drop_path(y, float(rates[blk]), rng))
            blk += 1
        t = ag.layer_norm(t, params[f"{p}.norm.weight"], params[f"{p}.norm.bias"], cfg.ln_eps)
        x = t.reshape(b, h, w, c)
        feats.append(x)
    return feats


def decode(feats: List[Tensor], cfg: ModelConfig, params: Params, out_hw: Tuple[int, int]) -> Tensor:
    """Project each stage, upsample to 1/4, concatenate, fuse, classify, upsample."""
    size = feats[0].shape[1:3]
    ups = []
    for s in reversed(range(NUM_STAGES)):
        y = ag.linear(feats[s], params[f"decoder.linear_c{s + 1}.weight"], params[f"decoder.linear_c{s + 1}.bias"])
        ups.append(ag.resize_bilinear(y, size))
    y = ag.linear(ag.concat(ups, axis=-1), params["decoder.linear_fuse.weight"])
    y = ag.layer_norm(y, params["decoder.fuse_norm.weight"], params["decoder.fuse_norm.bias"], cfg.ln_eps)
    y = ag.relu(y)
    y = ag.linear(y, params["decoder.linear_pred.weight"], params["decoder.linear_pred.bias"])
    return ag.resize_bilinear(y, out_hw)


def pad_amount(n: int, multiple: int = PAD_MULTIPLE) -> int:
    return -n % multiple


def forward_batch(
    x: np.ndarray,
    cfg: ModelConfig,
    params: Params,
    rng: Optional[np.random.Generator] = None,
    attn_out: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """Logits (B, H, W, K) for standardized images (B, H, W, 3).

    Sides that are not multiples of 32 are reflection-padded at the bottom/right
    and the logits cropped back.
    """
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) input, got {x.shape}")
    _, h, w, _ = x.shape
    ph, pw = pad_amount(h), pad_amount(w)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="reflect")
    feats = encode(Tensor(x), cfg, params, rng, attn_out)
    logits = decode(feats, cfg, params, x.shape[1:3])
    if ph or pw:
        logits = logits[:, :h, :w, :]
    return logits


def forward(img: PlaneImage, cfg: ModelConfig, store: WeightStore) -> ScoreMap:
    store.validate(cfg)
    dtype = next(iter(store.values())).dtype
    x = np.asarray(img.data, dtype=dtype)[None]
    return ScoreMap(forward_batch(x, cfg, as_params(store)).data[0], LOGITS)


class Segmenter:
    """Callable binding a config to immutable weights: PlaneImage -> logits ScoreMap."""

    def __init__(self, cfg: ModelConfig, store: WeightStore):
        store.validate(cfg)
        self.cfg = cfg
        self.store = store
        self._params = as_params(store)
        self._dtype = next(iter(store.values())).dtype

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def __call__(self, img: PlaneImage) -> ScoreMap:
        x = np.asarray(img.data, dtype=self._dtype)[None]
        return ScoreMap(forward_batch(x, self.cfg, self._params).data[0], LOGITS)

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        return forward_batch(np.asarray(x, dtype=self._dtype), self.cfg, self._params).data
