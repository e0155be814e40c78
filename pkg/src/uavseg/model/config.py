"""Architecture hyperparameters for the MiT/SegFormer variants."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, Tuple

import numpy as np

NUM_STAGES = 4
STAGE_SCALES = (4, 8, 16, 32)
# (kernel, stride, padding) of the overlapped patch merge per stage
PATCH_MERGE = ((7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1))


@dataclass(frozen=True)
class ModelConfig:
    stage_dims: Tuple[int, int, int, int]
    stage_depths: Tuple[int, int, int, int]
    stage_heads: Tuple[int, int, int, int]
    reduction_ratios: Tuple[int, int, int, int]
    mlp_ratio: int = 4
    decoder_dim: int = 256
    num_classes: int = 8
    drop_path_rate: float = 0.0
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        for name in ("stage_dims", "stage_depths", "stage_heads", "reduction_ratios"):
            v = tuple(int(x) for x in getattr(self, name))
            if len(v) != NUM_STAGES:
                raise ValueError(f"{name} needs {NUM_STAGES} entries, got {len(v)}")
            object.__setattr__(self, name, v)
        for i, (d, h) in enumerate(zip(self.stage_dims, self.stage_heads)):
            if h < 1 or d % h:
                raise ValueError(f"stage {i + 1}: dim {d} not divisible by {h} heads")
        if min(self.stage_dims) < 1 or min(self.stage_depths) < 1:
            raise ValueError("stage dims and depths must be positive")
        if min(self.reduction_ratios) < 1:
            raise ValueError("reduction ratios must be positive")
        if self.mlp_ratio < 1 or self.decoder_dim < 1 or self.num_classes < 1:
            raise ValueError("mlp_ratio, decoder_dim and num_classes must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError("drop_path_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


_MIT_HEADS = (1, 2, 5, 8)
_MIT_RATIOS = (8, 4, 2, 1)

VARIANTS: Dict[str, dict] = {
    "B0": dict(stage_dims=(32, 64, 160, 256), stage_depths=(2, 2, 2, 2), stage_heads=_MIT_HEADS,
               reduction_ratios=_MIT_RATIOS, decoder_dim=256),
    "B3": dict(stage_dims=(64, 128, 320, 512), stage_depths=(3, 4, 18, 3), stage_heads=_MIT_HEADS,
               reduction_ratios=_MIT_RATIOS, decoder_dim=768),
    "B5": dict(stage_dims=(64, 128, 320, 512), stage_depths=(3, 6, 40, 3), stage_heads=_MIT_HEADS,
               reduction_ratios=_MIT_RATIOS, decoder_dim=768),
    # test-only miniature; head counts chosen so every dim divides evenly
    "Tiny": dict(stage_dims=(8, 16, 24, 32), stage_depths=(1, 1, 1, 1), stage_heads=(1, 2, 3, 4),
                 reduction_ratios=_MIT_RATIOS, decoder_dim=32),
}


def make_config(variant: str, num_classes: int = 8, **overrides) -> ModelConfig:
    try:
        base = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
    return ModelConfig.from_dict({**base, "num_classes": num_classes, **overrides})


def parameter_shapes(cfg: ModelConfig) -> Iterator[Tuple[str, Tuple[int, ...]]]:
    """Every learnable tensor as (dotted name, shape), in checkpoint order."""
    in_ch = 3
    for s in range(NUM_STAGES):
        d, r = cfg.stage_dims[s], cfg.reduction_ratios[s]
        k = PATCH_MERGE[s][0]
        hid = d * cfg.mlp_ratio
        p = f"encoder.stage{s + 1}"
        yield f"{p}.patch_embed.proj.weight", (d, in_ch, k, k)
        yield f"{p}.patch_embed.proj.bias", (d,)
        yield f"{p}.patch_embed.norm.weight", (d,)
        yield f"{p}.patch_embed.norm.bias", (d,)
        for b in range(cfg.stage_depths[s]):
            q = f"{p}.block{b + 1}"
            yield f"{q}.norm1.weight", (d,)
            yield f"{q}.norm1.bias", (d,)
            yield f"{q}.attn.q.weight", (d, d)
            yield f"{q}.attn.q.bias", (d,)
            yield f"{q}.attn.kv.weight", (2 * d, d)
            yield f"{q}.attn.kv.bias", (2 * d,)
            if r > 1:
                yield f"{q}.attn.sr.weight", (d, d, r, r)
                yield f"{q}.attn.sr.bias", (d,)
                yield f"{q}.attn.norm.weight", (d,)
                yield f"{q}.attn.norm.bias", (d,)
            yield f"{q}.attn.proj.weight", (d, d)
            yield f"{q}.attn.proj.bias", (d,)
            yield f"{q}.norm2.weight", (d,)
            yield f"{q}.norm2.bias", (d,)
            yield f"{q}.ffn.fc1.weight", (hid, d)
            yield f"{q}.ffn.fc1.bias", (hid,)
            yield f"{q}.ffn.dwconv.weight", (hid, 1, 3, 3)
            yield f"{q}.ffn.dwconv.bias", (hid,)
            yield f"{q}.ffn.fc2.weight", (d, hid)
            yield f"{q}.ffn.fc2.bias", (d,)
        yield f"{p}.norm.weight", (d,)
        yield f"{p}.norm.bias", (d,)
        in_ch = d
    e = cfg.decoder_dim
    for s in range(NUM_STAGES):
        yield f"decoder.linear_c{s + 1}.weight", (e, cfg.stage_dims[s])
        yield f"decoder.linear_c{s + 1}.bias", (e,)
    yield "decoder.linear_fuse.weight", (e, NUM_STAGES * e)
    yield "decoder.fuse_norm.weight", (e,)
    yield "decoder.fuse_norm.bias", (e,)
    yield "decoder.linear_pred.weight", (cfg.num_classes, e)
    yield "decoder.linear_pred.bias", (cfg.num_classes,)


def count_parameters(cfg: ModelConfig) -> int:
    """Exact count of learnable scalars, computed from shapes alone."""
    return int(sum(int(np.prod(shape)) for _, shape in parameter_shapes(cfg)))
