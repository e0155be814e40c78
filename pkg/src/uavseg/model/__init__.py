from .config import (
    NUM_STAGES,
    STAGE_SCALES,
    VARIANTS,
    ModelConfig,
    count_parameters,
    make_config,
    parameter_shapes,
)
from .network import (
    Segmenter,
    as_params,
    decode,
    efficient_self_attention,
    encode,
    forward,
    forward_batch,
    mix_ffn,
    overlapped_patch_merge,
)
from .weights import (
    BadMagicError,
    CheckpointError,
    ChecksumError,
    ShapeMismatchError,
    TruncatedError,
    VersionMismatchError,
    WeightStore,
    init_weights,
    load_weights,
    save_weights,
)
