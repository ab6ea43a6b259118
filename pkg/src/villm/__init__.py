"""Video QA from a frozen image encoder and frozen text decoder.

Per-frame features are pooled along time (spatial tokens) and across
patches (temporal tokens); two small trainable affine adapters -- the
temporal one initialized as an exact copy of the spatial one -- align both
into the decoder's embedding space, where they are spliced into a fixed
instruction prompt. Only the adapters ever train.
"""

from .adapters import (
    AlignmentModule,
    ExtraMlp,
    VideoTokens,
    align_spatial,
    align_temporal,
    attach_extra_mlp,
    fuse,
    init_temporal_from_alignment,
)
from .decoder import (
    ByteTokenizer,
    DecoderConfig,
    PromptBatch,
    TextDecoder,
    build_prompt,
    generate,
)
from .encoder import (
    EncoderConfig,
    FrameEmbeddings,
    ImageEncoder,
    VideoTensor,
    encode_frames,
    load_features,
    load_video,
    sample_frames,
)
from .harness import (
    EvalReport,
    SweepConfig,
    SyntheticTask,
    ablation_sweep,
    evaluate,
    gen_synthetic_dataset,
)
from .pooling import PooledFeatures, pool_features, spatial_pool, temporal_pool, window_pool
from .tensor import Tensor, cross_entropy, grad_check, layer_norm, matmul, mean_axis
from .training import (
    InstructionRecord,
    TrainConfig,
    VideoQaModel,
    build_model,
    load_checkpoint,
    load_dataset,
    resume_train,
    save_checkpoint,
    train,
    training_step,
)
from .vtns import VtnsFormatError, read_tensor, write_tensor

__version__ = "0.1.0"
