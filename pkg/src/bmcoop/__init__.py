"""Few-shot prompt-context learning for frozen vision-language backbones.

Learnable context vectors are optimized against a composite objective:
cross-entropy on the support set, a consistency pull toward the mean of a
generated-prompt ensemble, and knowledge distillation from an
outlier-pruned teacher ensemble. Encoders stay frozen throughout; only
the context moves.
"""

from .backbone import (
    CachedVisionSource,
    ContextVectors,
    SyntheticTextEncoder,
    SyntheticVisionEncoder,
    encode_images,
    encode_text_bank,
    encode_text_with_context,
    init_context,
)
from .ensemble import (
    PromptScoreReport,
    mad_zscores,
    mean_ensemble,
    prompt_scores,
    select_prompts,
    selected_ensemble,
)
from .errors import BmcoopError, ConfigError, DataError, NetworkError, NumericError
from .evaluation import (
    EvalReport,
    accuracy,
    aggregate_seeds,
    base_novel_split,
    harmonic_mean,
)
from .io import (
    load_catalog,
    load_manifest,
    load_prompt_bank,
    read_embedding_cache,
    write_embedding_cache,
    write_manifest,
    write_prompt_bank,
)
from .objective import (
    LossBreakdown,
    ce_loss,
    class_probabilities,
    kdsp_loss,
    loss_gradient,
    predict,
    sccm_loss,
    total_loss,
)
from .promptgen import LlmEndpointConfig, build_query, fetch_prompts, validate_bank
from .trainer import (
    FewShotSupportSet,
    TrainState,
    load_checkpoint,
    sample_few_shot,
    save_checkpoint,
    train_run,
)
from .types import (
    ClassCatalog,
    ClassEntry,
    DatasetManifest,
    EmbeddingMatrix,
    ManifestRecord,
    PromptBank,
    RunConfig,
)

__version__ = "0.1.0"
