"""Few-shot class-incremental learner with a word-vector classifier head.

A frozen backbone feeds superclass-specialized embedding modules fused by
learned attention; the fused and global features are mapped into a semantic
word-vector space and classified by cosine similarity against per-class
semantic vectors.  Sessions are trained incrementally with classification,
distillation, and attention-alignment losses plus a prototype rehearsal
memory.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DatasetError,
    DegenerateVectorError,
    DuplicateError,
    EmptyInputError,
    ParseError,
    ProtocolError,
    SemkdError,
    ShapeError,
)
from .evalsuite import (
    DfslReport,
    EpisodeConfig,
    SessionReport,
    accuracy,
    evaluate_dfsl,
    evaluate_session,
    harmonic_mean,
)
from .losses import (
    DistillationContext,
    LossConfig,
    attention_loss,
    classification_loss,
    distillation_loss,
    total_loss,
)
from .memory import PrototypeMemory, replay_batch, update_memory
from .model import (
    ClassifierHead,
    ModelConfig,
    ModelState,
    attention_fuse,
    backbone_forward,
    count_trainable,
    load_checkpoint,
    map_to_semantic,
    predict,
    register_session_classes,
    save_checkpoint,
    score,
)
from .semantics import (
    SemanticTable,
    SuperclassMap,
    assign_novel_class,
    cluster_base_classes,
    kmeans,
    load_semantics,
    synthesize_semantics,
)
from .sessions import (
    Sample,
    SessionStream,
    SyntheticStreamConfig,
    TaskSpec,
    build_image_stream,
    build_synthetic_stream,
    joint_test_set,
)
from .trainer import (
    RunState,
    TrainConfig,
    run_dfsl,
    run_fscil,
    snapshot_old_scores,
    train_base,
    train_novel_session,
)
