"""Desk-scale simulation of black-box adversarial reprogramming and the
stateful query-detection defense."""

from .data import (
    LabeledDataset,
    PaddingSpec,
    PairDataset,
    gen_source_dataset,
    gen_target_dataset,
    load_dataset,
    make_pairs,
    pad_and_mask,
    save_dataset,
)
from .detector import (
    DetectionStats,
    DetectorConfig,
    DetectorState,
    StatefulDetector,
    calibrate_threshold,
    measure_noreset_fpr,
    observe,
    reset,
    stats,
)
from .encoder import (
    EncoderConfig,
    SimilarityEncoder,
    contrastive_loss,
    contrastive_total,
    embed,
    encoder_pair_accuracy,
    pair_distance,
    train_encoder,
)
from .errors import (
    AttackAbortedError,
    BlockedAccountError,
    ConfigError,
    FormatError,
    InvariantError,
    NumericError,
    ShapeError,
    TrainingError,
    UndefinedStatError,
)
from .models import (
    Classifier,
    ClassifierConfig,
    QueryChannel,
    QueryRecord,
    accuracy,
    channel_scorer,
    classifier_scorer,
    load_classifier,
    save_classifier,
    train_source_classifier,
)
from .numkernel import (
    FeedforwardNet,
    RmspropState,
    finite_diff_check,
    net_forward,
    net_grad,
    rmsprop_step,
    sgd_step,
)
from .reprogram import (
    AdversarialProgram,
    LabelMapping,
    apply_program,
    focal_loss,
    load_program,
    mapping_score,
    program_delta,
    reprogram_accuracy,
    reprogram_loss,
    save_program,
    whitebox_reprogram,
)
from .zoattack import (
    AttackBudget,
    ZOConfig,
    blackbox_reprogram,
    finetune_from_surrogate,
    sample_unit_directions,
    zo_estimate_gradient,
)

__version__ = "0.1.0"
