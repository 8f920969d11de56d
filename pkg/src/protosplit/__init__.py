"""protosplit: detect inconsistent prototype channels and split them into consistent ones."""

from .bundle import PatchBundle, read_bundle, write_bundle
from .detection import (
    CliqueReport,
    DetectionConfig,
    DetectionResult,
    cosine_similarity,
    detect,
    evaluate_prototype,
    find_optimal_threshold,
    maximal_cliques,
    top_activated_patches,
)
from .errors import (
    BundleError,
    ConvergenceError,
    ProtosplitError,
    ShapeError,
    ValidationError,
)
from .metrics import accuracy, part_purity, pattern_purity
from .model import (
    PatchRecord,
    PrototypeBank,
    channel_logits,
    classify,
    pool_activations,
    softmax_channels,
)
from .pipeline import auto_split, split_and_finetune
from .splitting import (
    ConceptSets,
    SplitHyperparams,
    SplitResult,
    SplitSession,
    build_reference_set,
    duplicate_kernel,
    extend_head,
    per_concept_accuracy,
    reinit_and_finetune_head,
    run_split,
    split_loss,
    split_loss_gradient,
    start_session,
)
from .synthetic import SynthConfig, generate_bank, oracle_labels

__version__ = "0.1.0"

__all__ = [
    "BundleError",
    "CliqueReport",
    "ConceptSets",
    "ConvergenceError",
    "DetectionConfig",
    "DetectionResult",
    "PatchBundle",
    "PatchRecord",
    "ProtosplitError",
    "PrototypeBank",
    "ShapeError",
    "SplitHyperparams",
    "SplitResult",
    "SplitSession",
    "SynthConfig",
    "ValidationError",
    "accuracy",
    "auto_split",
    "build_reference_set",
    "channel_logits",
    "classify",
    "cosine_similarity",
    "detect",
    "duplicate_kernel",
    "evaluate_prototype",
    "extend_head",
    "find_optimal_threshold",
    "generate_bank",
    "maximal_cliques",
    "oracle_labels",
    "part_purity",
    "pattern_purity",
    "per_concept_accuracy",
    "pool_activations",
    "read_bundle",
    "reinit_and_finetune_head",
    "run_split",
    "softmax_channels",
    "split_and_finetune",
    "split_loss",
    "split_loss_gradient",
    "start_session",
    "top_activated_patches",
    "write_bundle",
]
