"""Batch-level distillation for memory-constrained online continual learning.

A small numpy training engine: a shared dense extractor with per-task
linear-softmax heads, a two-stage per-batch distillation method with
per-layer gradient balancing, the reference baselines it is compared
against, a memory auditor enforcing the no-state-between-batches
constraint, and an experiment harness with a CLI.
"""

from .augment import AugmentPolicy, TransformDescriptor, TransformSet, apply, replicate_batch, sample_descriptors
from .baselines import BaselineConfig, finetune_batch, l2_batch, lwf_offline, lwf_single_pass_task
from .engine import (
    BLDConfig,
    BLDEngine,
    ProbabilityBank,
    WarmUpOutput,
    balance_distillation_gradient,
    joint_training_stage,
    process_batch,
    warm_up_stage,
)
from .errors import ConfigError, ConstraintViolationError, IdxFormatError, NumericError, ShapeError
from .model import Batch, Head, HeadLoss, MultiHeadNet, extract_features, forward_backward, head_predict
from .nncore import (
    GradientSet,
    LayerSpec,
    ParamBlock,
    ParameterSet,
    cross_entropy_soft,
    layer_norms,
    mlp_specs,
    sgd_step,
    softmax_temperature,
)
from .streams import Dataset, TaskSpec, TaskStream, load_idx, make_splits, synthetic_tasks, write_idx

__version__ = "0.1.0"
