"""Class-incremental multi-organ segmentation from partially labeled datasets."""

from .errors import (
    ConfigError,
    DataError,
    IncSegError,
    InvalidInputError,
    InvalidLabelError,
    NoPreviousStageError,
    NumericalError,
)
from .labelspace import (
    LabelSpace,
    pseudo_labels,
    remodel_kd,
    remodel_logits_corr,
    remodel_seg,
    softmax,
)
from .losses import (
    STRATEGIES,
    LossWeights,
    StrategySpec,
    ce_seg_loss,
    corr_loss,
    corr_weights,
    dice_loss,
    kd_loss,
    total_loss,
)
from .metrics import MetricsReport, dice_coefficient, evaluate_model, hd95
from .model import (
    ArchConfig,
    Checkpoint,
    SegmentationModel,
    build_model,
    expand_classifier,
    freeze_teacher,
)
from .phantomdata import (
    PhantomSpec,
    VolumeRecord,
    build_joint_dataset,
    generate_stage_dataset,
    read_volume,
    write_volume,
)

__version__ = "0.1.0"
