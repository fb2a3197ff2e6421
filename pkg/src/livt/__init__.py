"""Long-tailed image classification with a small vision transformer.

Masked-patch pretraining followed by fine-tuning with logit-adjusted
softmax or sigmoid losses, plus exact oracles for checking the pieces.
"""

from .errors import LivtError
from .losses import (
    LogitBias,
    LossConfig,
    LossOutput,
    bce_loss_and_grad,
    bias_bce,
    bias_bce_with_test_prior,
    bias_ce,
    ce_loss_and_grad,
    make_loss,
    ntbce_loss_and_grad,
)
from .metrics import EvalReport, ece_mce, evaluate, group_accuracy
from .priors import (
    ClassPrior,
    ImbalanceProfile,
    LtDataset,
    exponential_profile,
    pareto_profile,
    subsample_dataset,
    synth_gaussian_lt,
)
from .train import DeskBenchmark, TrainConfig, adamw_step, cosine_lr, mixup, run_bft, run_mgp
from .vit import MaskPlan, ViTConfig, ViTParams, random_mask_plan

__version__ = "0.1.0"
