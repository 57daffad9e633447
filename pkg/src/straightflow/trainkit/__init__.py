from .ablation import CELLS, UT_RATIO, AblationResult, cell_label, epoch_within, run_ablation_grid
from .optim import AdamW, Schedule
from .stage1 import TrainConfig, TrainResult, TrainingDiverged, eval_metrics, train_stage1
from .distill import (
    DiscHead, DistillConfig, DistillResult, distill_ladd, generate_pseudo_targets, generator_loss, hinge_d_loss,
    match_pairs, noise_robustness, tap_blocks,
)
