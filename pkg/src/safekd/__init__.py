"""Safety-aligned student fine-tuning: distillation from a frozen teacher,
noise-robust training under bounded input perturbations, and a gradient-norm
penalty, on a small numpy autodiff engine."""

from .model import ClassifierModel, ModelConfig, clone_for_student, load_checkpoint, save_checkpoint
from .objective import LossReport, ObjectiveConfig, total_loss
from .perturb import PerturbSpec, make_delta, project
from .trainer import TrainConfig, finetune_student, pretrain_teacher
from .metrics import SafetyScores, evaluate

__version__ = "0.1.0"

__all__ = [
    "ClassifierModel", "ModelConfig", "clone_for_student", "load_checkpoint", "save_checkpoint",
    "LossReport", "ObjectiveConfig", "total_loss", "PerturbSpec", "make_delta", "project",
    "TrainConfig", "finetune_student", "pretrain_teacher", "SafetyScores", "evaluate",
]
