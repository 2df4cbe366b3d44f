"""DTRec: latent multi-step reasoning for sequential recommendation.

Reasoning steps are steered by coarse-to-fine prototype targets and cut
short by a learned halting head.
"""

__version__ = "0.1.0"

from .arh import HaltPolicy
from .data import InteractionDataset, SyntheticTaxonomy, generate_synthetic, leave_one_out_split, load_interactions
from .evaluation import MetricsReport, evaluate
from .hps import GranularitySchedule, schedule_k
from .model import VARIANTS, DTRecModel
from .training import TrainConfig, Trainer, load_model, train

__all__ = [
    "__version__",
    "DTRecModel",
    "GranularitySchedule",
    "HaltPolicy",
    "InteractionDataset",
    "MetricsReport",
    "SyntheticTaxonomy",
    "TrainConfig",
    "Trainer",
    "VARIANTS",
    "evaluate",
    "generate_synthetic",
    "leave_one_out_split",
    "load_interactions",
    "load_model",
    "schedule_k",
    "train",
]
