"""Meta-learned task weighting (Auto-Lambda) and baselines on a small numpy autodiff core."""

from .autodiff import Tape, backward, grad_check, record_forward, set_debug
from .config import ConfigError, RunConfig
from .experiment import NumericalDivergence, RunLog, build_family, emit_trajectory, load_trajectory, run
from .grouping import RelationshipMatrix, grouping_search, relationship_matrix
from .metrics import MetricTable, delta_mtl
from .network import MultiTaskNet, NetworkSpec, build_network
from .tasks import RelatednessPlan, TaskFamily, add_noise_task, gen_teacher_family, load_csv_dataset, sample_batch_pair
from .weighting import (
    LambdaState,
    autolambda_meta_grad_exact,
    autolambda_meta_grad_fd,
    autolambda_update,
    dwa_weights,
    gcs_weights,
    stochastic_task_subset,
    uncertainty_weighted_loss,
)

__version__ = "0.1.0"

__all__ = [
    "Tape", "backward", "grad_check", "record_forward", "set_debug",
    "ConfigError", "RunConfig",
    "NumericalDivergence", "RunLog", "build_family", "emit_trajectory", "load_trajectory", "run",
    "RelationshipMatrix", "grouping_search", "relationship_matrix",
    "MetricTable", "delta_mtl",
    "MultiTaskNet", "NetworkSpec", "build_network",
    "RelatednessPlan", "TaskFamily", "add_noise_task", "gen_teacher_family", "load_csv_dataset", "sample_batch_pair",
    "LambdaState", "autolambda_meta_grad_exact", "autolambda_meta_grad_fd", "autolambda_update",
    "dwa_weights", "gcs_weights", "stochastic_task_subset", "uncertainty_weighted_loss",
]
