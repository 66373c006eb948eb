from .data import IdxFormatError, load_idx, load_idx_pair, local_gradient, partition_iid, write_idx
from .loop import (
    RUN_CSV_HEADER,
    FleetConfig,
    RunRecord,
    RunResult,
    Theorem1Report,
    TrainingDiverged,
    run_experiment,
    theorem1_check,
    theorem1_lr,
    theorem1_rhs,
    train,
    write_records,
)
from .tasks import LogisticTask, MLPTask, QuadraticTask, TaskSpec, build_task, gaussian_mixture
