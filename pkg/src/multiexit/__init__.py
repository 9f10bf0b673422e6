"""Multi-exit networks on a small numpy autodiff engine.

Training supports gradient equilibrium, inline subnetwork collaboration and
one-for-all distillation. Inference supports confidence-based early exit and
budgeted batch evaluation.
"""

from .autodiff import (
    Tensor,
    backward,
    check_gradients,
    cross_entropy_loss,
    exact_derivatives,
    kl_divergence_loss,
    no_grad,
    rescale_gradient,
    softmax_with_temperature,
    stop_gradient,
)
from .config import RunConfig, load_config
from .data import Dataset, DatasetSpec, generate_synthetic, load_idx, make_dataset
from .errors import ConfigError, IdxFormatError, InfeasibleBudgetError, TrainingDivergedError
from .inference import (
    ThresholdSchedule,
    anytime_eval,
    budgeted_batch_eval,
    calibrate_thresholds,
    predict_adaptive,
)
from .network import (
    ModelConfig,
    MultiExitModel,
    build_model,
    count_macs,
    forward_all,
    forward_until,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    TrainConfig,
    ge_forward_loss,
    measure_grad_variance,
    ofa_exit_loss,
    plain_sum_loss,
    sgd_step,
    train,
    train_phase1,
    train_phase2,
)

__version__ = "0.1.0"
