"""Multi-scale orthogonal low-rank adapters with sensitivity-based rank pruning."""

from .adapters import (
    Lora2Adapter,
    Lora2Config,
    LoraAdapter,
    SvdAdapter,
    adapted_forward,
    delta_matrix,
    effective_rank,
    init_lora,
    init_lora2,
    init_svd,
    merge_into_base,
    param_count,
)
from .allocation import (
    BudgetSchedule,
    SensitivityState,
    budget_at,
    ema_update,
    global_mask_update,
    importance_full,
    importance_simplified,
    raw_sensitivity,
    skipped_fraction,
)
from .autodiff import Tape, Tensor, backward, finite_diff_check, matmul
from .orthogonality import OrthConfig, OrthMode, gram_penalty, orth_loss

__version__ = "0.1.0"
