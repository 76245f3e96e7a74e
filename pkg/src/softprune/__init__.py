"""Filter pruning (hard, soft, asymptotic-soft) for small CNNs on numpy."""

from .analysis import FlopsReport, SpeedupReport, bench_forward, count_flops, layerwise_reduction, speedup_report
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, gen_synthetic, load_cifar10
from .models import Model, build_from_arch, build_plain_cnn, build_resnet, residual_add
from .pruning import (
    CompactModel,
    MaskState,
    PruneConfig,
    PruneSchedule,
    extract_compact,
    filter_norm,
    hard_prune,
    num_to_prune,
    prune_step,
    rate_at,
    select_prune_set,
    solve_schedule,
    zeroize_filters,
)
from .train import MetricsRow, TrainConfig, TrainResult, train

__version__ = "0.1.0"
