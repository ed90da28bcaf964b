"""Low-bit quantization toolkit: optimal clipping search, weight reshaping,
group-wise quantization with batch-norm folding, and a small numpy CNN stack."""

__version__ = "0.1.0"

from .quant import (Distribution, InvalidSpecError, NonFiniteError, QuantError, QuantReport, QuantSpec,
                    RangeMode, ZeroNormError, optimal_alpha, quantize, quantized_loss, sample_distribution)
from .reshape import ActivationTracker, ClipConfig, clip_weights, update_activation_threshold, weight_threshold
from .grouping import (LAYER_WISE, BnFoldPlan, FoldError, GroupScheme, fold_groups_into_bn,
                       group_optimal_alphas, group_quantize, partition_filters)
from .nn import LayerGraph, build_toy_cnn, configure_quant
from .train import (DatasetSpec, DivergenceError, Phase, Schedule, TrainRun, finalize_for_inference,
                    finetune_lowbit, generate_toy_dataset, load_run, pretrain_float, save_run, start_finetune)
from .io import FormatError, read_tensor, write_tensor
