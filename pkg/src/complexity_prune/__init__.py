"""Instance-complexity-aware differentiable channel pruning at desk scale."""

from .arch import ArchitectureSpec, LayerSpec, count_flops, count_params, flops_reduction
from .masks import MaskNetwork, aggregate_mask, complexity_weights, sample_masks, uniform_weights
from .models import PlainCNN, ResNet, build_model, forward_baseline, forward_masked
from .objective import LossBreakdown, PruningConfig, mse_loss, polarization_regularizer, total_loss
from .prune import PruneDecision, average_masks, binarize, surgery

__version__ = "0.1.0"
