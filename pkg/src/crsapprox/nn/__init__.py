from .layers import StepContext, softmax_cross_entropy
from .ledger import ComputeLedger, compute_reduction
from .model import LayerSpec, Network, TrainConfig, build_network, cnn_specs, mlp_specs, planned_ledger
from .ops import backward_conv, backward_fc, forward_conv, forward_fc, meprop_backward_fc
from .optim import AdamState, adam_step
from .train import DivergenceError, TrainResult, train

__all__ = [
    "AdamState", "ComputeLedger", "DivergenceError", "LayerSpec", "Network", "StepContext",
    "TrainConfig", "TrainResult", "adam_step", "backward_conv", "backward_fc", "build_network",
    "cnn_specs", "compute_reduction", "forward_conv", "forward_fc", "meprop_backward_fc",
    "mlp_specs", "planned_ledger", "softmax_cross_entropy", "train",
]
