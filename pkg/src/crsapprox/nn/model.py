"""Network configuration, construction and analytic MAC planning."""

from dataclasses import dataclass

import numpy as np

from ..sampling import Policy
from ..tensor import conv_output_hw
from .layers import (
    BACKPROP_MODES,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2,
    ReLU,
    StepContext,
    softmax_cross_entropy,
)
from .ledger import ComputeLedger

LAYER_KINDS = ("fc", "conv", "relu", "maxpool", "dropout", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    dims: (in, out) for "fc"; (kh, kw, ic, oc) for "conv"; unused otherwise.
    Policies are only meaningful on "fc" and "conv" layers.
    """

    kind: str
    dims: tuple = ()
    forward_policy: Policy | None = None
    backward_policy: Policy | None = None
    backprop: str = "crs"
    pad: str = "same"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer kind must be one of {LAYER_KINDS}, got {self.kind!r}")
        if self.kind == "fc" and (len(self.dims) != 2 or min(self.dims) < 1):
            raise ValueError(f"fc layer needs dims (in, out) >= 1, got {self.dims}")
        if self.kind == "conv" and (len(self.dims) != 4 or min(self.dims) < 1):
            raise ValueError(f"conv layer needs dims (kh, kw, ic, oc) >= 1, got {self.dims}")
        if self.kind not in ("fc", "conv") and (self.forward_policy or self.backward_policy):
            raise ValueError(f"sampling policies apply to fc/conv layers only, not {self.kind}")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.backprop not in BACKPROP_MODES:
            raise ValueError(f"backprop mode must be one of {BACKPROP_MODES}")


@dataclass(frozen=True)
class TrainConfig:
    layers: tuple
    input_shape: tuple = (28, 28, 1)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 50
    epochs: int | None = None     # 20 when neither budget is given
    iterations: int | None = None
    seed: int = 0
    eval_every: int | None = None
    eval_batch: int = 500

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.epochs is not None and self.iterations is not None:
            raise ValueError("give at most one of epochs and iterations")
        if self.epochs is None and self.iterations is None:
            object.__setattr__(self, "epochs", 20)
        if (self.epochs or self.iterations) < 1:
            raise ValueError("training length must be positive")


class Network:
    """A sequential stack of layers ending in softmax cross-entropy."""

    def __init__(self, layers):
        self.layers = layers

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def backward(self, dlogits, ctx):
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d, ctx)
            if d is None:
                break

    def loss_and_grads(self, x, labels, ctx):
        logits = self.forward(x, ctx)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits, ctx)
        return loss

    def parameters(self):
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.params.items()}

    def gradients(self):
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.grads.items()}

    def sampled_layers(self):
        return [layer for layer in self.layers if isinstance(layer, (Dense, Conv2D))]

    def freeze_plans(self):
        """Reuse the most recent forward plans in every later forward pass."""
        for layer in self.sampled_layers():
            layer.fixed_plan = layer.last_plan

    def unfreeze_plans(self):
        for layer in self.sampled_layers():
            layer.fixed_plan = None

    def predict(self, x, batch=500):
        """Class predictions with exact operations (no sampling, no dropout)."""
        ctx = StepContext(train=False)
        out = [np.argmax(self.forward(x[i:i + batch], ctx), axis=1)
               for i in range(0, len(x), batch)]
        return np.concatenate(out)

    def accuracy(self, x, labels, batch=500):
        return float(np.mean(self.predict(x, batch) == labels))


def build_network(specs, rng):
    """Instantiate layers; parameters come from ``rng``.

    A parametric layer only propagates gradient to its input when some
    earlier layer has parameters.
    """
    layers = []
    seen_params = False
    counts = {}
    for spec in specs:
        counts[spec.kind] = counts.get(spec.kind, 0) + 1
        name = f"{spec.kind}{counts[spec.kind]}"
        if spec.kind == "fc":
            layer = Dense(name, *spec.dims, rng, spec.forward_policy, spec.backward_policy,
                          spec.backprop, need_input_grad=seen_params)
            seen_params = True
        elif spec.kind == "conv":
            layer = Conv2D(name, *spec.dims, rng, spec.pad, spec.forward_policy,
                           spec.backward_policy, spec.backprop, need_input_grad=seen_params)
            seen_params = True
        elif spec.kind == "relu":
            layer = ReLU(name)
        elif spec.kind == "maxpool":
            layer = MaxPool2(name)
        elif spec.kind == "dropout":
            layer = Dropout(name, spec.rate)
        else:
            layer = Flatten(name)
        layers.append(layer)
    return Network(layers)


# ---------------------------------------------------------------- presets

def _policies(forward_ratio, backward_ratio, selection, min_k, replacement=False, scaled=False):
    fwd = None
    if forward_ratio is not None:
        fwd = Policy(selection, replacement, scaled, ratio=forward_ratio)
    bwd = None
    if backward_ratio is not None:
        bwd = Policy("topk", ratio=backward_ratio, min_k=min_k)
    return fwd, bwd


def mlp_specs(forward_ratio=None, backward_ratio=None, backprop="crs", selection="topk",
              replacement=False, scaled=False, min_k=10, hidden=500):
    """784 -> hidden (ReLU) -> 10."""
    fwd, bwd = _policies(forward_ratio, backward_ratio, selection, min_k, replacement, scaled)
    return (
        LayerSpec("flatten"),
        LayerSpec("fc", (784, hidden), fwd, bwd, backprop),
        LayerSpec("relu"),
        LayerSpec("fc", (hidden, 10), fwd, bwd, backprop),
    )


def cnn_specs(forward_ratio=None, backward_ratio=None, selection="topk", replacement=False,
              scaled=False, min_k=10, dropout=0.5):
    """Two 5x5 conv + 2x2 pool blocks, fc 3136 -> 1024, dropout, fc 1024 -> 10.

    The first convolution has a single input channel and is never sampled.
    """
    fwd, bwd = _policies(forward_ratio, backward_ratio, selection, min_k, replacement, scaled)
    return (
        LayerSpec("conv", (5, 5, 1, 32), None, bwd, pad="same"),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("conv", (5, 5, 32, 64), fwd, bwd, pad="same"),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("flatten"),
        LayerSpec("fc", (3136, 1024), fwd, bwd),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=dropout),
        LayerSpec("fc", (1024, 10), fwd, bwd),
    )


# ---------------------------------------------------------------- analytic MAC plan

def _k(policy, n):
    return n if policy is None else policy.resolve_k(n)


def planned_ledger(specs, batch, input_shape=(28, 28, 1)):
    """MAC counts for one training step, derived from shapes and policies only."""
    ledger = ComputeLedger()
    shape = (batch,) + tuple(input_shape)
    seen_params = False
    counts = {}
    for spec in specs:
        counts[spec.kind] = counts.get(spec.kind, 0) + 1
        name = f"{spec.kind}{counts[spec.kind]}"
        bpol = spec.backward_policy
        if spec.kind == "fc":
            n_in, n_out = spec.dims
            exact = batch * n_in * n_out
            kf = _k(spec.forward_policy, n_in)
            ledger.record(name, "fwd", exact, batch * kf * n_out)
            if spec.backprop == "meprop" and bpol is not None:
                kd = _k(bpol, n_out)
                ledger.record(name, "bwd-weight", exact, kf * batch * kd)
            else:
                ledger.record(name, "bwd-weight", exact, kf * _k(bpol, batch) * n_out)
                kd = _k(bpol, n_out)
            if seen_params:
                ledger.record(name, "bwd-data", exact, batch * kd * kf)
            seen_params = True
            shape = (batch, n_out)
        elif spec.kind == "conv":
            kh, kw, ic, oc = spec.dims
            oh, ow = conv_output_hw(shape[1], shape[2], kh, kw, spec.pad)
            positions = batch * oh * ow
            exact = positions * oc * kh * kw * ic
            kf = _k(spec.forward_policy, ic)
            ledger.record(name, "fwd", exact, positions * kh * kw * kf * oc)
            ledger.record(name, "bwd-weight", exact, kh * kw * kf * _k(bpol, positions) * oc)
            if seen_params:
                ledger.record(name, "bwd-data", exact, positions * _k(bpol, oc) * kh * kw * kf)
            seen_params = True
            shape = (batch, oh, ow, oc)
        elif spec.kind == "maxpool":
            shape = (batch, shape[1] // 2, shape[2] // 2, shape[3])
        elif spec.kind == "flatten":
            shape = (batch, int(np.prod(shape[1:])))
    return ledger
