"""Layers with manual backpropagation. Activations are NHWC or (batch, features)."""

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..tensor import ShapeError, matmul_exact
from .ledger import ComputeLedger
from .ops import backward_conv, backward_fc, forward_conv, forward_fc, meprop_backward_fc

BACKPROP_MODES = ("crs", "meprop")


@dataclass
class StepContext:
    """Per-step state threaded through forward and backward.

    Sampling only happens when ``train`` is true; evaluation is always exact.
    """

    train: bool = False
    sampling_rng: np.random.Generator | None = None
    dropout_rng: np.random.Generator | None = None
    ledger: ComputeLedger | None = None
    mm: Callable = matmul_exact


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def __init__(self, name):
        self.name = name
        self.params = {}
        self.grads = {}

    def forward(self, x, ctx):
        raise NotImplementedError

    def backward(self, dy, ctx):
        raise NotImplementedError


class _Sampled(Layer):
    """Shared plumbing for layers whose heavy product can be sampled."""

    def __init__(self, name, forward_policy, backward_policy, backprop, need_input_grad):
        super().__init__(name)
        if backprop not in BACKPROP_MODES:
            raise ValueError(f"backprop mode must be one of {BACKPROP_MODES}, got {backprop!r}")
        self.forward_policy = forward_policy
        self.backward_policy = backward_policy
        self.backprop = backprop
        self.need_input_grad = need_input_grad
        self.fixed_plan = None
        self.last_plan = None
        self._cache = None

    def _counting(self, ctx):
        if not ctx.train or ctx.ledger is None:
            return None, None
        counts = defaultdict(int)

        def tally(pass_name, macs):
            counts[pass_name] += macs
        return counts, tally

    def _sampling_on(self, ctx):
        return ctx.train and (self.forward_policy is not None or self.fixed_plan is not None)

    def _record(self, ctx, counts, exact, passes):
        if counts is None:
            return
        for p in passes:
            ctx.ledger.record(self.name, p, exact, counts[p])


class Dense(_Sampled):
    """Fully-connected layer Y = X W + b."""

    def __init__(self, name, n_in, n_out, rng, forward_policy=None, backward_policy=None,
                 backprop="crs", need_input_grad=True):
        super().__init__(name, forward_policy, backward_policy, backprop, need_input_grad)
        self.n_in, self.n_out = n_in, n_out
        self.params = {"W": glorot_uniform(rng, (n_in, n_out), n_in, n_out),
                       "b": np.zeros(n_out)}

    def forward(self, x, ctx):
        w = self.params["W"]
        counts, tally = self._counting(ctx)
        if self._sampling_on(ctx):
            y, plan = forward_fc(x, w, self.forward_policy, ctx.sampling_rng, ctx.mm, tally,
                                 plan=self.fixed_plan)
        else:
            y, plan = forward_fc(x, w, mm=ctx.mm, tally=tally)
        self._record(ctx, counts, x.shape[0] * self.n_in * self.n_out, ("fwd",))
        self.last_plan = plan
        self._cache = (x, plan)
        return y + self.params["b"]

    def backward(self, dy, ctx):
        x, plan = self._cache
        w = self.params["W"]
        counts, tally = self._counting(ctx)
        bpol = self.backward_policy if ctx.train else None
        if bpol is not None and self.backprop == "meprop" and bpol.resolve_k(self.n_out) < self.n_out:
            dx, dw = meprop_backward_fc(x, w, dy, bpol.resolve_k(self.n_out), ctx.mm, tally, plan,
                                        self.need_input_grad)
        else:
            if self.backprop == "meprop":
                bpol = None
            dx, dw = backward_fc(plan, x, w, dy, bpol, ctx.sampling_rng, ctx.mm, tally,
                                 self.need_input_grad)
        passes = ("bwd-weight", "bwd-data") if self.need_input_grad else ("bwd-weight",)
        self._record(ctx, counts, x.shape[0] * self.n_in * self.n_out, passes)
        self.grads = {"W": dw, "b": dy.sum(axis=0)}
        return dx


class Conv2D(_Sampled):
    """Stride-1 convolution with HWIO kernel and input-channel sampling."""

    def __init__(self, name, kh, kw, ic, oc, rng, pad="same", forward_policy=None,
                 backward_policy=None, backprop="crs", need_input_grad=True):
        super().__init__(name, forward_policy, backward_policy, backprop, need_input_grad)
        if backprop == "meprop":
            raise ValueError("meProp backward is defined for fully-connected layers only")
        self.shape = (kh, kw, ic, oc)
        self.pad = pad
        self.params = {"K": glorot_uniform(rng, self.shape, kh * kw * ic, kh * kw * oc),
                       "b": np.zeros(oc)}

    def _exact_macs(self, out):
        kh, kw, ic, oc = self.shape
        return out.shape[0] * out.shape[1] * out.shape[2] * oc * kh * kw * ic

    def forward(self, x, ctx):
        k = self.params["K"]
        counts, tally = self._counting(ctx)
        if self._sampling_on(ctx):
            out, plan, cols = forward_conv(x, k, self.forward_policy, self.pad, ctx.sampling_rng,
                                           ctx.mm, tally, plan=self.fixed_plan, return_cols=True)
        else:
            out, plan, cols = forward_conv(x, k, None, self.pad, mm=ctx.mm, tally=tally,
                                           return_cols=True)
        self._record(ctx, counts, self._exact_macs(out), ("fwd",))
        self.last_plan = plan
        self._cache = (x, plan, cols if ctx.train else None)
        return out + self.params["b"]

    def backward(self, dout, ctx):
        x, plan, cols = self._cache
        counts, tally = self._counting(ctx)
        bpol = self.backward_policy if ctx.train else None
        dx, dk = backward_conv(plan, x, self.params["K"], dout, self.pad, bpol, ctx.sampling_rng,
                               ctx.mm, tally, self.need_input_grad, cols)
        passes = ("bwd-weight", "bwd-data") if self.need_input_grad else ("bwd-weight",)
        self._record(ctx, counts, self._exact_macs(dout), passes)
        self.grads = {"K": dk, "b": dout.sum(axis=(0, 1, 2))}
        return dx


class ReLU(Layer):
    def forward(self, x, ctx):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy, ctx):
        return np.where(self._mask, dy, 0.0)


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; gradient goes to the first maximum in
    row-major window order."""

    def forward(self, x, ctx):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"2x2 pooling needs even spatial dims, got {h}x{w}")
        win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(b, h // 2, w // 2, c, 4)
        arg = np.argmax(win, axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy, ctx):
        shape, arg = self._cache
        b, h, w, c = shape
        win = np.zeros(dy.shape + (4,))
        np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
        win = win.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return win.reshape(shape)


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-rate) during training."""

    def __init__(self, name, rate):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, ctx):
        if not ctx.train or self.rate == 0.0:
            self._mask = None
            return x
        keep = ctx.dropout_rng.random(x.shape) >= self.rate
        self._mask = keep / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy, ctx):
        return dy if self._mask is None else dy * self._mask


class Flatten(Layer):
    def forward(self, x, ctx):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, ctx):
        return dy.reshape(self._shape)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
