"""Forward and backward passes of fully-connected and convolutional layers
with column-row (channel) sampling.

The backward pass reuses the forward plan: only sampled features receive
gradient, and the forward scales are applied again so that the gradients
are exact derivatives of the sampled forward function. An optional
backward policy additionally samples each backward product over its own
shared dimension.

``tally(pass_name, macs)`` is called once per matrix product actually
performed, with pass_name one of "fwd", "bwd-data", "bwd-weight".
"""

import numpy as np

from ..approx import apply_matmul_plan, sample_conv_operands
from ..sampling import make_plan, topk_plan
from ..tensor import (
    ShapeError,
    channel_norms,
    col2im,
    column_row_norms,
    conv_output_hw,
    im2col,
    matmul_exact,
)


def _product(mm, tally, pass_name, a, b):
    if tally is not None:
        tally(pass_name, a.shape[0] * a.shape[1] * b.shape[1])
    return mm(a, b)


def _sampled_product(mm, tally, pass_name, a, b, policy, rng):
    """``a @ b``, column-row sampled over the shared dimension if a policy is given.

    When the policy's floor already covers the whole shared dimension the
    product is computed exactly.
    """
    if policy is None or policy.resolve_k(a.shape[1]) >= a.shape[1]:
        return _product(mm, tally, pass_name, a, b)
    cn, rn = column_row_norms(a, b)
    plan = make_plan(cn * rn, policy, rng)
    if tally is not None:
        tally(pass_name, a.shape[0] * plan.k * b.shape[1])
    return apply_matmul_plan(a, b, plan, mm)


def _scatter_rows(n, idx, values):
    out = np.zeros((n,) + values.shape[1:])
    if len(np.unique(idx)) == len(idx):
        out[idx] = values
    else:
        np.add.at(out, idx, values)
    return out


# ---------------------------------------------------------------- fully connected

def forward_fc(x, w, policy=None, rng=None, mm=matmul_exact, tally=None, plan=None):
    """Y = X W, or its sampled estimate. Returns (Y, plan or None).

    A given ``plan`` is reused as-is instead of drawing a new one.
    """
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} does not match weight rows {w.shape[0]}")
    if plan is None and policy is not None:
        cn, rn = column_row_norms(x, w)
        plan = make_plan(cn * rn, policy, rng)
    if plan is None or plan.is_identity:
        return _product(mm, tally, "fwd", x, w), plan
    if plan.n != x.shape[1]:
        raise ShapeError(f"plan covers {plan.n} pairs, layer has {x.shape[1]}")
    xs = x[:, plan.indices] * plan.scales
    return _product(mm, tally, "fwd", xs, w[plan.indices, :]), plan


def _restrict_fc(plan, x, w):
    if plan is None or plan.is_identity:
        return x, w, None
    if plan.n != x.shape[1] or plan.n != w.shape[0]:
        raise ShapeError(f"plan covers {plan.n} pairs, layer has {x.shape[1]}")
    return x[:, plan.indices] * plan.scales, w[plan.indices, :], plan


def _expand_fc(plan, x_shape, w_shape, dxs, dws):
    if plan is None:
        return dxs, dws
    dw = _scatter_rows(w_shape[0], plan.indices, dws)
    dx = None
    if dxs is not None:
        dx = _scatter_rows(x_shape[1], plan.indices, (dxs * plan.scales).T).T
    return dx, dw


def backward_fc(plan, x, w, dy, backward_policy=None, rng=None, mm=matmul_exact,
                tally=None, need_dx=True):
    """Gradients (dX, dW) of Y = X~ D W~ restricted to the forward plan.

    Unsampled features get exactly zero gradient. dX is None when
    ``need_dx`` is false (first layer).
    """
    xs, ws, plan = _restrict_fc(plan, x, w)
    dws = _sampled_product(mm, tally, "bwd-weight", xs.T, dy, backward_policy, rng)
    dxs = None
    if need_dx:
        dxs = _sampled_product(mm, tally, "bwd-data", dy, ws.T, backward_policy, rng)
    return _expand_fc(plan, x.shape, w.shape, dxs, dws)


def meprop_backward_fc(x, w, dy, k, mm=matmul_exact, tally=None, plan=None, need_dx=True):
    """Backward pass keeping only the k output units with the largest
    gradient-column norms (unscaled); the forward pass is untouched."""
    xs, ws, plan = _restrict_fc(plan, x, w)
    scores = np.sqrt(np.sum(dy * dy, axis=0))
    keep = topk_plan(scores, k).indices
    dyk = dy[:, keep]
    dws = np.zeros(ws.shape)
    dws[:, keep] = _product(mm, tally, "bwd-weight", xs.T, dyk)
    dxs = None
    if need_dx:
        dxs = _product(mm, tally, "bwd-data", dyk, ws[:, keep].T)
    return _expand_fc(plan, x.shape, w.shape, dxs, dws)


# ---------------------------------------------------------------- convolution

def _restrict_conv(plan, x, k):
    if plan is None or plan.is_identity:
        return x, k, None
    if plan.n != x.shape[3] or plan.n != k.shape[2]:
        raise ShapeError(f"plan covers {plan.n} channels, layer has {x.shape[3]}")
    xs, ks = sample_conv_operands(x, k, plan)
    return xs, ks, plan


def forward_conv(x, k, policy=None, pad="same", rng=None, mm=matmul_exact, tally=None,
                 plan=None, return_cols=False):
    """Channel-sampled convolution. Returns (O, plan) and the patch matrix
    when ``return_cols`` is set, so backward can skip rebuilding it."""
    if x.shape[3] != k.shape[2]:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {k.shape[2]}")
    if plan is None and policy is not None:
        scores = channel_norms(x, "input") * channel_norms(k, "kernel")
        plan = make_plan(scores, policy, rng)
    xs, ks, _ = _restrict_conv(plan, x, k)
    kh, kw, ic, oc = ks.shape
    cols = im2col(xs, kh, kw, pad)
    out = _product(mm, tally, "fwd", cols, ks.reshape(kh * kw * ic, oc))
    oh, ow = conv_output_hw(x.shape[1], x.shape[2], kh, kw, pad)
    out = out.reshape(x.shape[0], oh, ow, oc)
    if return_cols:
        return out, plan, cols
    return out, plan


def backward_conv(plan, x, k, dout, pad="same", backward_policy=None, rng=None,
                  mm=matmul_exact, tally=None, need_dx=True, cols=None):
    """Gradients (dI, dK) of the channel-sampled convolution for a fixed plan."""
    xs, ks, plan = _restrict_conv(plan, x, k)
    kh, kw, ic, oc = ks.shape
    if cols is None:
        cols = im2col(xs, kh, kw, pad)
    dmat = dout.reshape(-1, oc)
    dks = _sampled_product(mm, tally, "bwd-weight", cols.T, dmat, backward_policy, rng)
    dks = dks.reshape(kh, kw, ic, oc)
    dxs = None
    if need_dx:
        dcols = _sampled_product(mm, tally, "bwd-data", dmat, ks.reshape(-1, oc).T,
                                 backward_policy, rng)
        dxs = col2im(dcols, xs.shape, kh, kw, pad)
    if plan is None:
        return dxs, dks
    root = np.sqrt(plan.scales)
    # scatter along the channel axis; repeated indices accumulate
    dk = _scatter_rows(k.shape[2], plan.indices,
                       np.moveaxis(dks * root[:, None], 2, 0))
    dk = np.moveaxis(dk, 0, 2)
    dx = None
    if dxs is not None:
        dx = _scatter_rows(x.shape[3], plan.indices, np.moveaxis(dxs * root, 3, 0))
        dx = np.moveaxis(dx, 0, 3)
    return dx, dk
