"""Dense containers, exact reference kernels, norms and seeded randomness.

Matrices are 2-D float64 numpy arrays; 4-D tensors use NHWC layout for
activations (batch, height, width, channels) and HWIO layout for kernels
(kernel height, kernel width, input channels, output channels).

Every exact operation comes in two flavours: a naive loop kernel
(``*_reference``) that serves as the correctness oracle and can count its
multiply-accumulates, and a vectorised kernel used everywhere else.
"""

import numpy as np

PADDING_MODES = ("valid", "same")


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} has an empty dimension: {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite values")
    return a


def as_tensor4(t, name="tensor"):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4:
        raise ShapeError(f"{name} must be 4-D, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {t.shape}")
    if not np.all(np.isfinite(t)):
        raise DomainError(f"{name} contains non-finite values")
    return t


# ---------------------------------------------------------------- rng

def make_rng(seed):
    """PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def trial_rng(seed, trial):
    """Independent stream for one Monte Carlo trial (seed xor trial index)."""
    return make_rng(int(seed) ^ int(trial))


def spawn_rngs(seed, count):
    """``count`` statistically independent generators derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(s)) for s in children]


# ---------------------------------------------------------------- matmul

class MacCounter:
    """Tally of multiply-accumulates performed by the reference kernels."""

    def __init__(self):
        self.macs = 0

    def reset(self):
        self.macs = 0


def matmul_reference(a, b, counter=None):
    """Triple-loop product. Slow; use only on small operands."""
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    m, n = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    macs = 0
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(n):
                acc += a[i, t] * b[t, j]
                macs += 1
            out[i, j] = acc
    if counter is not None:
        counter.macs += macs
    return out


def matmul_exact(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def counting_matmul(counter):
    """A matmul callable that runs the reference loops and tallies MACs."""
    def mm(a, b):
        return matmul_reference(a, b, counter)
    return mm


# ---------------------------------------------------------------- convolution

def pad_amounts(kh, kw, pad):
    """((top, bottom), (left, right)) zero padding for a padding mode."""
    if pad == "valid":
        return (0, 0), (0, 0)
    if pad == "same":
        top = (kh - 1) // 2
        left = (kw - 1) // 2
        return (top, kh - 1 - top), (left, kw - 1 - left)
    raise DomainError(f"unknown padding mode {pad!r}; expected one of {PADDING_MODES}")


def pad_input(x, kh, kw, pad):
    (t, b), (l, r) = pad_amounts(kh, kw, pad)
    if t == b == l == r == 0:
        return x
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))


def conv_output_hw(ih, iw, kh, kw, pad):
    (t, b), (l, r) = pad_amounts(kh, kw, pad)
    oh = ih + t + b - kh + 1
    ow = iw + l + r - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {ih + t + b}x{iw + l + r}")
    return oh, ow


def _check_conv_operands(x, k):
    x = as_tensor4(x, "input")
    k = as_tensor4(k, "kernel")
    if x.shape[3] != k.shape[2]:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {k.shape[2]}")
    return x, k


def conv2d_reference(x, k, pad="valid", counter=None):
    """Multi-channel convolution by direct summation over every index.

    O[b, oh, ow, oc] = sum_{ic, h, w} Ipad[b, oh + h, ow + w, ic] * K[h, w, ic, oc]
    """
    x, k = _check_conv_operands(x, k)
    bsz, ih, iw, ic = x.shape
    kh, kw, _, oc = k.shape
    oh, ow = conv_output_hw(ih, iw, kh, kw, pad)
    xp = pad_input(x, kh, kw, pad)
    out = np.zeros((bsz, oh, ow, oc))
    macs = 0
    for b in range(bsz):
        for i in range(oh):
            for j in range(ow):
                for o in range(oc):
                    acc = 0.0
                    for c in range(ic):
                        for h in range(kh):
                            for w in range(kw):
                                acc += xp[b, i + h, j + w, c] * k[h, w, c, o]
                                macs += 1
                    out[b, i, j, o] = acc
    if counter is not None:
        counter.macs += macs
    return out


def im2col(x, kh, kw, pad="valid"):
    """Patch matrix of shape (B*OH*OW, KH*KW*C), columns ordered (h, w, c).

    The column order matches ``kernel.reshape(KH*KW*C, OC)`` for HWIO kernels.
    """
    bsz, ih, iw, c = x.shape
    oh, ow = conv_output_hw(ih, iw, kh, kw, pad)
    xp = pad_input(x, kh, kw, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # (B, OH, OW, C, KH, KW) -> (B, OH, OW, KH, KW, C)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(bsz * oh * ow, kh * kw * c)


def col2im(cols, x_shape, kh, kw, pad="valid"):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    bsz, ih, iw, c = x_shape
    oh, ow = conv_output_hw(ih, iw, kh, kw, pad)
    (t, b), (l, r) = pad_amounts(kh, kw, pad)
    grad = np.zeros((bsz, ih + t + b, iw + l + r, c))
    cols = cols.reshape(bsz, oh, ow, kh, kw, c)
    for h in range(kh):
        for w in range(kw):
            grad[:, h:h + oh, w:w + ow, :] += cols[:, :, :, h, w, :]
    return grad[:, t:t + ih, l:l + iw, :]


def conv2d_exact(x, k, pad="valid", mm=matmul_exact):
    """Multi-channel convolution through im2col and one matrix product."""
    x, k = _check_conv_operands(x, k)
    bsz, ih, iw, _ = x.shape
    kh, kw, ic, oc = k.shape
    oh, ow = conv_output_hw(ih, iw, kh, kw, pad)
    cols = im2col(x, kh, kw, pad)
    out = mm(cols, k.reshape(kh * kw * ic, oc))
    return out.reshape(bsz, oh, ow, oc)


# ---------------------------------------------------------------- norms

def frobenius_norm(t):
    t = np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(t * t)))


def column_row_norms(a, b):
    """Euclidean norms of the columns of ``a`` and of the matching rows of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"column-row pairing needs A.cols == B.rows, got {a.shape}, {b.shape}")
    return np.sqrt(np.sum(a * a, axis=0)), np.sqrt(np.sum(b * b, axis=1))


def channel_norms(t, role="input"):
    """Per-input-channel Frobenius norms.

    role="input": channels are the last axis of an NHWC activation.
    role="kernel": channels are axis 2 of an HWIO kernel.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4:
        raise ShapeError(f"channel norms need a 4-D tensor, got shape {t.shape}")
    if role == "input":
        axes = (0, 1, 2)
    elif role == "kernel":
        axes = (0, 1, 3)
    else:
        raise DomainError(f"role must be 'input' or 'kernel', got {role!r}")
    return np.sqrt(np.sum(t * t, axis=axes))
