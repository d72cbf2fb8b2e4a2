"""Approximate products, error metrics, closed-form error moments and
brute-force enumeration oracles that check them.

Convolution closed forms follow the input-channel decomposition
O = sum_i I^[i] * K_[i]. Under k independent draws from p with 1/(k p_i)
weights the estimate is unbiased and

    E||O - O~||_F^2 = sum_i (||I^[i]||^2 ||K_[i]||^2 - E_i + R_i) / (k p_i) - ||O||^2 / k
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .sampling import SamplingPlan, make_plan
from .tensor import (
    DomainError,
    ShapeError,
    as_matrix,
    as_tensor4,
    channel_norms,
    column_row_norms,
    conv2d_exact,
    frobenius_norm,
    matmul_exact,
    pad_input,
    conv_output_hw,
)


@dataclass(frozen=True)
class ErrorReport:
    normalized_frobenius: float
    per_element_max: float
    spectral: float | None = None
    bound: float | None = None


@dataclass(frozen=True)
class CorrectionTerms:
    e_ik: np.ndarray
    r_ik: np.ndarray


# ---------------------------------------------------------------- approximate ops

def apply_matmul_plan(a, b, plan, mm=matmul_exact):
    """A~ D B~ for a fixed plan."""
    if plan.is_identity:
        return mm(a, b)
    return mm(a[:, plan.indices] * plan.scales, b[plan.indices, :])


def approx_matmul(a, b, policy, rng, mm=matmul_exact):
    """Column-row sampled estimate of ``a @ b``; returns (product, plan)."""
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    cn, rn = column_row_norms(a, b)
    plan = make_plan(cn * rn, policy, rng)
    return apply_matmul_plan(a, b, plan, mm), plan


def sample_conv_operands(x, k, plan):
    """Gather sampled channels, each operand carrying sqrt(scale)."""
    root = np.sqrt(plan.scales)
    return x[..., plan.indices] * root, k[:, :, plan.indices, :] * root[:, None]


def apply_conv_plan(x, k, plan, pad="valid", mm=matmul_exact):
    if plan.is_identity:
        return conv2d_exact(x, k, pad, mm=mm)
    xs, ks = sample_conv_operands(x, k, plan)
    return conv2d_exact(xs, ks, pad, mm=mm)


def approx_conv2d(x, k, policy, pad, rng, mm=matmul_exact):
    """Input-channel sampled convolution; returns (output, plan)."""
    x = as_tensor4(x, "input")
    k = as_tensor4(k, "kernel")
    if x.shape[3] != k.shape[2]:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {k.shape[2]}")
    scores = channel_norms(x, "input") * channel_norms(k, "kernel")
    plan = make_plan(scores, policy, rng)
    return apply_conv_plan(x, k, plan, pad, mm), plan


# ---------------------------------------------------------------- error metrics

def spectral_norm(m, tol=1e-6, max_iter=1000, seed=0):
    """Largest singular value by power iteration on m^T m."""
    m = np.asarray(m, dtype=np.float64)
    if not np.any(m):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = m.T @ (m @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(np.sqrt(nw))
        if abs(new - sigma) <= tol * new:
            return new
        sigma = new
    return sigma


def normalized_error(exact, approx, lhs, rhs):
    """Error of an approximate product relative to ||lhs||_F ||rhs||_F.

    ``spectral`` (matrices only) uses the same normalisation; ``per_element_max``
    is the raw largest absolute entry of the error.
    """
    exact = np.asarray(exact, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if exact.shape != approx.shape:
        raise ShapeError(f"exact {exact.shape} and approximate {approx.shape} differ")
    denom = frobenius_norm(lhs) * frobenius_norm(rhs)
    if denom == 0.0:
        raise DomainError("operands have zero norm")
    err = exact - approx
    spectral = spectral_norm(err) / denom if err.ndim == 2 else None
    return ErrorReport(
        normalized_frobenius=frobenius_norm(err) / denom,
        per_element_max=float(np.max(np.abs(err))),
        spectral=spectral,
    )


def matmul_error_bound(k):
    """Data-independent bound 1/sqrt(k) on the expected normalised Frobenius
    error of scaled norm-proportional sampling with replacement."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    return 1.0 / np.sqrt(k)


# ---------------------------------------------------------------- closed forms

def _single_channel_sq_terms(x, k, pad):
    # D_i = sum_{b,oh,ow,oc,h,w} Ipad^2 K^2 for every channel at once
    xsq = x * x
    ksq = k * k
    diag = np.empty(x.shape[3])
    for i in range(x.shape[3]):
        diag[i] = conv2d_exact(xsq[..., i:i + 1], ksq[:, :, i:i + 1, :], pad).sum()
    return diag


def correction_terms(x, k, pad="valid"):
    """E_IK and R_IK for every input channel.

    E_i is the deficit ||I^[i]||^2 ||K_[i]||^2 - D_i, where D_i sums the
    squared products actually paired by the convolution (edge positions of
    the input meet only part of the kernel). R_i sums the cross products
    between distinct kernel offsets (h, w) != (h', w'). Cost grows with
    (KH*KW)^2; intended for small verification instances.
    """
    x = as_tensor4(x, "input")
    k = as_tensor4(k, "kernel")
    if x.shape[3] != k.shape[2]:
        raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {k.shape[2]}")
    kh, kw, ic, _ = k.shape
    oh, ow = conv_output_hw(x.shape[1], x.shape[2], kh, kw, pad)
    xp = pad_input(x, kh, kw, pad)

    diag = _single_channel_sq_terms(x, k, pad)
    full = channel_norms(x, "input") ** 2 * channel_norms(k, "kernel") ** 2
    e_ik = full - diag

    offsets = [(h, w) for h in range(kh) for w in range(kw)]
    r_ik = np.zeros(ic)
    for (h, w), (h2, w2) in itertools.product(offsets, offsets):
        if (h, w) == (h2, w2):
            continue
        # (B, OH, OW, IC) windows for the two offsets
        xa = xp[:, h:h + oh, w:w + ow, :]
        xb = xp[:, h2:h2 + oh, w2:w2 + ow, :]
        kk = np.sum(k[h, w] * k[h2, w2], axis=1)          # (IC,) summed over oc
        r_ik += np.sum(xa * xb, axis=(0, 1, 2)) * kk
    return CorrectionTerms(e_ik=e_ik, r_ik=r_ik)


def _check_dist(dist, n):
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != (n,):
        raise ShapeError(f"distribution has shape {dist.shape}, expected ({n},)")
    return dist


def conv_expected_error(x, k, dist, nsamples, pad="valid"):
    """Closed-form E||O - O~||_F^2 for scaled sampling with replacement."""
    x = as_tensor4(x, "input")
    k = as_tensor4(k, "kernel")
    if nsamples < 1:
        raise DomainError(f"sample count must be >= 1, got {nsamples}")
    dist = _check_dist(dist, x.shape[3])
    corr = correction_terms(x, k, pad)
    alpha_sq = (channel_norms(x, "input") ** 2 * channel_norms(k, "kernel") ** 2
                - corr.e_ik + corr.r_ik)
    contributing = alpha_sq > 0
    if np.any(contributing & (dist <= 0)):
        raise DomainError("zero probability assigned to a contributing channel")
    total = np.sum(alpha_sq[contributing] / dist[contributing])
    out = conv2d_exact(x, k, pad)
    return float((total - frobenius_norm(out) ** 2) / nsamples)


def conv_variance_element(x, k, dist, nsamples, coords, pad="valid"):
    """Variance of one output entry O~[b, oh, ow, oc], expanded into squared
    and cross terms over kernel offsets."""
    x = as_tensor4(x, "input")
    k = as_tensor4(k, "kernel")
    if nsamples < 1:
        raise DomainError(f"sample count must be >= 1, got {nsamples}")
    dist = _check_dist(dist, x.shape[3])
    kh, kw, ic, oc = k.shape
    oh, ow = conv_output_hw(x.shape[1], x.shape[2], kh, kw, pad)
    b, i, j, o = coords
    if not (0 <= b < x.shape[0] and 0 <= i < oh and 0 <= j < ow and 0 <= o < oc):
        raise DomainError(f"coords {coords} outside output shape {(x.shape[0], oh, ow, oc)}")
    xp = pad_input(x, kh, kw, pad)
    patch = xp[b, i:i + kh, j:j + kw, :]                    # (KH, KW, IC)
    prods = (patch * k[:, :, :, o]).reshape(kh * kw, ic)   # per-offset products
    squares = np.sum(prods ** 2, axis=0)
    cross = np.sum(prods, axis=0) ** 2 - squares
    second = squares + cross
    exact = float(np.sum(prods))
    contributing = second > 0
    if np.any(contributing & (dist <= 0)):
        raise DomainError("zero probability assigned to a contributing channel")
    return float((np.sum(second[contributing] / dist[contributing]) - exact ** 2) / nsamples)


# ---------------------------------------------------------------- enumeration oracles

def enumerate_outcomes(dist, nsamples):
    """Every ordered tuple of k indices drawn with replacement, with its probability."""
    dist = np.asarray(dist, dtype=np.float64)
    support = [i for i in range(len(dist)) if dist[i] > 0]
    for combo in itertools.product(support, repeat=nsamples):
        yield combo, float(np.prod(dist[list(combo)]))


def _plan_from_tuple(combo, dist):
    idx = np.asarray(combo)
    return SamplingPlan(len(dist), idx, 1.0 / (len(idx) * dist[idx]), "nps", True, True, dist)


def matmul_moments_by_enumeration(a, b, dist, nsamples):
    """Exact mean and element-wise variance of the scaled with-replacement
    estimator, by summing over all n^k outcomes."""
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    mean = np.zeros((a.shape[0], b.shape[1]))
    second = np.zeros_like(mean)
    for combo, prob in enumerate_outcomes(dist, nsamples):
        est = apply_matmul_plan(a, b, _plan_from_tuple(combo, dist))
        mean += prob * est
        second += prob * est * est
    return mean, second - mean * mean


def conv_moments_by_enumeration(x, k, dist, nsamples, pad="valid"):
    """Exact mean, element-wise variance and expected squared Frobenius error
    of the scaled with-replacement channel-sampled convolution."""
    x = as_tensor4(x, "input")
    k = as_tensor4(k, "kernel")
    exact = conv2d_exact(x, k, pad)
    mean = np.zeros_like(exact)
    second = np.zeros_like(exact)
    sq_err = 0.0
    for combo, prob in enumerate_outcomes(dist, nsamples):
        est = apply_conv_plan(x, k, _plan_from_tuple(combo, dist), pad)
        mean += prob * est
        second += prob * est * est
        sq_err += prob * frobenius_norm(exact - est) ** 2
    return mean, second - mean * mean, sq_err
