import numpy as np
import pytest

from crsapprox.approx import (
    apply_conv_plan,
    approx_conv2d,
    approx_matmul,
    conv_expected_error,
    conv_moments_by_enumeration,
    conv_variance_element,
    correction_terms,
    matmul_error_bound,
    matmul_moments_by_enumeration,
    normalized_error,
    spectral_norm,
)
from crsapprox.sampling import (
    Policy,
    conv_nps_distribution,
    conv_optimal_distribution,
    nps_distribution,
    topk_plan,
    uniform_distribution,
)
from crsapprox.tensor import DomainError, column_row_norms, conv2d_exact, make_rng


@pytest.fixture
def matmul_pair():
    rng = make_rng(0)
    return rng.standard_normal((4, 3)), rng.standard_normal((3, 2))


@pytest.fixture
def conv_pair():
    rng = make_rng(1)
    return rng.standard_normal((1, 4, 4, 3)), rng.standard_normal((2, 2, 3, 2))


def channel_outputs(x, k, pad="valid"):
    """Contribution of each input channel to the exact convolution."""
    return [conv2d_exact(x[..., i:i + 1], k[:, :, i:i + 1, :], pad) for i in range(x.shape[3])]


def brute_force_terms(x, k):
    """Paired squares D_i and distinct-offset cross terms R_i by explicit loops
    over output positions (valid padding)."""
    kh, kw, ic, oc = k.shape
    oh, ow = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    d = np.zeros(ic)
    r = np.zeros(ic)
    offsets = [(h, w) for h in range(kh) for w in range(kw)]
    for c in range(ic):
        for b in range(x.shape[0]):
            for i in range(oh):
                for j in range(ow):
                    for o in range(oc):
                        for (h, w) in offsets:
                            t1 = x[b, i + h, j + w, c] * k[h, w, c, o]
                            for (h2, w2) in offsets:
                                t2 = x[b, i + h2, j + w2, c] * k[h2, w2, c, o]
                                if (h, w) == (h2, w2):
                                    d[c] += t1 * t2
                                else:
                                    r[c] += t1 * t2
    return d, r


@pytest.mark.parametrize("selection,scaled", [
    ("uniform", False), ("uniform", True), ("nps", False), ("nps", True), ("topk", False),
])
def test_full_sample_without_replacement_is_exact(matmul_pair, conv_pair, selection, scaled):
    pol = Policy(selection, False, scaled, ratio=1.0)
    a, b = matmul_pair
    out, plan = approx_matmul(a, b, pol, make_rng(2))
    np.testing.assert_allclose(out, a @ b, rtol=0, atol=1e-12)
    assert plan.k == 3
    x, k = conv_pair
    out, _ = approx_conv2d(x, k, pol, "same", make_rng(2))
    np.testing.assert_allclose(out, conv2d_exact(x, k, "same"), rtol=0, atol=1e-12)


def test_matmul_moments_match_closed_forms(matmul_pair):
    a, b = matmul_pair
    cn, rn = column_row_norms(a, b)
    p = nps_distribution(cn, rn)
    mean, var = matmul_moments_by_enumeration(a, b, p, 2)
    np.testing.assert_allclose(mean, a @ b, rtol=1e-12, atol=1e-12)
    # Var[estimate_ij] = (sum_l a_il^2 b_lj^2 / p_l - (AB)_ij^2) / k
    second = np.einsum("il,lj,l->ij", a ** 2, b ** 2, 1.0 / p)
    np.testing.assert_allclose(var, (second - (a @ b) ** 2) / 2, rtol=1e-9, atol=1e-12)


def test_nps_minimises_expected_matmul_error(matmul_pair):
    a, b = matmul_pair
    cn, rn = column_row_norms(a, b)

    def expected_sq_error(p):
        _, var = matmul_moments_by_enumeration(a, b, p, 2)
        return var.sum()

    best = expected_sq_error(nps_distribution(cn, rn))
    rng = make_rng(9)
    for _ in range(20):
        assert best <= expected_sq_error(rng.dirichlet(np.ones(3))) + 1e-12


def test_channel_energy_identity(conv_pair):
    # ||I||^2 ||K||^2 - E + R is the energy of each channel's own output
    x, k = conv_pair
    corr = correction_terms(x, k)
    nx = np.sum(x ** 2, axis=(0, 1, 2))
    nk = np.sum(k ** 2, axis=(0, 1, 3))
    energy = np.array([np.sum(o ** 2) for o in channel_outputs(x, k)])
    np.testing.assert_allclose(nx * nk - corr.e_ik + corr.r_ik, energy, rtol=1e-12)
    assert np.all(corr.e_ik >= 0)


def test_correction_terms_against_loops(conv_pair):
    x, k = conv_pair
    d, r = brute_force_terms(x, k)
    corr = correction_terms(x, k)
    nx = np.sum(x ** 2, axis=(0, 1, 2))
    nk = np.sum(k ** 2, axis=(0, 1, 3))
    np.testing.assert_allclose(corr.e_ik, nx * nk - d, rtol=1e-12)
    np.testing.assert_allclose(corr.r_ik, r, rtol=1e-12)


def test_correction_terms_vanish_for_pointwise_kernels():
    rng = make_rng(3)
    x = rng.standard_normal((2, 3, 3, 4))
    k = rng.standard_normal((1, 1, 4, 2))
    corr = correction_terms(x, k)
    np.testing.assert_allclose(corr.e_ik, 0.0, atol=1e-12)
    np.testing.assert_allclose(corr.r_ik, 0.0, atol=1e-12)


@pytest.mark.parametrize("nsamples", [1, 2])
@pytest.mark.parametrize("pad", ["valid", "same"])
def test_conv_closed_forms_match_enumeration(conv_pair, nsamples, pad):
    x, k = conv_pair
    p = conv_nps_distribution(x, k)
    mean, var, sq_err = conv_moments_by_enumeration(x, k, p, nsamples, pad)
    exact = conv2d_exact(x, k, pad)
    np.testing.assert_allclose(mean, exact, rtol=1e-12, atol=1e-12)
    closed = np.array([conv_variance_element(x, k, p, nsamples, c, pad)
                       for c in np.ndindex(*var.shape)]).reshape(var.shape)
    np.testing.assert_allclose(closed, var, rtol=1e-9, atol=1e-12)
    expected = conv_expected_error(x, k, p, nsamples, pad)
    np.testing.assert_allclose(expected, sq_err, rtol=1e-9)
    # treating each channel's output as one term gives the same expectation
    energy = np.array([np.sum(o ** 2) for o in channel_outputs(x, k, pad)])
    np.testing.assert_allclose(expected, (np.sum(energy / p) - np.sum(exact ** 2)) / nsamples,
                               rtol=1e-9)


def test_optimal_channel_distribution(conv_pair):
    x, k = conv_pair
    p_opt = conv_optimal_distribution(x, k)
    energy = np.array([np.sum(o ** 2) for o in channel_outputs(x, k)])
    np.testing.assert_allclose(p_opt, np.sqrt(energy) / np.sum(np.sqrt(energy)), rtol=1e-12)
    best = conv_expected_error(x, k, p_opt, 1)
    assert best < conv_expected_error(x, k, uniform_distribution(3), 1)
    assert best < conv_expected_error(x, k, conv_nps_distribution(x, k), 1)


def test_conv_expected_error_domain(conv_pair):
    x, k = conv_pair
    with pytest.raises(DomainError):
        conv_expected_error(x, k, np.array([1.0, 0.0, 0.0]), 1)
    with pytest.raises(DomainError):
        conv_expected_error(x, k, uniform_distribution(3), 0)


def test_sampled_conv_uses_split_scaling(conv_pair):
    x, k = conv_pair
    p = conv_nps_distribution(x, k)
    out, plan = approx_conv2d(x, k, Policy("nps", True, True, k=2), "valid", make_rng(4))
    manual = sum(channel_outputs(x, k)[i] / (2 * p[i]) for i in plan.indices)
    np.testing.assert_allclose(out, manual, rtol=1e-12)
    kept = topk_plan(p, 2)
    np.testing.assert_allclose(apply_conv_plan(x, k, kept),
                               sum(channel_outputs(x, k)[i] for i in kept.indices), rtol=1e-12)


def test_scaled_nps_error_within_bound():
    rng = make_rng(5)
    a = 1.0 + rng.standard_normal((30, 40))
    b = 1.0 + rng.standard_normal((40, 20))
    pol = Policy("nps", True, True, k=8)
    errs = []
    for _ in range(300):
        out, _ = approx_matmul(a, b, pol, rng)
        errs.append(normalized_error(a @ b, out, a, b).normalized_frobenius)
    assert np.mean(errs) <= matmul_error_bound(8)


def test_normalized_error_hand_values():
    a = np.eye(2)
    b = np.array([[3.0, 0.0], [0.0, 4.0]])
    approx = np.array([[3.0, 0.0], [0.0, 0.0]])
    rep = normalized_error(a @ b, approx, a, b)
    np.testing.assert_allclose(rep.normalized_frobenius, 4.0 / (np.sqrt(2.0) * 5.0))
    np.testing.assert_allclose(rep.per_element_max, 4.0)
    np.testing.assert_allclose(rep.spectral, 4.0 / (np.sqrt(2.0) * 5.0), rtol=1e-6)
    with pytest.raises(DomainError):
        normalized_error(a, a, np.zeros((2, 2)), b)


def test_spectral_norm_matches_svd():
    m = make_rng(6).standard_normal((7, 5))
    np.testing.assert_allclose(spectral_norm(m), np.linalg.norm(m, 2), rtol=1e-5)
    assert spectral_norm(np.zeros((3, 3))) == 0.0


def test_error_bound():
    np.testing.assert_allclose(matmul_error_bound(4), 0.5)
    with pytest.raises(DomainError):
        matmul_error_bound(0)
