"""Experiment drivers behind the command line: synthetic matrix products,
enumeration checks of the convolution estimator, and MNIST training runs."""

import itertools
from dataclasses import dataclass

import numpy as np

from .approx import (
    apply_matmul_plan,
    conv_expected_error,
    conv_moments_by_enumeration,
    conv_variance_element,
    matmul_error_bound,
    matmul_moments_by_enumeration,
)
from .data import ReportRow, gen_gaussian_matrix
from .nn import TrainConfig, cnn_specs, compute_reduction, mlp_specs
from .sampling import (
    Policy,
    conv_nps_distribution,
    conv_optimal_distribution,
    draw_coupled_indices,
    make_plan,
    nps_distribution,
    plan_from_indices,
    uniform_distribution,
)
from .tensor import column_row_norms, conv2d_exact, frobenius_norm, make_rng, matmul_exact, trial_rng

ENSEMBLES = {
    # name: ((mean, std) of A, (mean, std) of B)
    "n11": ((1.0, 1.0), (1.0, 1.0)),
    "n01": ((0.0, 1.0), (1.0, 1.0)),
}
DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(1, 11))


def variant_policies(ratio, selections=("uniform", "nps", "topk"), replacements=(True, False),
                     scalings=(True, False)):
    """Every CRS variant at one sampling ratio: the random selections crossed
    with replacement and scaling, plus deterministic top-k."""
    out = []
    for sel in selections:
        if sel == "topk":
            out.append(Policy("topk", ratio=ratio))
            continue
        for rep, sc in itertools.product(replacements, scalings):
            out.append(Policy(sel, rep, sc, ratio=ratio))
    return out


def _flag(policy, attr):
    return "na" if policy.selection == "topk" else str(getattr(policy, attr)).lower()


def _trial_plans(scores, policies, rng):
    """Plans for every variant on one operand pair.

    Random variants sharing a selection rule draw from one coupled stream,
    so replacement and scaling are compared on common random numbers.
    """
    streams = {}
    out = []
    for pol in policies:
        if pol.selection == "topk":
            out.append((pol, make_plan(scores, pol, rng)))
            continue
        if pol.selection == "nps":
            probs = nps_distribution(scores, np.ones_like(scores))
        else:
            probs = uniform_distribution(len(scores))
        if pol.selection not in streams:
            streams[pol.selection] = draw_coupled_indices(probs, pol.resolve_k(len(scores)), rng)
        with_idx, without_idx = streams[pol.selection]
        idx = with_idx if pol.replacement else without_idx
        out.append((pol, plan_from_indices(probs, idx, pol.selection, pol.replacement,
                                           pol.scaled)))
    return out


@dataclass
class SweepResult:
    rows: list
    errors: dict      # (ensemble, policy description, ratio) -> array of trial errors


def synth_matmul(ensembles=("n11",), ratios=DEFAULT_RATIOS, trials=1000, seed=17, size=100,
                 selections=("uniform", "nps", "topk"), replacements=(True, False),
                 scalings=(True, False)):
    """Normalised Frobenius error of every CRS variant on random square products.

    Each trial draws a fresh pair of matrices from its own stream
    (seed xor trial) and evaluates all variants and ratios on that pair.
    """
    errors = {}
    policies = {r: variant_policies(r, selections, replacements, scalings) for r in ratios}
    for ens in ensembles:
        (ma, sa), (mb, sb) = ENSEMBLES[ens]
        for r in ratios:
            for pol in policies[r]:
                errors[(ens, pol.describe(), r)] = np.empty(trials)
        for t in range(trials):
            rng = trial_rng(seed, t)
            a = gen_gaussian_matrix(size, size, ma, sa, rng)
            b = gen_gaussian_matrix(size, size, mb, sb, rng)
            exact = matmul_exact(a, b)
            denom = frobenius_norm(a) * frobenius_norm(b)
            cn, rn = column_row_norms(a, b)
            scores = cn * rn
            for r in ratios:
                for pol, plan in _trial_plans(scores, policies[r], rng):
                    approx = apply_matmul_plan(a, b, plan)
                    errors[(ens, pol.describe(), r)][t] = frobenius_norm(exact - approx) / denom

    rows = []
    for ens in ensembles:
        for r in ratios:
            k = Policy("topk", ratio=r).resolve_k(size)
            for pol in policies[r]:
                e = errors[(ens, pol.describe(), r)]
                rows.append(ReportRow(
                    f"synth-matmul/{ens}", pol.selection, _flag(pol, "replacement"),
                    _flag(pol, "scaled"), r, k, trials, "normalized_frobenius",
                    float(e.mean()), float(e.std(ddof=1)) if trials > 1 else 0.0,
                    1.0 - k / size, seed))
            rows.append(ReportRow(f"synth-matmul/{ens}", "bound", "true", "true", r, k, trials,
                                  "frobenius_bound", float(matmul_error_bound(k)), 0.0,
                                  1.0 - k / size, seed))
    return SweepResult(rows, errors)


# ---------------------------------------------------------------- enumeration checks

@dataclass
class ConvCheck:
    unbiasedness: float
    variance: float
    variance_sum: float
    expected_error: float
    optimal_error: float
    uniform_error: float
    perturbed_errors: np.ndarray
    matmul_unbiasedness: float

    @property
    def optimality_margin(self):
        return float(min(self.perturbed_errors.min(), self.uniform_error) - self.optimal_error)


def criterion_instance(seed=0):
    """The small convolution case used by the enumeration checks:
    B=1, 4x4 input with 3 channels, 2x2 kernel, 2 output channels."""
    rng = make_rng(seed)
    x = rng.standard_normal((1, 4, 4, 3))
    k = rng.standard_normal((2, 2, 3, 2))
    return x, k


def matmul_instance(seed=0):
    rng = make_rng(seed)
    return rng.standard_normal((4, 3)), rng.standard_normal((3, 2))


def _max_rel(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def verify_conv(seed=0, perturbations=100, nsamples=1, pad="valid"):
    x, k = criterion_instance(seed)
    exact = conv2d_exact(x, k, pad)
    dist = conv_nps_distribution(x, k)
    mean, var, sq_err = conv_moments_by_enumeration(x, k, dist, nsamples, pad)

    closed_var = np.empty_like(var)
    for coords in np.ndindex(*var.shape):
        closed_var[coords] = conv_variance_element(x, k, dist, nsamples, coords, pad)
    closed_err = conv_expected_error(x, k, dist, nsamples, pad)

    p_opt = conv_optimal_distribution(x, k, pad)
    rng = make_rng(seed + 1)
    ic = x.shape[3]
    perturbed = np.empty(perturbations)
    for j in range(perturbations):
        q = 0.8 * p_opt + 0.2 * rng.dirichlet(np.ones(ic))
        perturbed[j] = conv_expected_error(x, k, q / q.sum(), nsamples, pad)

    a, b = matmul_instance(seed)
    cn, rn = column_row_norms(a, b)
    m_mean, _ = matmul_moments_by_enumeration(a, b, nps_distribution(cn, rn), 2)

    return ConvCheck(
        unbiasedness=_max_rel(mean, exact),
        variance=_max_rel(closed_var, var),
        variance_sum=abs(closed_var.sum() - closed_err) / closed_err,
        expected_error=abs(sq_err - closed_err) / closed_err,
        optimal_error=conv_expected_error(x, k, p_opt, nsamples, pad),
        uniform_error=conv_expected_error(x, k, np.full(ic, 1.0 / ic), nsamples, pad),
        perturbed_errors=perturbed,
        matmul_unbiasedness=_max_rel(m_mean, matmul_exact(a, b)),
    )


def verify_rows(check, seed, perturbations):
    def row(metric, value, trials=1, std=0.0, policy="nps", k=1):
        return ReportRow("verify-conv", policy, "true", "true", 1.0 / 3.0 if k == 1 else 1.0,
                         k, trials, metric, float(value), std, 0.0, seed)

    return [
        row("unbiasedness_residual", check.unbiasedness),
        row("variance_residual", check.variance),
        row("variance_sum_residual", check.variance_sum),
        row("expected_error_residual", check.expected_error),
        row("expected_error_optimal", check.optimal_error, policy="optimal"),
        row("expected_error_uniform", check.uniform_error, policy="uniform"),
        row("expected_error_perturbed", check.perturbed_errors.mean(), trials=perturbations,
            std=float(check.perturbed_errors.std(ddof=1)), policy="perturbed"),
        row("optimality_margin", check.optimality_margin, trials=perturbations, policy="optimal"),
        ReportRow("verify-matmul", "nps", "true", "true", 2.0 / 3.0, 2, 1,
                  "unbiasedness_residual", check.matmul_unbiasedness, 0.0, 0.0, seed),
    ]


# ---------------------------------------------------------------- training

def training_config(model, forward_ratio=None, backward_ratio=None, backprop="crs",
                    selection="topk", replacement=False, scaled=False, min_k=10,
                    epochs=None, iterations=None, batch_size=50, seed=0, eval_every=None):
    if model == "mlp":
        specs = mlp_specs(forward_ratio, backward_ratio, backprop, selection, replacement,
                          scaled, min_k)
        if epochs is None and iterations is None:
            epochs = 20
    elif model == "cnn":
        if backprop != "crs":
            raise ValueError("the CNN supports only CRS backward sampling")
        specs = cnn_specs(forward_ratio, backward_ratio, selection, replacement, scaled, min_k)
        if epochs is None and iterations is None:
            iterations = 2000
        eval_every = eval_every or 500
    else:
        raise ValueError(f"unknown model {model!r}")
    return TrainConfig(specs, batch_size=batch_size, epochs=epochs, iterations=iterations,
                       seed=seed, eval_every=eval_every, eval_batch=200 if model == "cnn" else 1000)


def training_rows(result, config, experiment, policy_desc, forward_ratio, seed):
    reduction = compute_reduction(result.ledger)
    steps = result.curves[-1]["step"]
    common = dict(experiment=experiment, policy=policy_desc, replacement="na", scaled="na",
                  ratio=1.0 if forward_ratio is None else forward_ratio, k=0, trials=1,
                  std=0.0, compute_reduction=reduction, seed=seed)
    return [
        ReportRow(metric_name="selected_test_accuracy", mean=result.selected_test_accuracy,
                  **common),
        ReportRow(metric_name="final_test_accuracy", mean=result.final_test_accuracy, **common),
        ReportRow(metric_name="best_val_accuracy",
                  mean=max(c["val_accuracy"] for c in result.curves), **common),
        ReportRow(metric_name="steps", mean=float(steps), **common),
    ]
