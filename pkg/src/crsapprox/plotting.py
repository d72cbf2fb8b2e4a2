"""Figures written next to the CSV reports."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes identical across runs
_PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_synth(rows, path):
    """Mean normalised error against sampling ratio, one panel per ensemble."""
    experiments = sorted({r.experiment for r in rows})
    fig, axes = plt.subplots(1, len(experiments), figsize=(6 * len(experiments), 4.5),
                             squeeze=False)
    for ax, exp in zip(axes[0], experiments):
        series = {}
        for r in rows:
            if r.experiment != exp:
                continue
            if r.policy in ("topk", "bound"):
                label = r.policy
            else:
                rep = "w/ repl" if r.replacement == "true" else "w/o repl"
                sc = "scaled" if r.scaled == "true" else "unscaled"
                label = f"{r.policy} {rep} {sc}"
            series.setdefault(label, []).append((r.ratio, r.mean))
        for label, pts in sorted(series.items()):
            pts.sort()
            style = {"color": "black", "linestyle": "--"} if label == "bound" else {"marker": "."}
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label, **style)
        ax.set_yscale("log")
        ax.set_xlabel("sampling ratio")
        ax.set_ylabel("normalised Frobenius error")
        ax.set_title(exp)
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_curves(curves, path, title=""):
    """Validation and test accuracy against training step."""
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [c["step"] for c in curves]
    ax.plot(steps, [c["val_accuracy"] for c in curves], marker=".", label="validation")
    ax.plot(steps, [c["test_accuracy"] for c in curves], marker=".", label="test")
    ax.set_xlabel("step")
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_perturbations(check, path):
    """Expected error of the optimal distribution against random perturbations."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(check.perturbed_errors, bins=20, color="grey", label="perturbed")
    ax.axvline(check.optimal_error, color="black", label="optimal")
    ax.axvline(check.uniform_error, color="black", linestyle=":", label="uniform")
    ax.set_xlabel("expected squared error")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
