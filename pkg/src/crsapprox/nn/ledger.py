"""Multiply-accumulate bookkeeping for fully-connected and convolutional layers."""

from collections import defaultdict

from ..tensor import DomainError

PASSES = ("fwd", "bwd-data", "bwd-weight")


class ComputeLedger:
    """Exact versus performed MAC counts keyed by (layer, pass).

    Only matrix products and convolutions are counted. Element-wise work,
    bias additions and the cost of sampling itself are ignored.
    """

    def __init__(self):
        self.macs_exact = defaultdict(int)
        self.macs_actual = defaultdict(int)

    def record(self, layer, pass_name, exact, actual):
        if pass_name not in PASSES:
            raise DomainError(f"unknown pass {pass_name!r}")
        if actual > exact:
            raise DomainError(f"{layer}/{pass_name}: performed {actual} MACs exceeds exact {exact}")
        self.macs_exact[(layer, pass_name)] += int(exact)
        self.macs_actual[(layer, pass_name)] += int(actual)

    def merge(self, other):
        for key, v in other.macs_exact.items():
            self.macs_exact[key] += v
        for key, v in other.macs_actual.items():
            self.macs_actual[key] += v

    @property
    def total_exact(self):
        return sum(self.macs_exact.values())

    @property
    def total_actual(self):
        return sum(self.macs_actual.values())

    def rows(self):
        return [(layer, p, self.macs_exact[(layer, p)], self.macs_actual[(layer, p)])
                for (layer, p) in sorted(self.macs_exact)]

    def __bool__(self):
        return bool(self.macs_exact)


def compute_reduction(ledger):
    """Fraction of exact-training MACs saved: 1 - actual / exact."""
    exact = ledger.total_exact
    if exact == 0:
        raise DomainError("ledger is empty")
    return 1.0 - ledger.total_actual / exact
