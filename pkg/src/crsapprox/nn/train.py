"""Mini-batch training loop with per-layer sampling and exact evaluation."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..tensor import spawn_rngs
from .layers import StepContext
from .ledger import ComputeLedger
from .model import build_network
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class TrainResult:
    network: object
    ledger: ComputeLedger
    curves: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    @property
    def final_test_accuracy(self):
        return self.curves[-1]["test_accuracy"]

    @property
    def selected_test_accuracy(self):
        """Test accuracy at the evaluation point with the best validation accuracy."""
        if not self.curves:
            return float("nan")
        best = max(self.curves, key=lambda c: (c["val_accuracy"], -c["step"]))
        return best["test_accuracy"]


def total_steps(config, n_train):
    if config.iterations is not None:
        return config.iterations
    return config.epochs * math.ceil(n_train / config.batch_size)


def train(config, data, callback=None, network=None, steps=None):
    """Train ``config.layers`` on ``data`` (a :class:`~crsapprox.data.Splits`).

    Sampling randomness, dropout masks, batch order and initial weights come
    from separate streams derived from ``config.seed``, so changing a sampling
    policy never perturbs the other three. Evaluation points run every
    ``config.eval_every`` steps (default: once per epoch) and at the end.
    """
    init_rng, data_rng, sampling_rng, dropout_rng = spawn_rngs(config.seed, 4)
    if network is None:
        network = build_network(config.layers, init_rng)
    n_train = len(data.train.labels)
    steps = total_steps(config, n_train) if steps is None else steps
    per_epoch = math.ceil(n_train / config.batch_size)
    eval_every = config.eval_every or per_epoch

    state = AdamState()
    ledger = ComputeLedger()
    ctx = StepContext(train=True, sampling_rng=sampling_rng, dropout_rng=dropout_rng,
                      ledger=ledger)
    result = TrainResult(network, ledger)
    order = np.empty(0, dtype=np.int64)
    pos = 0
    window = []
    for step in range(1, steps + 1):
        if pos >= len(order):
            order = data_rng.permutation(n_train)
            pos = 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        loss = network.loss_and_grads(data.train.images[idx], data.train.labels[idx], ctx)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at step {step}")
        params = network.parameters()
        grads = network.gradients()
        adam_step(params, grads, state, config.lr, config.beta1, config.beta2, config.eps)
        result.losses.append(loss)
        window.append(loss)
        if step % eval_every == 0 or step == steps:
            point = {
                "step": step,
                "epoch": step / per_epoch,
                "train_loss": float(np.mean(window)),
                "val_accuracy": _accuracy(network, data.val, config.eval_batch),
                "test_accuracy": _accuracy(network, data.test, config.eval_batch),
            }
            window = []
            result.curves.append(point)
            log.info("step %d loss %.4f val %.4f test %.4f", step, point["train_loss"],
                     point["val_accuracy"], point["test_accuracy"])
            if callback is not None:
                callback(point)
    return result


def _accuracy(network, split, batch):
    if split is None or len(split.labels) == 0:
        return float("nan")
    return network.accuracy(split.images, split.labels, batch)
