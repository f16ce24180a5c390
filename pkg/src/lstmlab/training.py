"""Online (per-sequence) SGD with Nesterov momentum and early stopping."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import network
from .numerics import ConfigurationError, derive_seed, make_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    input_noise_std: float = 0.0
    clip_gradients: bool = False
    max_epochs: int = 150
    patience: int = 15
    seed: int = 0
    nesterov: bool = True
    init_std: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.input_noise_std < 0:
            raise ConfigurationError("input_noise_std must be >= 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("max_epochs and patience must be >= 1")

    @property
    def effective_learning_rate(self):
        """The step size actually applied: learning rate scaled by ``1 - momentum``."""
        return self.learning_rate * (1.0 - self.momentum)


def nesterov_update(params, velocity, grads, lr, momentum):
    """In-place Nesterov step on dicts of arrays (or single arrays).

    Parameters are stored at the look-ahead point, giving
    ``v <- m v - lr g`` followed by ``p <- p + m v - lr g``.
    """
    if isinstance(params, dict):
        for k in params:
            nesterov_update(params[k], velocity[k], grads[k], lr, momentum)
        return params, velocity
    velocity *= momentum
    velocity -= lr * grads
    params += momentum * velocity - lr * grads
    return params, velocity


def momentum_update(params, velocity, grads, lr, momentum):
    """Classical momentum: ``v <- m v - lr g``; ``p <- p + v``."""
    if isinstance(params, dict):
        for k in params:
            momentum_update(params[k], velocity[k], grads[k], lr, momentum)
        return params, velocity
    velocity *= momentum
    velocity -= lr * grads
    params += velocity
    return params, velocity


def add_input_noise(x, sigma, rng):
    x = np.asarray(x, dtype=np.float64)
    if sigma < 0:
        raise ConfigurationError("noise std must be >= 0")
    if sigma == 0:
        return x
    return x + rng.normal(0.0, sigma, size=x.shape)


def clip_gradients(grads, limit=1.0):
    """Clamp every gradient entry to ``[-limit, limit]`` in place."""
    if isinstance(grads, dict):
        for g in grads.values():
            np.clip(g, -limit, limit, out=g)
        return grads
    return np.clip(grads, -limit, limit, out=grads)


class EarlyStopping:
    """Tracks the best validation score; only a strict decrease counts as improvement."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, value):
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
            return True
        return False

    @property
    def should_stop(self):
        return self.epoch - self.best_epoch >= self.patience


@dataclass
class TrainResult:
    train_loss: list = field(default_factory=list)
    train_metric: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)
    initial_val_loss: float = np.nan
    initial_val_metric: float = np.nan
    best_val_epoch: int = 0
    best_val_metric: float = np.inf
    test_loss: float = np.nan
    test_metric: float = np.nan
    wall_time_seconds: float = 0.0
    diverged: bool = False
    epochs_run: int = 0
    applied_learning_rate: float = np.nan
    best_weights: network.NetworkWeights = field(default=None, repr=False)

    def curves(self):
        return {
            "train_loss": list(map(float, self.train_loss)),
            "train_metric": list(map(float, self.train_metric)),
            "val_loss": list(map(float, self.val_loss)),
            "val_metric": list(map(float, self.val_metric)),
        }


def _check_splits(dataset):
    for name in ("train", "val", "test"):
        if not getattr(dataset, name):
            raise ConfigurationError(f"dataset split {name!r} is empty")


def train(dataset, net_config, config, weights=None):
    """Train one network and report test performance at the best validation epoch.

    One update per training sequence, sequence order reshuffled each epoch.
    Divergence ends the run and scores it with the worst-case metric.
    """
    _check_splits(dataset)
    start = time.perf_counter()
    if weights is None:
        weights = network.init_network(net_config, make_rng(derive_seed(config.seed, 0)),
                                       std=config.init_std)
    order_rng = make_rng(derive_seed(config.seed, 1))
    noise_rng = make_rng(derive_seed(config.seed, 2))
    lr = config.effective_learning_rate
    step = nesterov_update if config.nesterov else momentum_update
    params = weights.params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    result = TrainResult(applied_learning_rate=lr)
    log.debug("training %s: lr=%g (applied %g) momentum=%g", net_config.variant, config.learning_rate,
              lr, config.momentum)

    result.initial_val_loss, result.initial_val_metric, _ = network.evaluate(
        weights, net_config, dataset.val)
    stopper = EarlyStopping(config.patience)
    best = weights.copy()
    worst = network.worst_metric(net_config)

    for epoch in range(1, config.max_epochs + 1):
        loss_sum = metric_sum = 0.0
        frames = 0
        diverged = False
        for idx in order_rng.permutation(len(dataset.train)):
            x, t = dataset.train[idx]
            x = add_input_noise(x, config.input_noise_std, noise_rng)
            res = network.network_forward_backward(weights, net_config, x, t)
            if res.diverged or not np.isfinite(res.loss):
                diverged = True
                break
            if config.clip_gradients:
                clip_gradients(res.grads)
            step(params, velocity, res.grads, lr, config.momentum)
            loss_sum += res.loss
            metric_sum += res.metric
            frames += res.n_frames
        if not diverged and not all(np.all(np.isfinite(v)) for v in params.values()):
            diverged = True
        if not diverged:
            val_loss, val_metric, diverged = network.evaluate(weights, net_config, dataset.val)
        result.epochs_run = epoch
        if diverged:
            log.info("diverged in epoch %d", epoch)
            result.diverged = True
            break
        n = len(dataset.train)
        result.train_loss.append(loss_sum / n)
        result.train_metric.append(metric_sum / frames if net_config.softmax_head else metric_sum / n)
        result.val_loss.append(val_loss)
        result.val_metric.append(val_metric)
        if stopper.update(val_metric):
            best = weights.copy()
        log.debug("epoch %d train %.5g val %.5g", epoch, result.train_loss[-1], val_metric)
        if stopper.should_stop:
            break

    result.best_val_epoch = stopper.best_epoch
    result.best_weights = best
    if result.diverged:
        result.best_val_metric = worst
        result.test_metric = worst
        result.test_loss = np.inf
    else:
        result.best_val_metric = stopper.best
        result.test_loss, result.test_metric, _ = network.evaluate(best, net_config, dataset.test)
    result.wall_time_seconds = time.perf_counter() - start
    return result
