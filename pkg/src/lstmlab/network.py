"""Task networks built from one hidden LSTM layer (optionally bidirectional).

Framewise classification uses a bidirectional layer and a softmax head with
cross-entropy; the prediction tasks use a unidirectional layer and a sigmoid
head with binary cross-entropy summed over output units.
"""

from dataclasses import dataclass, field

import numpy as np

from . import lstm
from .numerics import ConfigurationError, as_float, logistic

TASKS = ("framewise_classification", "nextstep_prediction", "multilabel_prediction")
SOFTMAX_TASKS = ("framewise_classification",)


def softmax(logits):
    logits = as_float(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, target_class):
    """Cross-entropy of one frame: ``(loss, dloss/dlogits)``."""
    logits = as_float(logits)
    K = logits.shape[-1]
    if not 0 <= target_class < K:
        raise ConfigurationError(f"target class {target_class} outside [0, {K})")
    m = logits.max()
    log_z = m + np.log(np.exp(logits - m).sum())
    loss = log_z - logits[target_class]
    delta = np.exp(logits - log_z)
    delta[target_class] -= 1.0
    return loss, delta


def _log_sigmoid(x):
    # log(sigmoid(x)) without overflow
    return -np.logaddexp(0.0, -x)


def sigmoid_bce(pre, target):
    """Summed binary cross-entropy of one frame: ``(nll, dnll/dpre)``."""
    pre = as_float(pre)
    target = np.asarray(target, dtype=pre.dtype)
    nll = -np.sum(target * _log_sigmoid(pre) + (1.0 - target) * _log_sigmoid(-pre))
    return nll, logistic(pre) - target


@dataclass(frozen=True)
class NetworkConfig:
    task: str
    hidden_size: int
    n_inputs: int
    n_outputs: int
    variant: lstm.VariantSpec = field(default_factory=lstm.VariantSpec)
    bidirectional: bool = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}")
        expected = self.task in SOFTMAX_TASKS
        if self.bidirectional is None:
            object.__setattr__(self, "bidirectional", expected)
        elif self.bidirectional != expected:
            kind = "bidirectional" if expected else "unidirectional"
            raise ConfigurationError(f"task {self.task} requires a {kind} hidden layer")
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", lstm.get_preset(self.variant))
        if self.n_outputs < 1 or self.hidden_size < 1 or self.n_inputs < 1:
            raise ConfigurationError("sizes must be >= 1")

    @property
    def softmax_head(self):
        return self.task in SOFTMAX_TASKS

    @property
    def output_fan_in(self):
        return self.hidden_size * (2 if self.bidirectional else 1)


@dataclass
class NetworkWeights:
    forward: lstm.LstmWeights
    backward: lstm.LstmWeights
    W_out: np.ndarray
    b_out: np.ndarray

    def params(self):
        """Flat ``name -> array`` view; arrays are shared, not copied."""
        out = {f"fw.{k}": v for k, v in self.forward.blocks.items()}
        if self.backward is not None:
            out.update({f"bw.{k}": v for k, v in self.backward.blocks.items()})
        out["out.W"] = self.W_out
        out["out.b"] = self.b_out
        return out

    def copy(self, dtype=None):
        return NetworkWeights(
            self.forward.copy(dtype),
            None if self.backward is None else self.backward.copy(dtype),
            self.W_out.astype(dtype or self.W_out.dtype, copy=True),
            self.b_out.astype(dtype or self.b_out.dtype, copy=True),
        )

    @property
    def num_params(self):
        return sum(v.size for v in self.params().values())


def init_network(config, rng, std=0.1):
    spec, N, M = config.variant, config.hidden_size, config.n_inputs
    fw = lstm.init_weights(spec, N, M, rng, std)
    bw = lstm.init_weights(spec, N, M, rng, std) if config.bidirectional else None
    W_out = rng.normal(0.0, std, size=(config.n_outputs, config.output_fan_in))
    b_out = rng.normal(0.0, std, size=config.n_outputs)
    return NetworkWeights(fw, bw, W_out, b_out)


def network_num_params(config):
    per_layer = lstm.num_params(config.variant, config.hidden_size, config.n_inputs)
    layers = 2 if config.bidirectional else 1
    return layers * per_layer + config.n_outputs * (config.output_fan_in + 1)


@dataclass
class SequenceResult:
    loss: float
    metric: float
    n_frames: int
    grads: dict = None
    diverged: bool = False
    outputs: np.ndarray = None


def _head(config, logits, targets):
    T = logits.shape[0]
    if config.softmax_head:
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (T,):
            raise ConfigurationError(f"class targets of shape {targets.shape}, expected ({T},)")
        if targets.min() < 0 or targets.max() >= config.n_outputs:
            raise ConfigurationError("target class out of range")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        log_p = shifted - log_z[:, None]
        loss = -log_p[np.arange(T), targets].sum()
        delta = np.exp(log_p)
        delta[np.arange(T), targets] -= 1.0
        metric = float(np.sum(np.argmax(logits, axis=1) != targets))
        probs = np.exp(log_p)
    else:
        targets = np.asarray(targets, dtype=logits.dtype)
        if targets.shape != logits.shape:
            raise ConfigurationError(f"targets of shape {targets.shape}, expected {logits.shape}")
        loss = -np.sum(targets * _log_sigmoid(logits) + (1.0 - targets) * _log_sigmoid(-logits))
        probs = logistic(logits)
        delta = probs - targets
        metric = float(loss)
    # loss stays a numpy scalar so extended-precision evaluation survives
    return loss, metric, delta, probs


def network_forward_backward(weights, config, inputs, targets, compute_grads=True):
    """Loss, metric and (optionally) gradients for one sequence.

    ``metric`` is the number of misclassified frames for classification and
    the summed NLL for the prediction tasks; see :func:`evaluate` for the
    dataset-level aggregation. Gradient keys match :meth:`NetworkWeights.params`.
    """
    x = as_float(inputs)
    if x.ndim != 2 or x.shape[1] != config.n_inputs:
        raise ConfigurationError(f"input of shape {x.shape}, expected (T, {config.n_inputs})")
    T = x.shape[0]
    spec = config.variant
    y_fw, cache_fw = lstm.forward_sequence(weights.forward, spec, x)
    caches = [cache_fw]
    if config.bidirectional:
        y_bw_rev, cache_bw = lstm.forward_sequence(weights.backward, spec, x[::-1])
        caches.append(cache_bw)
        hidden = np.hstack([y_fw, y_bw_rev[::-1]])
    else:
        hidden = y_fw
    if any(c.diverged for c in caches):
        return SequenceResult(np.inf, np.inf, T, diverged=True)

    logits = hidden @ weights.W_out.T + weights.b_out
    loss, metric, d_logits, probs = _head(config, logits, targets)
    if not np.isfinite(loss):
        return SequenceResult(np.inf, np.inf, T, diverged=True)
    if not compute_grads:
        return SequenceResult(loss, metric, T, outputs=probs)

    grads = {}
    d_hidden = d_logits @ weights.W_out
    N = config.hidden_size
    g_fw, _ = lstm.backward_sequence(weights.forward, spec, cache_fw, d_hidden[:, :N])
    grads.update({f"fw.{k}": v for k, v in g_fw.blocks.items()})
    if config.bidirectional:
        g_bw, _ = lstm.backward_sequence(weights.backward, spec, cache_bw, d_hidden[::-1, N:])
        grads.update({f"bw.{k}": v for k, v in g_bw.blocks.items()})
    grads["out.W"] = d_logits.T @ hidden
    grads["out.b"] = d_logits.sum(axis=0)
    return SequenceResult(loss, metric, T, grads=grads, outputs=probs)


def evaluate(weights, config, sequences):
    """Dataset-level ``(mean loss per sequence, metric, diverged)``.

    The metric is the frame error rate for classification and the mean
    per-sequence NLL otherwise.
    """
    total_loss = 0.0
    total_metric = 0.0
    frames = 0
    for x, t in sequences:
        res = network_forward_backward(weights, config, x, t, compute_grads=False)
        if res.diverged:
            return np.inf, worst_metric(config), True
        total_loss += res.loss
        total_metric += res.metric
        frames += res.n_frames
    n = len(sequences)
    if config.softmax_head:
        return total_loss / n, total_metric / frames, False
    return total_loss / n, total_metric / n, False


def worst_metric(config):
    """Finite stand-in score for diverged runs."""
    return 1.0 if config.softmax_head else 1e9
