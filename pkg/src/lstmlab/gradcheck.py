"""Central finite-difference checks of the analytic BPTT gradients."""

from dataclasses import dataclass, field

import numpy as np

from . import lstm, network
from .numerics import make_rng


def relative_error(a, b):
    """Elementwise ``|a - b| / max(1e-10, |a| + |b|)``; symmetric and scale-free."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1e-10, np.abs(a) + np.abs(b))


def finite_diff(loss_fn, params, eps=1e-6):
    """Central-difference gradient of ``loss_fn()`` w.r.t. ``params``.

    ``params`` is either one array or a dict of arrays; entries are perturbed
    in place and restored, so ``loss_fn`` should read them by reference. A
    non-finite loss at a coordinate yields ``nan`` there.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(params, dict):
        return {k: _fd_array(loss_fn, v, eps) for k, v in params.items()}
    return _fd_array(loss_fn, params, eps)


def _fd_array(loss_fn, arr, eps):
    grad = np.zeros(arr.shape, dtype=arr.dtype)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = loss_fn()
        flat[j] = orig - eps
        down = loss_fn()
        flat[j] = orig
        if np.isfinite(up) and np.isfinite(down):
            gflat[j] = (up - down) / (2.0 * eps)
        else:
            gflat[j] = np.nan
    return grad


@dataclass
class GradCheckReport:
    variant: str
    task: str
    eps: float
    tolerance: float
    block_errors: dict = field(default_factory=dict)

    @property
    def global_max(self):
        return max(self.block_errors.values()) if self.block_errors else 0.0

    @property
    def passed(self):
        return bool(self.global_max < self.tolerance)

    def to_dict(self):
        return {
            "variant": self.variant,
            "task": self.task,
            "eps": self.eps,
            "tolerance": self.tolerance,
            "global_max": self.global_max,
            "passed": self.passed,
            "block_errors": dict(self.block_errors),
        }


def random_problem(config, rng, T, n_sequences=2):
    seqs = []
    for _ in range(n_sequences):
        x = rng.normal(0.0, 1.0, size=(T, config.n_inputs))
        if config.softmax_head:
            t = rng.integers(0, config.n_outputs, size=T)
        else:
            t = (rng.random((T, config.n_outputs)) < 0.5).astype(np.float64)
        seqs.append((x, t))
    return seqs


def check_network(weights, config, sequences, eps=1e-6, fd_dtype=np.longdouble):
    """Per-parameter-block max relative error between BPTT and finite differences.

    The analytic route runs in float64. The finite-difference route evaluates
    the loss in ``fd_dtype``; with the default extended precision the rounding
    floor of the central difference (~ulp(loss)/eps) drops far enough that
    near-zero gradient entries can still be compared at 1e-5 relative error.
    """
    params = weights.params()
    analytic = {k: np.zeros_like(v) for k, v in params.items()}
    for x, t in sequences:
        res = network.network_forward_backward(weights, config, x, t)
        for k, g in res.grads.items():
            analytic[k] += g

    probe = weights.copy(fd_dtype)
    probe_seqs = [(np.asarray(x, dtype=fd_dtype), t) for x, t in sequences]

    def loss_fn():
        return sum(network.network_forward_backward(probe, config, x, t, compute_grads=False).loss
                   for x, t in probe_seqs)

    numeric = finite_diff(loss_fn, probe.params(), eps)
    errors = {}
    for k in params:
        err = relative_error(analytic[k], numeric[k])
        errors[k] = float(np.nan_to_num(err, nan=np.inf).max()) if err.size else 0.0
    return errors


def check_variant(preset, n_blocks=4, n_inputs=3, seq_len=5, n_outputs=2,
                  task="nextstep_prediction", seed=0, tolerance=1e-5, eps=1e-6,
                  weight_std=0.5, fd_dtype=np.longdouble):
    """Build a random tiny network for ``preset`` and compare both gradient routes.

    Weights are drawn wider than the training initialisation so gradients sit
    well above the finite-difference rounding floor.
    """
    spec = lstm.get_preset(preset) if isinstance(preset, str) else preset
    name = preset if isinstance(preset, str) else "custom"
    config = network.NetworkConfig(task, n_blocks, n_inputs, n_outputs, spec)
    rng = make_rng(seed)
    weights = network.init_network(config, rng, std=weight_std)
    seqs = random_problem(config, rng, seq_len)
    report = GradCheckReport(name, task, eps, tolerance)
    report.block_errors = check_network(weights, config, seqs, eps, fd_dtype)
    return report
