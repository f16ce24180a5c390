"""Pointwise nonlinearities, small dense kernels and seeded random streams.

Everything defaults to float64; floating inputs of other precisions (the
gradient checker uses ``np.longdouble``) keep their dtype. Derivatives take
the *pre*-activation so that saturated units do not lose precision through
``1 - y**2`` style inversions.
"""

import numpy as np


class ConfigurationError(ValueError):
    """Raised for shape/spec mismatches that indicate a programming error."""


def as_float(x):
    if isinstance(x, np.ndarray) and x.dtype.kind == "f":
        return x
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


def logistic(x):
    x = as_float(x)
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic_prime_from_pre(x):
    s = logistic(x)
    return s * (1.0 - s)


def tanh_act(x):
    return np.tanh(as_float(x))


def tanh_prime_from_pre(x):
    t = np.tanh(as_float(x))
    return 1.0 - t * t


def identity_act(x):
    return as_float(x)


def identity_prime_from_pre(x):
    return np.ones_like(as_float(x))


ACTIVATIONS = {
    "tanh": (tanh_act, tanh_prime_from_pre),
    "identity": (identity_act, identity_prime_from_pre),
}


def _check_matrix(M):
    if M.ndim != 2:
        raise ConfigurationError(f"expected a matrix, got shape {M.shape}")


def matvec(M, v):
    M = np.asarray(M, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_matrix(M)
    if v.shape != (M.shape[1],):
        raise ConfigurationError(f"matvec: {M.shape} @ {v.shape}")
    return M @ v


def matvec_transposed(M, v):
    M = np.asarray(M, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_matrix(M)
    if v.shape != (M.shape[0],):
        raise ConfigurationError(f"matvec_transposed: {M.shape}.T @ {v.shape}")
    return v @ M


def outer_accumulate(acc, u, v):
    """Add ``outer(u, v)`` into ``acc`` in place and return it."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if acc.shape != (u.shape[0], v.shape[0]):
        raise ConfigurationError(
            f"outer_accumulate: acc {acc.shape} vs {u.shape} x {v.shape}")
    acc += np.outer(u, v)
    return acc


def make_rng(seed):
    """A PCG64 generator; equal seeds give equal streams."""
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def derive_seed(base_seed, *keys):
    """Deterministically derive an independent 63-bit seed from ``base_seed`` and integer keys."""
    ss = np.random.SeedSequence([int(base_seed), *[int(k) for k in keys]])
    state = ss.generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
