"""A single LSTM layer with configurable architecture and exact BPTT.

The layer follows the vanilla LSTM with peepholes (input and forget gate
peepholes read ``c[t-1]``, the output gate peephole reads ``c[t]``) and can
be switched into any of the eight single-change variants:

========  ===============================================
V         vanilla
NIG       no input gate (``i = 1``)
NFG       no forget gate (``f = 1``)
NOG       no output gate (``o = 1``)
NIAF      no input activation (``g(x) = x``)
NOAF      no output activation (``h(x) = x``)
NP        no peephole connections
CIFG      coupled input and forget gate (``f = 1 - i``)
FGR       full gate recurrence (gate activations at ``t-1`` feed
          every gate pre-activation at ``t``)
========  ===============================================

Parameters live in a flat ``name -> ndarray`` dictionary. Blocks belonging to
removed features are simply absent.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import ACTIVATIONS, ConfigurationError, as_float, logistic, logistic_prime_from_pre

GATES = ("i", "f", "o")

#: |c| above this value marks the forward pass as diverged
DIVERGENCE_THRESHOLD = 1e100


@dataclass(frozen=True)
class VariantSpec:
    input_gate: bool = True
    forget_gate: bool = True
    output_gate: bool = True
    input_activation: str = "tanh"
    output_activation: str = "tanh"
    peepholes: bool = True
    couple_input_forget: bool = False
    full_gate_recurrence: bool = False

    def __post_init__(self):
        for act in (self.input_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
        if self.couple_input_forget:
            if not self.input_gate:
                raise ConfigurationError("coupled input/forget gate requires the input gate")
            if self.forget_gate:
                raise ConfigurationError(
                    "coupled input/forget gate derives f from i; set forget_gate=False")

    @property
    def gated(self):
        """Gates that own parameters, in canonical order."""
        flags = {"i": self.input_gate, "f": self.forget_gate, "o": self.output_gate}
        return tuple(g for g in GATES if flags[g])

    @property
    def units(self):
        """Block input followed by the parameterised gates."""
        return ("z",) + self.gated

    @property
    def peephole_gates(self):
        return self.gated if self.peepholes else ()

    @property
    def fgr_pairs(self):
        """(source, destination) gate pairs of the full-gate-recurrence matrices."""
        if not self.full_gate_recurrence:
            return ()
        return tuple((src, dst) for dst in self.gated for src in self.gated)


PRESETS = {
    "V": VariantSpec(),
    "NIG": VariantSpec(input_gate=False),
    "NFG": VariantSpec(forget_gate=False),
    "NOG": VariantSpec(output_gate=False),
    "NIAF": VariantSpec(input_activation="identity"),
    "NOAF": VariantSpec(output_activation="identity"),
    "NP": VariantSpec(peepholes=False),
    "CIFG": VariantSpec(forget_gate=False, couple_input_forget=True),
    "FGR": VariantSpec(full_gate_recurrence=True),
}


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown variant {name!r}; choose from {', '.join(PRESETS)}") from None


def block_shapes(spec, n_blocks, n_inputs):
    """Ordered mapping of parameter block name to shape."""
    N, M = n_blocks, n_inputs
    shapes = {}
    for u in spec.units:
        shapes[f"W_{u}"] = (N, M)
    for u in spec.units:
        shapes[f"R_{u}"] = (N, N)
    for g in spec.peephole_gates:
        shapes[f"p_{g}"] = (N,)
    for u in spec.units:
        shapes[f"b_{u}"] = (N,)
    for src, dst in spec.fgr_pairs:
        shapes[f"R_{src}{dst}"] = (N, N)
    return shapes


def num_params(spec, n_blocks, n_inputs):
    return int(sum(np.prod(s) for s in block_shapes(spec, n_blocks, n_inputs).values()))


@dataclass
class LstmWeights:
    spec: VariantSpec
    n_blocks: int
    n_inputs: int
    blocks: dict

    def __post_init__(self):
        expected = block_shapes(self.spec, self.n_blocks, self.n_inputs)
        if set(expected) != set(self.blocks):
            raise ConfigurationError(
                f"weight blocks {sorted(self.blocks)} do not match spec {sorted(expected)}")
        for name, shape in expected.items():
            if self.blocks[name].shape != shape:
                raise ConfigurationError(
                    f"block {name} has shape {self.blocks[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self.blocks[name]

    def copy(self, dtype=None):
        return replace(self, blocks={k: v.astype(dtype or v.dtype, copy=True)
                                     for k, v in self.blocks.items()})

    @property
    def num_params(self):
        return sum(v.size for v in self.blocks.values())

    @classmethod
    def zeros(cls, spec, n_blocks, n_inputs):
        shapes = block_shapes(spec, n_blocks, n_inputs)
        return cls(spec, n_blocks, n_inputs, {k: np.zeros(s) for k, s in shapes.items()})


def init_weights(spec, n_blocks, n_inputs, rng, std=0.1):
    """Draw every present block from N(0, std**2)."""
    if n_blocks < 1 or n_inputs < 1:
        raise ConfigurationError("n_blocks and n_inputs must be >= 1")
    shapes = block_shapes(spec, n_blocks, n_inputs)
    blocks = {k: rng.normal(0.0, std, size=s) for k, s in shapes.items()}
    return LstmWeights(spec, n_blocks, n_inputs, blocks)


@dataclass
class LstmGradients:
    """Gradient mirror of :class:`LstmWeights` (same block names and shapes)."""

    blocks: dict
    input_deltas: np.ndarray = None

    def __getitem__(self, name):
        return self.blocks[name]

    def reset(self):
        for v in self.blocks.values():
            v[...] = 0.0


@dataclass
class ForwardCache:
    """Per-timestep activations, each of shape ``(T, N)`` (``x`` is ``(T, M)``).

    Removed gates hold zeros in their pre-activation and ones in their
    activation; under CIFG ``f`` holds ``1 - i`` and ``f_bar`` is unused.
    """

    x: np.ndarray
    z_bar: np.ndarray
    z: np.ndarray
    i_bar: np.ndarray
    i: np.ndarray
    f_bar: np.ndarray
    f: np.ndarray
    c: np.ndarray
    o_bar: np.ndarray
    o: np.ndarray
    y: np.ndarray
    h_c: np.ndarray
    diverged: bool = False
    spec: VariantSpec = field(default=None, repr=False)

    def __len__(self):
        return self.x.shape[0]

    def c_prev(self):
        return np.vstack([np.zeros((1, self.c.shape[1])), self.c[:-1]])


def _stacked(weights, prefix, units):
    return np.concatenate([weights.blocks[f"{prefix}_{u}"] for u in units], axis=0)


def _fgr_matrix(weights):
    """Stacked gate-to-gate recurrent matrix, rows by destination, columns by source."""
    spec, N = weights.spec, weights.n_blocks
    gated = spec.gated
    dt = weights.blocks[f"R_{gated[0]}{gated[0]}"].dtype
    Q = np.zeros((len(gated) * N, len(gated) * N), dtype=dt)
    for a, dst in enumerate(gated):
        for b, src in enumerate(gated):
            Q[a * N:(a + 1) * N, b * N:(b + 1) * N] = weights.blocks[f"R_{src}{dst}"]
    return Q


def _check_consistent(weights, spec):
    if weights.spec != spec:
        raise ConfigurationError(f"weights built for {weights.spec}, used with {spec}")


def forward_sequence(weights, spec, inputs):
    """Run the layer over ``inputs`` of shape ``(T, M)``.

    Returns ``(outputs, cache)`` where ``outputs`` is ``(T, N)``. Overflow does
    not raise; it sets ``cache.diverged``.
    """
    _check_consistent(weights, spec)
    x = as_float(inputs)
    if x.ndim != 2 or x.shape[1] != weights.n_inputs:
        raise ConfigurationError(f"inputs of shape {x.shape}, layer expects (T, {weights.n_inputs})")
    T, N = x.shape[0], weights.n_blocks
    B = weights.blocks
    dt = np.result_type(x.dtype, *[v.dtype for v in B.values()])
    g_fn = ACTIVATIONS[spec.input_activation][0]
    h_fn = ACTIVATIONS[spec.output_activation][0]
    units = spec.units
    slot = {u: k for k, u in enumerate(units)}

    W = _stacked(weights, "W", units)
    R = _stacked(weights, "R", units)
    b = _stacked(weights, "b", units)
    Q = _fgr_matrix(weights) if spec.full_gate_recurrence else None
    pre_in = x @ W.T + b

    # i and f (when present) sit contiguously after z and both peep at c[t-1]
    if_gates = [g for g in ("i", "f") if g in slot]
    n_if = len(if_gates)
    sl_if = slice(N, N + n_if * N)
    peep_if = [g for g in if_gates if g in spec.peephole_gates]
    p_if = None
    if peep_if:
        p_if = np.concatenate([B[f"p_{g}"] if g in peep_if else np.zeros(N, dtype=dt)
                               for g in if_gates])
    has_i, has_f, has_o = "i" in slot, "f" in slot, "o" in slot
    coupled = spec.couple_input_forget
    k_o = slot["o"] * N if has_o else None
    p_o = B["p_o"] if "o" in spec.peephole_gates else None
    fgr_src = [k for k, g in enumerate(("i", "f", "o")) if g in slot]

    A_bar = np.zeros((T, len(units) * N), dtype=dt)
    z = np.zeros((T, N), dtype=dt)
    i = np.ones((T, N), dtype=dt)
    f = np.ones((T, N), dtype=dt)
    o = np.ones((T, N), dtype=dt)
    c = np.zeros((T, N), dtype=dt)
    y = np.zeros((T, N), dtype=dt)
    h_c = np.zeros((T, N), dtype=dt)
    c_prev = np.zeros(N, dtype=dt)
    y_prev = np.zeros(N, dtype=dt)
    gates_prev = np.zeros(len(spec.gated) * N, dtype=dt)
    one = dt.type(1.0)

    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            a = A_bar[t]
            np.add(pre_in[t], R @ y_prev, out=a)
            if Q is not None:
                a[N:] += Q @ gates_prev
            z_t = z[t] = g_fn(a[:N])
            if n_if:
                if p_if is not None:
                    a[sl_if] += p_if * (c_prev if n_if == 1 else np.tile(c_prev, n_if))
                # 1/(1+exp(-x)) is exact enough here and overflow just yields 0
                act = one / (one + np.exp(-a[sl_if]))
                i_t = i[t] = act[:N] if has_i else i[t]
                if has_f:
                    f[t] = act[n_if * N - N:]
                elif coupled:
                    f[t] = one - i_t
            else:
                i_t = i[t]
            c_t = c[t] = z_t * i_t + c_prev * f[t]
            if has_o:
                ob = a[k_o:k_o + N]
                if p_o is not None:
                    ob += p_o * c_t
                o[t] = one / (one + np.exp(-ob))
            hc = h_c[t] = h_fn(c_t)
            y_prev = y[t] = o[t] * hc
            c_prev = c_t
            if Q is not None:
                gates_prev = np.concatenate([(i, f, o)[k][t] for k in fgr_src])

    diverged = not (np.all(np.abs(c) <= DIVERGENCE_THRESHOLD) and np.all(np.isfinite(y)))
    zeros = np.zeros((T, N), dtype=dt)

    def pre(g):
        return A_bar[:, slot[g] * N:slot[g] * N + N] if g in slot else zeros

    cache = ForwardCache(x, A_bar[:, :N], z, pre("i"), i, pre("f"), f, c, pre("o"), o, y, h_c,
                         diverged=diverged, spec=spec)
    return y, cache


def backward_sequence(weights, spec, cache, top_deltas):
    """Full BPTT through one sequence.

    ``top_deltas[t]`` is dE/dy[t] from the layer above, excluding the
    recurrent paths. Returns ``(grads, input_deltas)``.
    """
    _check_consistent(weights, spec)
    if cache.spec != spec:
        raise ConfigurationError("cache was produced under a different variant spec")
    if cache.diverged:
        raise ConfigurationError("cannot backpropagate through a diverged forward pass")
    D = np.asarray(top_deltas, dtype=np.float64)
    T, N = cache.y.shape
    if D.shape != (T, N):
        raise ConfigurationError(f"top_deltas shape {D.shape}, expected {(T, N)}")

    B = weights.blocks
    units = spec.units
    slot = {u: k for k, u in enumerate(units)}
    U = len(units)
    g_prime = ACTIVATIONS[spec.input_activation][1]
    h_prime = ACTIVATIONS[spec.output_activation][1]
    has = {g: g in slot for g in GATES}
    peep = set(spec.peephole_gates)
    zero = np.zeros(N)
    p_i = B["p_i"] if "i" in peep else zero
    p_f = B["p_f"] if "f" in peep else zero
    p_o = B["p_o"] if "o" in peep else zero

    R = _stacked(weights, "R", units)
    W = _stacked(weights, "W", units)
    Q = _fgr_matrix(weights) if spec.full_gate_recurrence else None
    gated = spec.gated

    c_prev = cache.c_prev()
    g_der = g_prime(cache.z_bar)
    h_der = h_prime(cache.c)
    sig_i = logistic_prime_from_pre(cache.i_bar) if has["i"] else None
    sig_f = logistic_prime_from_pre(cache.f_bar) if has["f"] else None
    sig_o = logistic_prime_from_pre(cache.o_bar) if has["o"] else None

    dA = np.zeros((T, U * N))      # stacked pre-activation deltas [z, gates...]
    dc_next = np.zeros(N)
    f_next = np.zeros(N)
    da_next = np.zeros(U * N)
    for t in range(T - 1, -1, -1):
        dy = D[t] + da_next @ R
        gate_act_delta = {}
        if Q is not None:
            back = da_next[N:] @ Q
            for k, g in enumerate(gated):
                gate_act_delta[g] = back[k * N:(k + 1) * N]
        di_next = da_next[slot["i"] * N:slot["i"] * N + N] if has["i"] else zero
        df_next = da_next[slot["f"] * N:slot["f"] * N + N] if has["f"] else zero

        if has["o"]:
            do = (dy * cache.h_c[t] + gate_act_delta.get("o", 0.0)) * sig_o[t]
        else:
            do = zero
        dc = (dy * cache.o[t] * h_der[t] + p_o * do + p_i * di_next + p_f * df_next
              + dc_next * f_next)
        if has["f"]:
            df = (dc * c_prev[t] + gate_act_delta.get("f", 0.0)) * sig_f[t]
        if has["i"]:
            di_act = dc * cache.z[t] + gate_act_delta.get("i", 0.0)
            if spec.couple_input_forget:
                di_act = di_act - dc * c_prev[t]
            di = di_act * sig_i[t]
        dz = dc * cache.i[t] * g_der[t]

        row = dA[t]
        row[0:N] = dz
        if has["i"]:
            row[slot["i"] * N:slot["i"] * N + N] = di
        if has["f"]:
            row[slot["f"] * N:slot["f"] * N + N] = df
        if has["o"]:
            row[slot["o"] * N:slot["o"] * N + N] = do
        da_next = row
        dc_next = dc
        f_next = cache.f[t]

    grads = {}
    dW = dA.T @ cache.x
    dR = dA[1:].T @ cache.y[:-1]
    db = dA.sum(axis=0)
    for u in units:
        k = slot[u] * N
        grads[f"W_{u}"] = dW[k:k + N].copy()
        grads[f"R_{u}"] = dR[k:k + N].copy()
        grads[f"b_{u}"] = db[k:k + N].copy()
    for g in spec.peephole_gates:
        k = slot[g] * N
        cell = cache.c if g == "o" else c_prev
        grads[f"p_{g}"] = (cell * dA[:, k:k + N]).sum(axis=0)
    if Q is not None:
        acts = {"i": cache.i, "f": cache.f, "o": cache.o}
        for src, dst in spec.fgr_pairs:
            k = slot[dst] * N
            grads[f"R_{src}{dst}"] = dA[1:, k:k + N].T @ acts[src][:-1]
    ordered = {name: grads[name] for name in weights.blocks}
    input_deltas = dA @ W
    return LstmGradients(ordered, input_deltas), input_deltas
