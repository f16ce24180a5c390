import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstmlab import lstm
from lstmlab.lstm import PRESETS, VariantSpec, backward_sequence, forward_sequence
from lstmlab.numerics import ConfigurationError, make_rng


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def fd_layer(weights, spec, x, top, eps=1e-6):
    """Independent central differences of sum(top * y) in extended precision."""
    probe = weights.copy(np.longdouble)
    xl = x.astype(np.longdouble)
    topl = top.astype(np.longdouble)

    def loss():
        y, _ = forward_sequence(probe, spec, xl)
        return np.sum(topl * y)

    grads = {}
    for name, arr in probe.blocks.items():
        g = np.zeros(arr.shape)
        for j in range(arr.size):
            old = arr.flat[j]
            arr.flat[j] = old + eps
            up = loss()
            arr.flat[j] = old - eps
            down = loss()
            arr.flat[j] = old
            g.flat[j] = float((up - down) / (2 * eps))
        grads[name] = g
    gx = np.zeros(x.shape)
    for j in range(x.size):
        old = xl.flat[j]
        xl.flat[j] = old + eps
        up = loss()
        xl.flat[j] = old - eps
        down = loss()
        xl.flat[j] = old
        gx.flat[j] = float((up - down) / (2 * eps))
    return grads, gx


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-10, np.abs(a) + np.abs(b)), initial=0.0)


# ------------------------------------------------------------ parameters

def test_init_distribution():
    w = lstm.init_weights(PRESETS["V"], 120, 100, make_rng(0))
    vals = np.concatenate([v.ravel() for v in w.blocks.values()])
    assert vals.size >= 100_000
    assert abs(vals.mean()) < 0.01
    assert abs(vals.std() - 0.1) < 0.005


def test_init_deterministic_and_np_has_no_peepholes():
    a = lstm.init_weights(PRESETS["NP"], 5, 3, make_rng(3))
    b = lstm.init_weights(PRESETS["NP"], 5, 3, make_rng(3))
    assert not any(k.startswith("p_") for k in a.blocks)
    for k in a.blocks:
        np.testing.assert_array_equal(a[k], b[k])


def test_num_params_hand_counts():
    assert lstm.num_params(PRESETS["V"], 1, 1) == 15
    for N, M in [(1, 1), (4, 3), (20, 7)]:
        v = lstm.num_params(PRESETS["V"], N, M)
        assert lstm.num_params(PRESETS["FGR"], N, M) - v == 9 * N * N
        assert lstm.num_params(PRESETS["CIFG"], N, M) - v == -(N * M + N * N + N + N)
        assert lstm.num_params(PRESETS["NIG"], N, M) - v == -(N * M + N * N + N + N)
        assert lstm.num_params(PRESETS["NP"], N, M) - v == -3 * N
        assert lstm.num_params(PRESETS["NIAF"], N, M) == v


EXPECTED_ABSENT = {
    "V": set(),
    "NIG": {"W_i", "R_i", "p_i", "b_i"},
    "NFG": {"W_f", "R_f", "p_f", "b_f"},
    "NOG": {"W_o", "R_o", "p_o", "b_o"},
    "NIAF": set(),
    "NOAF": set(),
    "NP": {"p_i", "p_f", "p_o"},
    "CIFG": {"W_f", "R_f", "p_f", "b_f"},
    "FGR": set(),
}
VANILLA_BLOCKS = {f"{k}_{u}" for k in "WRb" for u in "zifo"} | {"p_i", "p_f", "p_o"}


@pytest.mark.parametrize("name", list(PRESETS))
def test_block_presence(name):
    spec = PRESETS[name]
    expected = VANILLA_BLOCKS - EXPECTED_ABSENT[name]
    if name == "FGR":
        expected |= {f"R_{a}{b}" for a in "ifo" for b in "ifo"}
    w = lstm.init_weights(spec, 3, 2, make_rng(0))
    assert set(w.blocks) == expected
    assert w.num_params == lstm.num_params(spec, 3, 2)


def test_invalid_specs_rejected():
    with pytest.raises(ConfigurationError):
        VariantSpec(couple_input_forget=True)  # forget gate still independent
    with pytest.raises(ConfigurationError):
        VariantSpec(input_gate=False, forget_gate=False, couple_input_forget=True)
    with pytest.raises(ConfigurationError):
        VariantSpec(input_activation="relu")
    with pytest.raises(ConfigurationError):
        lstm.get_preset("LSTM9")
    w = lstm.init_weights(PRESETS["V"], 2, 2, make_rng(0))
    with pytest.raises(ConfigurationError):
        lstm.LstmWeights(PRESETS["NP"], 2, 2, w.blocks)


# --------------------------------------------------------------- forward

def test_zero_weights_give_zero_output(rng):
    spec = PRESETS["V"]
    w = lstm.LstmWeights.zeros(spec, 4, 3)
    y, cache = forward_sequence(w, spec, rng.normal(size=(6, 3)))
    assert np.all(y == 0.0)
    assert np.all(cache.o == 0.5)


INTEGRATOR = VariantSpec(input_gate=False, forget_gate=False, output_gate=False,
                         input_activation="identity", output_activation="identity",
                         peepholes=False)


def test_integrator_closed_form(rng):
    w = lstm.init_weights(INTEGRATOR, 3, 2, rng, std=0.5)
    w["R_z"][...] = 0.0
    x = rng.normal(size=(7, 2))
    y, cache = forward_sequence(w, INTEGRATOR, x)
    expected = np.cumsum(x @ w["W_z"].T + w["b_z"], axis=0)
    np.testing.assert_allclose(cache.c, expected, atol=1e-12, rtol=0)
    np.testing.assert_allclose(y, expected, atol=1e-12, rtol=0)


def test_scalar_hand_evaluation():
    spec = PRESETS["V"]
    w = lstm.LstmWeights.zeros(spec, 1, 1)
    for k, v in w.blocks.items():
        if not k.startswith("b_"):
            v[...] = 0.5
    y, cache = forward_sequence(w, spec, np.array([[1.0]]))
    c1 = sigmoid(0.5) * np.tanh(0.5)
    assert cache.z[0, 0] == pytest.approx(np.tanh(0.5), abs=1e-15)
    # forget gate is irrelevant at t = 1 because c0 = 0
    assert cache.c[0, 0] == pytest.approx(c1, abs=1e-15)
    assert cache.o_bar[0, 0] == pytest.approx(0.5 + 0.5 * c1, abs=1e-15)
    assert y[0, 0] == pytest.approx(sigmoid(0.5 + 0.5 * c1) * np.tanh(c1), abs=1e-15)


def test_output_peephole_reads_current_cell_input_gates_read_previous(rng):
    spec = PRESETS["V"]
    w = lstm.init_weights(spec, 2, 2, rng, std=0.5)
    x = rng.normal(size=(4, 2))
    _, cache = forward_sequence(w, spec, x)
    c_prev = cache.c_prev()
    y_prev = np.vstack([np.zeros((1, 2)), cache.y[:-1]])
    i_bar = x @ w["W_i"].T + y_prev @ w["R_i"].T + w["p_i"] * c_prev + w["b_i"]
    o_bar = x @ w["W_o"].T + y_prev @ w["R_o"].T + w["p_o"] * cache.c + w["b_o"]
    np.testing.assert_allclose(cache.i_bar, i_bar, atol=1e-14)
    np.testing.assert_allclose(cache.o_bar, o_bar, atol=1e-14)


@pytest.mark.parametrize("name", list(PRESETS))
def test_gate_ranges(name, rng):
    spec = PRESETS[name]
    w = lstm.init_weights(spec, 5, 3, rng, std=1.0)
    _, cache = forward_sequence(w, spec, rng.normal(size=(20, 3)))
    flags = {"i": spec.input_gate, "f": spec.forget_gate or spec.couple_input_forget,
             "o": spec.output_gate}
    for g in "ifo":
        act = getattr(cache, g)
        if flags[g]:
            assert np.all((act > 0) & (act < 1))
        else:
            assert np.all(act == 1.0)
    if spec.couple_input_forget:
        np.testing.assert_allclose(cache.f + cache.i, 1.0, atol=1e-15, rtol=0)


def test_unbounded_activation_overflow_flags_divergence(rng):
    # without either squashing function the recurrence through R_z grows geometrically
    spec = VariantSpec(input_activation="identity", output_activation="identity")
    w = lstm.init_weights(spec, 3, 2, rng)
    for k, v in w.blocks.items():
        v[...] = 5.0 if k.startswith(("R_z", "b_")) else 0.0
    with np.errstate(all="ignore"):
        _, cache = forward_sequence(w, spec, np.ones((400, 2)))
    assert cache.diverged
    with pytest.raises(ConfigurationError):
        backward_sequence(w, spec, cache, np.ones((400, 3)))


def test_forward_and_backward_bit_reproducible(rng):
    spec = PRESETS["FGR"]
    w = lstm.init_weights(spec, 4, 3, rng)
    x = rng.normal(size=(6, 3))
    top = rng.normal(size=(6, 4))
    y1, c1 = forward_sequence(w, spec, x)
    y2, c2 = forward_sequence(w, spec, x)
    np.testing.assert_array_equal(y1, y2)
    g1, _ = backward_sequence(w, spec, c1, top)
    g2, _ = backward_sequence(w, spec, c2, top)
    for k in g1.blocks:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_input_shape_checked(rng):
    spec = PRESETS["V"]
    w = lstm.init_weights(spec, 2, 3, rng)
    with pytest.raises(ConfigurationError):
        forward_sequence(w, spec, np.ones((4, 2)))


# -------------------------------------------------------------- backward

def test_zero_top_deltas_give_zero_gradients(rng):
    spec = PRESETS["FGR"]
    w = lstm.init_weights(spec, 3, 2, rng)
    _, cache = forward_sequence(w, spec, rng.normal(size=(5, 2)))
    g, dx = backward_sequence(w, spec, cache, np.zeros((5, 3)))
    assert all(np.all(v == 0.0) for v in g.blocks.values())
    assert np.all(dx == 0.0)


def test_backward_spec_mismatch(rng):
    w = lstm.init_weights(PRESETS["V"], 3, 2, rng)
    _, cache = forward_sequence(w, PRESETS["V"], rng.normal(size=(5, 2)))
    with pytest.raises(ConfigurationError):
        backward_sequence(w, PRESETS["NP"], cache, np.zeros((5, 3)))


@pytest.mark.parametrize("name", list(PRESETS))
@pytest.mark.parametrize("N,T", [(1, 1), (1, 5), (4, 1), (4, 5)])
def test_bptt_matches_finite_differences(name, N, T):
    spec = PRESETS[name]
    r = make_rng(N * 10 + T)
    w = lstm.init_weights(spec, N, 3, r, std=0.5)
    x = r.normal(size=(T, 3))
    top = r.normal(size=(T, N))
    _, cache = forward_sequence(w, spec, x)
    g, dx = backward_sequence(w, spec, cache, top)
    assert set(g.blocks) == set(w.blocks)
    num, num_x = fd_layer(w, spec, x, top)
    for k in w.blocks:
        assert rel_err(g[k], num[k]) < 1e-5, k
    assert rel_err(dx, num_x) < 1e-5


variant_specs = st.builds(
    lambda ig, fg, og, ia, oa, ph, cpl, fgr: VariantSpec(
        input_gate=ig or cpl, forget_gate=fg and not cpl, output_gate=og, input_activation=ia,
        output_activation=oa, peepholes=ph, couple_input_forget=cpl, full_gate_recurrence=fgr),
    st.booleans(), st.booleans(), st.booleans(), st.sampled_from(["tanh", "identity"]),
    st.sampled_from(["tanh", "identity"]), st.booleans(), st.booleans(), st.booleans())


@settings(max_examples=25, deadline=None)
@given(variant_specs, st.integers(0, 2**32 - 1))
def test_bptt_property_any_combination(spec, seed):
    r = make_rng(seed)
    w = lstm.init_weights(spec, 2, 2, r, std=0.5)
    x = r.normal(size=(4, 2))
    top = r.normal(size=(4, 2))
    _, cache = forward_sequence(w, spec, x)
    g, dx = backward_sequence(w, spec, cache, top)
    num, num_x = fd_layer(w, spec, x, top)
    for k in w.blocks:
        assert rel_err(g[k], num[k]) < 1e-5, k
    assert rel_err(dx, num_x) < 1e-5
