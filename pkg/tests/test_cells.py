import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastweights import cells
from fastweights.cells import CellConfig, CellKind, CellParams, CellState, KeyMap
from fastweights.errors import RecordMismatch, ShapeMismatch


def params(kind, d_in, d_out, sigma="identity", **arrays):
    return CellParams(CellConfig(kind, d_in, d_out, sigma), **{k: np.array(v, dtype=float) for k, v in arrays.items()})


def random_params(kind, d_in, d_out, seed, sigma="tanh", key_map="identity"):
    return cells.init_params(CellConfig(kind, d_in, d_out, sigma, key_map), np.random.default_rng(seed))


# -- forward examples -----------------------------------------------------------

def test_feedforward_examples():
    assert cells.step_feedforward(params("feedforward", 2, 2, W=np.eye(2)), [3.0, 4.0]).tolist() == [3, 4]
    p = params("feedforward", 3, 2, sigma="tanh", W=np.zeros((2, 3)))
    assert cells.step_feedforward(p, [1.0, -2.0, 5.0]).tolist() == [0, 0]
    p = params("feedforward", 2, 2, W=[[1, 1], [0, 1]])
    assert cells.step_feedforward(p, [1.0, 2.0]).tolist() == [3, 2]


def test_feedforward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        cells.step_feedforward(params("feedforward", 2, 2, W=np.eye(2)), [1.0, 2.0, 3.0])


def test_elman_degenerates_to_feedforward():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 4))
    elman = params("elman", 4, 3, sigma="tanh", W=W, R=np.zeros((3, 3)))
    ff = params("feedforward", 4, 3, sigma="tanh", W=W)
    x = rng.normal(size=4)
    h, y = cells.step_elman(elman, rng.normal(size=3), x)
    np.testing.assert_array_equal(y, cells.step_feedforward(ff, x))
    assert h is y


def test_elman_fixed_point():
    p = params("elman", 1, 1, W=[[0]], R=[[1]])
    h = np.array([1.0])
    for x in [3.0, -2.0, 7.0]:
        h, _ = cells.step_elman(p, h, [x])
        assert h.tolist() == [1.0]


def test_elman_unrolled_trace():
    p = params("elman", 1, 1, W=[[1]], R=[[1]])
    expected, prev = [], 0.0
    for x in [1.0, 1.0, 1.0]:
        prev = x + prev
        expected.append(prev)
    h, ys = np.zeros(1), []
    for x in [1.0, 1.0, 1.0]:
        h, y = cells.step_elman(p, h, [x])
        ys.append(float(y[0]))
    assert ys == expected == [1, 2, 3]


def test_additive_no_write():
    rng = np.random.default_rng(1)
    p = params("additive", 3, 2, sigma="tanh", A=np.zeros((5, 3)))
    W0 = rng.normal(size=(2, 3))
    x = rng.normal(size=3)
    W1, y = cells.step_additive_fwp(p, W0, x)
    np.testing.assert_array_equal(W1, W0)
    np.testing.assert_array_equal(y, np.tanh(W0 @ x))


def test_additive_hand_unrolled():
    p = params("additive", 1, 1, A=[[1], [1]])
    W1, y1 = cells.step_additive_fwp(p, np.zeros((1, 1)), [2.0])
    assert W1.tolist() == [[4.0]] and y1.tolist() == [8.0]
    W, ys = np.zeros((1, 1)), []
    for _ in range(3):
        W, y = cells.step_additive_fwp(p, W, [1.0])
        ys.append(y.tolist())
    assert ys == [[1.0], [2.0], [3.0]]


def test_delta_zero_rate_keeps_weights():
    p = random_params("delta", 4, 3, seed=2)
    W0 = np.random.default_rng(2).normal(size=(3, 4))
    W1, _ = cells.step_delta_fwp(p, W0, np.ones(4), beta=0.0)
    np.testing.assert_array_equal(W1, W0)


def unit_key_params(d_in, d_out, key, value):
    """Delta params that write (key, value) when fed x = e_0."""
    A = np.zeros((d_in + d_out + 1, d_in))
    A[:d_in, 0] = key
    A[d_in:d_in + d_out, 0] = value
    return params("delta", d_in, d_out, A=A)


def test_delta_unit_key_exact_write():
    k = np.array([0.6, 0.0, 0.8])
    v = np.array([1.5, -2.0])
    p = unit_key_params(3, 2, k, v)
    W1, _ = cells.step_delta_fwp(p, np.zeros((2, 3)), [1.0, 0, 0], beta=1.0)
    np.testing.assert_allclose(W1 @ k, v, atol=1e-15)


def test_delta_overwrites_where_additive_superimposes():
    k = np.array([0.0, 1.0, 0.0])
    v1, v2 = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    e0 = [1.0, 0.0, 0.0]
    W = np.zeros((2, 3))
    W, _ = cells.step_delta_fwp(unit_key_params(3, 2, k, v1), W, e0, beta=1.0)
    W, _ = cells.step_delta_fwp(unit_key_params(3, 2, k, v2), W, e0, beta=1.0)
    np.testing.assert_allclose(W @ k, v2, atol=1e-15)

    def additive(v):
        A = np.zeros((5, 3))
        A[:3, 0], A[3:, 0] = k, v
        return params("additive", 3, 2, A=A)
    Wa = np.zeros((2, 3))
    Wa, _ = cells.step_additive_fwp(additive(v1), Wa, e0)
    Wa, _ = cells.step_additive_fwp(additive(v2), Wa, e0)
    np.testing.assert_allclose(Wa @ k, v1 + v2, atol=1e-15)


@pytest.mark.parametrize("d,r", [(4, 4), (6, 3), (8, 8)])
def test_delta_exact_storage_orthonormal_keys(d, r):
    rng = np.random.default_rng(d * 10 + r)
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    V = rng.normal(size=(5, d))
    A = np.vstack([Q, V, np.zeros((1, d))])
    p = params("delta", d, 5, A=A)
    W = np.zeros((5, d))
    for i in range(r):
        W, _ = cells.step_delta_fwp(p, W, np.eye(d)[i], beta=1.0)
    for i in range(r):
        assert np.max(np.abs(W @ Q[:, i] - V[:, i])) <= 1e-10


def test_hybrid_ablation_matches_delta():
    d_in, d_out = 4, 3
    delta = random_params("delta", d_in, d_out, seed=5)
    A = np.zeros((d_in + d_out + 1, d_in + d_out))
    A[:, :d_in] = delta.A
    hybrid = CellParams(CellConfig("hybrid", d_in, d_out, "tanh"), A=A)
    xs = np.random.default_rng(5).uniform(-1, 1, size=(10, d_in))
    W = np.zeros((d_out, d_in))
    state = cells.initial_state(hybrid.config)
    for x in xs:
        W, y_d = cells.step_delta_fwp(delta, W, x)
        state, y_h = cells.step_hybrid_fwp(hybrid, state, x)
        np.testing.assert_array_equal(y_h, y_d)
        np.testing.assert_array_equal(state.W, W)


def test_hybrid_cold_start_matches_delta_first_step():
    hybrid = random_params("hybrid", 3, 2, seed=6)
    delta = CellParams(CellConfig("delta", 3, 2, "tanh"), A=hybrid.A[:, :3])
    x = np.array([0.3, -0.7, 0.2])
    state, y_h = cells.step_hybrid_fwp(hybrid, cells.initial_state(hybrid.config), x)
    W, y_d = cells.step_delta_fwp(delta, np.zeros((2, 3)), x)
    # the wider slow matmul may sum in a different order
    np.testing.assert_allclose(y_h, y_d, rtol=1e-14)
    np.testing.assert_allclose(state.W, W, rtol=1e-14)


def test_hybrid_two_step_hand_trace():
    p = params("hybrid", 1, 1, A=np.ones((3, 2)))
    xs = [0.5, -0.25]
    # scalar oracle: slow input s = x + h feeds key, value and beta alike
    W, h, expected = 0.0, 0.0, []
    for x in xs:
        s = x + h
        k = s / max(abs(s), 1e-8)
        beta = 1 / (1 + math.exp(-s))
        W = W + beta * (s - W * k) * k
        h = W * x
        expected.append(h)
    state = cells.initial_state(p.config)
    got = []
    for x in xs:
        state, y = cells.step_hybrid_fwp(p, state, [x])
        got.append(float(y[0]))
    np.testing.assert_allclose(got, expected, rtol=1e-15)


# -- invariants ---------------------------------------------------------------

def test_state_sizes():
    d = 7
    elman = cells.initial_state(CellConfig("elman", d, d))
    fwp = cells.initial_state(CellConfig("additive", d, d))
    hybrid = cells.initial_state(CellConfig("hybrid", d, d))
    assert elman.num_floats() == d and elman.W is None
    assert fwp.num_floats() == d * d and fwp.h is None
    assert hybrid.num_floats() == d * d + d
    assert cells.initial_state(CellConfig("feedforward", d, d)).num_floats() == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 20), st.randoms(use_true_random=False))
def test_additive_writes_commute(seed, T, rnd):
    rng = np.random.default_rng(seed)
    p = random_params("additive", 3, 2, seed)
    xs = rng.uniform(-1, 1, size=(T, 3))
    order = list(range(T))
    rnd.shuffle(order)

    def final(seq):
        W = np.zeros((2, 3))
        for x in seq:
            W, _ = cells.step_additive_fwp(p, W, x)
        return W
    np.testing.assert_allclose(final(xs[order]), final(xs), atol=1e-12, rtol=0)


@pytest.mark.parametrize("kind", list(CellKind))
def test_steps_are_pure(kind):
    p = random_params(kind, 4, 3, seed=8)
    state = cells.initial_state(p.config)
    x = np.random.default_rng(8).normal(size=4)
    a = cells.forward_step(p, state, x)
    b = cells.forward_step(p, state, x)
    assert a[1].tobytes() == b[1].tobytes()
    if a[0].W is not None:
        assert a[0].W.tobytes() == b[0].W.tobytes()
    if state.W is not None:
        assert not state.W.any()


def test_param_shapes():
    assert CellConfig("additive", 3, 2).param_shapes() == {"A": (5, 3)}
    assert CellConfig("delta", 3, 2).param_shapes() == {"A": (6, 3)}
    assert CellConfig("hybrid", 3, 2).param_shapes() == {"A": (6, 5)}
    with pytest.raises(ShapeMismatch):
        CellParams(CellConfig("elman", 3, 2), W=np.zeros((2, 3)))


# -- backward ---------------------------------------------------------------------

def _step_parts(p, seed):
    rng = np.random.default_rng(seed)
    cfg = p.config
    state = CellState(
        h=rng.uniform(-1, 1, cfg.d_out) if cfg.kind.has_hidden else None,
        W=rng.uniform(-0.5, 0.5, (cfg.d_out, cfg.d_in)) if cfg.kind.has_fast_weights else None,
    )
    return state, rng.uniform(-1, 1, cfg.d_in), rng.normal(size=cfg.d_out), rng


def _scalar(p, state, x, c_y, c_h, c_W):
    new, y, _ = cells.forward_step(p, state, x)
    out = float(c_y @ y)
    if new.h is not None and c_h is not None:
        out += float(c_h @ new.h)
    if new.W is not None:
        out += float(np.sum(c_W * new.W))
    return out


def _fd(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        up = f()
        arr[idx] = orig - h
        down = f()
        arr[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.mark.parametrize("kind", list(CellKind))
@pytest.mark.parametrize("key_map", list(KeyMap))
def test_step_backward_matches_finite_differences(kind, key_map):
    p = random_params(kind, 4, 3, seed=11, key_map=key_map)
    state, x, c_y, rng = _step_parts(p, 11)
    c_h = rng.normal(size=3) if kind.has_hidden else None
    c_W = rng.normal(size=(3, 4))
    new, _, rec = cells.forward_step(p, state, x)
    grads = p.zeros_like()
    d_out_state = CellState(h=c_h,
                           W=c_W if kind.has_fast_weights else None)
    d_in_state, d_x = cells.step_backward(p, rec, c_y, d_out_state, grads, W=new.W)

    f = lambda: _scalar(p, state, x, c_y, c_h, c_W)
    for name, arr in p.named().items():
        np.testing.assert_allclose(getattr(grads, name), _fd(f, arr), atol=1e-7)
    np.testing.assert_allclose(d_x, _fd(f, x), atol=1e-7)
    if state.h is not None:
        np.testing.assert_allclose(d_in_state.h, _fd(f, state.h), atol=1e-7)
    if state.W is not None:
        np.testing.assert_allclose(d_in_state.W, _fd(f, state.W), atol=1e-7)


@pytest.mark.parametrize("kind", list(CellKind))
def test_zero_cotangent_gives_zero_gradients(kind):
    p = random_params(kind, 3, 3, seed=12)
    state, x, _, _ = _step_parts(p, 12)
    new, _, rec = cells.forward_step(p, state, x)
    grads = p.zeros_like()
    d_state, d_x = cells.step_backward(p, rec, np.zeros(3), None, grads, W=new.W)
    assert not d_x.any()
    assert not grads.flat().any()
    for part in (d_state.h, d_state.W):
        assert part is None or not part.any()


def test_feedforward_linear_gradient_identity():
    p = random_params("feedforward", 4, 3, seed=13, sigma="identity")
    x, dy = np.arange(4.0), np.array([1.0, -2.0, 0.5])
    _, _, rec = cells.forward_step(p, CellState(), x)
    grads = p.zeros_like()
    cells.step_backward(p, rec, dy, None, grads)
    np.testing.assert_array_equal(grads.W, np.outer(dy, x))


def test_record_mismatch():
    p = random_params("elman", 3, 3, seed=14)
    q = random_params("feedforward", 3, 3, seed=14)
    _, _, rec = cells.forward_step(q, CellState(), np.ones(3))
    with pytest.raises(RecordMismatch):
        cells.step_backward(p, rec, np.ones(3), None, p.zeros_like())


def test_forced_beta_gets_no_beta_gradient():
    p = random_params("delta", 3, 2, seed=15)
    state, x, c_y, _ = _step_parts(p, 15)
    new, _, rec = cells.forward_step(p, state, x, beta=0.7)
    grads = p.zeros_like()
    cells.step_backward(p, rec, c_y, None, grads, W=new.W)
    assert not grads.A[-1].any()


# -- checkpoint files --------------------------------------------------------------

@pytest.mark.parametrize("kind", list(CellKind))
def test_checkpoint_roundtrip(kind):
    p = random_params(kind, 5, 3, seed=16, key_map="relu_l1")
    buf = io.BytesIO()
    cells.save_params(buf, p)
    buf.seek(0)
    q = cells.load_params(buf)
    assert q.config == p.config
    for name, arr in p.named().items():
        assert getattr(q, name).tobytes() == arr.tobytes()


def test_checkpoint_header_layout():
    p = random_params("delta", 2, 3, seed=17, sigma="relu")
    buf = io.BytesIO()
    cells.save_params(buf, p)
    raw = buf.getvalue()
    assert raw[:4] == b"FWPC"
    assert raw[4] == list(CellKind).index(CellKind.DELTA)
    assert int.from_bytes(raw[8:16], "little") == 2
    assert int.from_bytes(raw[16:24], "little") == 3
    assert int.from_bytes(raw[24:32], "little") == 6     # A rows
    assert len(raw) == 24 + 16 + 8 * 6 * 2
