import numpy as np
import pytest

from fastweights import bptt, cells
from fastweights.bptt import FULL_CACHE, REVERSIBLE, checkpoint
from fastweights.cells import CellConfig, CellKind, CellParams
from fastweights.errors import EmptySequence, ShapeMismatch, StrategyUnsupported

ADMISSIBLE = {
    CellKind.FEEDFORWARD: [FULL_CACHE, checkpoint(3)],
    CellKind.ELMAN: [FULL_CACHE, checkpoint(), checkpoint(5)],
    CellKind.ADDITIVE: [FULL_CACHE, REVERSIBLE, checkpoint(), checkpoint(4)],
    CellKind.DELTA: [FULL_CACHE, checkpoint(), checkpoint(8)],
    CellKind.HYBRID: [FULL_CACHE, checkpoint(), checkpoint(2)],
}


def setup(kind, T, seed, d_in=3, d_out=3, sigma="tanh"):
    rng = np.random.default_rng(seed)
    p = cells.init_params(CellConfig(kind, d_in, d_out, sigma), rng)
    xs = rng.uniform(-1, 1, size=(T, d_in))
    probe = rng.normal(size=(T, d_out))
    return p, xs, probe


def grads(p, xs, probe, strategy):
    _, tape = bptt.run_forward(p, xs, strategy)
    return bptt.run_backward(p, tape, probe)


@pytest.mark.parametrize("kind", list(CellKind))
def test_single_step_unroll(kind):
    p, xs, _ = setup(kind, 1, 0)
    ys, _ = bptt.run_forward(p, xs)
    _, y, _ = cells.forward_step(p, cells.initial_state(p.config), xs[0])
    assert ys[0].tobytes() == y.tobytes()


@pytest.mark.parametrize("kind", list(CellKind))
def test_forward_is_strategy_independent(kind):
    p, xs, _ = setup(kind, 17, 1)
    outs = [bptt.run_forward(p, xs, s)[0] for s in ADMISSIBLE[kind]]
    for ys in outs[1:]:
        assert ys.tobytes() == outs[0].tobytes()


def test_additive_scalar_trace():
    p = CellParams(CellConfig("additive", 1, 1, "identity"), A=np.array([[1.0], [1.0]]))
    ys, _ = bptt.run_forward(p, np.ones((3, 1)), REVERSIBLE)
    assert ys.ravel().tolist() == [1.0, 2.0, 3.0]


@pytest.mark.parametrize("kind", list(CellKind))
def test_zero_cotangent(kind):
    p, xs, probe = setup(kind, 6, 2)
    g = grads(p, xs, np.zeros_like(probe), None)
    assert not g.d_params.flat().any()
    assert g.loss == 0.0


@pytest.mark.parametrize("kind", list(CellKind))
@pytest.mark.parametrize("T", [1, 2, 7, 64])
def test_strategy_equivalence(kind, T):
    worst = 0.0
    for seed in range(50):
        p, xs, probe = setup(kind, T, seed)
        ref = grads(p, xs, probe, FULL_CACHE)
        for s in ADMISSIBLE[kind][1:]:
            other = grads(p, xs, probe, s)
            worst = max(worst, bptt.max_rel_err(ref.d_params, other.d_params))
            np.testing.assert_allclose(other.d_xs, ref.d_xs, atol=1e-10)
    assert worst <= 1e-8


def test_reversible_matches_full_cache_50_seeds():
    worst = 0.0
    for seed in range(50):
        T = 1 + seed % 64
        p, xs, probe = setup("additive", T, seed, d_in=4, d_out=5)
        a = grads(p, xs, probe, FULL_CACHE)
        b = grads(p, xs, probe, REVERSIBLE)
        worst = max(worst, bptt.max_rel_err(a.d_params, b.d_params))
    assert worst <= 1e-8


@pytest.mark.parametrize("kind", list(CellKind))
def test_analytic_vs_finite_differences(kind):
    worst = 0.0
    for seed in range(5):
        worst = max(worst, bptt.gradcheck(kind, 3, 2, 7, seed).max_rel_err)
    assert worst <= 1e-5


def test_elman_full_cache_vs_finite_differences():
    p, xs, probe = setup("elman", 12, 3, d_in=4, d_out=5)
    a = grads(p, xs, probe, FULL_CACHE).d_params
    n = bptt.finite_diff_grad(p, xs, lambda ys: float(np.sum(probe * ys)), 1e-5).d_params
    assert bptt.max_rel_err(a, n) <= 1e-5


def test_finite_diff_quadratic_is_exact():
    w, x = 0.7, 1.3
    p = CellParams(CellConfig("feedforward", 1, 1, "identity"), W=np.array([[w]]))
    g = bptt.finite_diff_grad(p, np.array([[x]]), lambda ys: float(ys[0, 0] ** 2), h=1e-5)
    # d/dw (w x)^2 = 2 w x^2; central differences are exact for quadratics up to roundoff
    assert g.d_params.W[0, 0] == pytest.approx(2 * w * x * x, rel=1e-9)


@pytest.mark.parametrize("kind", ["feedforward", "elman"])
def test_zero_inputs_are_stationary(kind):
    p, _, _ = setup(kind, 5, 4, sigma="tanh")
    xs = np.zeros((5, 3))
    g = bptt.finite_diff_grad(p, xs, lambda ys: float(np.sum(ys ** 2)))
    np.testing.assert_allclose(g.d_params.W, 0.0, atol=1e-12)
    a = grads(p, xs, np.zeros((5, 3)), None)
    assert not a.d_params.W.any()


def test_finite_diff_rejects_bad_step():
    p, xs, _ = setup("feedforward", 2, 0)
    with pytest.raises(ValueError):
        bptt.finite_diff_grad(p, xs, lambda ys: 0.0, h=0.0)


def test_max_rel_err_symmetric_metric():
    p, _, _ = setup("feedforward", 1, 0)
    a, b = p.zeros_like(), p.zeros_like()
    assert bptt.max_rel_err(a, b) == 0.0
    a.W[0, 0], b.W[0, 0] = 2.0, 1.0
    assert bptt.max_rel_err(a, b) == bptt.max_rel_err(b, a) == 0.5


# -- memory ---------------------------------------------------------------------

def peak(kind, T, strategy, d=4):
    p, xs, probe = setup(kind, T, 7, d_in=d, d_out=d)
    _, tape = bptt.run_forward(p, xs, strategy)
    bptt.run_backward(p, tape, probe)
    return bptt.peak_weight_buffers(tape)


@pytest.mark.parametrize("T", [1, 8, 32, 256])
def test_peak_buffers_reversible_constant_full_linear(T):
    assert peak("additive", T, REVERSIBLE) <= 2
    assert peak("additive", T, FULL_CACHE) == T + 1


def test_peak_buffers_checkpoint():
    assert peak("additive", 32, checkpoint(8)) <= 4 + 8
    assert peak("delta", 32, checkpoint(8)) <= 4 + 8
    # default interval ceil(sqrt(T)) keeps the peak well under T
    assert peak("delta", 256, checkpoint()) <= 16 + 16


def test_tape_storage_invariants():
    T = 20
    p, xs, _ = setup("additive", T, 8)
    assert bptt.run_forward(p, xs, FULL_CACHE)[1].stored_weight_snapshots() == T
    assert bptt.run_forward(p, xs, REVERSIBLE)[1].stored_weight_snapshots() == 0
    assert bptt.run_forward(p, xs, checkpoint(6))[1].stored_weight_snapshots() == 4


def test_peak_requires_backward():
    p, xs, _ = setup("additive", 3, 0)
    _, tape = bptt.run_forward(p, xs, REVERSIBLE)
    with pytest.raises(RuntimeError):
        bptt.peak_weight_buffers(tape)


def test_reversible_reconstruction_drift():
    for seed in range(10):
        p, xs, probe = setup("additive", 256, seed, d_in=6, d_out=6)
        _, tape = bptt.run_forward(p, xs, REVERSIBLE)
        bptt.run_backward(p, tape, probe)
        assert np.max(np.abs(tape.reconstructed_W0)) <= 1e-9


def test_reversible_rejected_for_gated_cells():
    for kind in ("delta", "hybrid", "elman"):
        p, xs, _ = setup(kind, 3, 0)
        with pytest.raises(StrategyUnsupported):
            bptt.run_forward(p, xs, REVERSIBLE)


def test_tape_is_single_use():
    p, xs, probe = setup("additive", 4, 0)
    _, tape = bptt.run_forward(p, xs, REVERSIBLE)
    bptt.run_backward(p, tape, probe)
    with pytest.raises(RuntimeError):
        bptt.run_backward(p, tape, probe)


def test_input_validation():
    p, _, _ = setup("elman", 1, 0)
    with pytest.raises(EmptySequence):
        bptt.run_forward(p, np.zeros((0, 3)))
    with pytest.raises(ShapeMismatch):
        bptt.run_forward(p, np.zeros((4, 2)))
    with pytest.raises(EmptySequence):
        bptt.gradcheck("elman", 3, 3, 0, 0)


# -- gradient flow ----------------------------------------------------------------

@pytest.mark.parametrize("T", [4, 64])
def test_linear_additive_gradient_flow(T):
    d = 5
    p, xs, _ = setup("additive", T, 9, d_in=d, d_out=d, sigma="identity")
    worst = 0.0
    for i in range(d):
        d_ys = np.zeros((T, d))
        d_ys[-1, i] = 1.0
        _, tape = bptt.run_forward(p, xs, REVERSIBLE)
        ks = [r.k for r in tape.records]
        bundle = bptt.run_backward(p, tape, d_ys, collect_inner=True)
        for t in range(T):
            # row i of the Jacobian d y_T / d v_t
            expected = np.dot(ks[t], xs[-1]) * np.eye(d)[i]
            worst = max(worst, np.max(np.abs(bundle.inner[t]["v"] - expected)))
    assert worst <= 1e-12


def test_batched_gradients_are_sum_over_sequences():
    rng = np.random.default_rng(10)
    p = cells.init_params(CellConfig("hybrid", 3, 2), rng)
    xs = rng.uniform(-1, 1, size=(9, 4, 3))
    probe = rng.normal(size=(9, 4, 2))
    batched = grads(p, xs, probe, None).d_params
    total = p.zeros_like()
    for b in range(4):
        total = total + grads(p, xs[:, b], probe[:, b], None).d_params
    assert bptt.max_rel_err(batched, total) <= 1e-12
