import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from gridflow import tensor_ad as ad
from gridflow.tensor_ad import (
    AdamState,
    BackwardOnNonScalar,
    NonFiniteGradient,
    ParamMismatch,
    Params,
    ShapeMismatch,
    Tensor,
    adam_step,
    cosine_lr,
    gradcheck,
    load_checkpoint,
    save_checkpoint,
)

TOL = 1e-4


def _away_from_zero(r, shape):
    # keeps kinked ops (relu, abs, max) off their kinks during differencing
    x = r.uniform(0.2, 1.0, size=shape) * r.choice([-1.0, 1.0], size=shape)
    return x


def _project(out, r):
    w = Tensor(r.standard_normal(out.shape))
    return ad.sum_(ad.mul(out, w))


def _case(name, m, n, r):
    """(function of leaves, input arrays) for one op on an (m, n) problem."""
    A = r.standard_normal((m, n))
    B = r.standard_normal((m, n))
    vec = r.standard_normal(n)
    seg = r.integers(0, 3, size=m)
    idx = r.integers(0, m, size=m + 2)
    table = {
        "add": (lambda a, b: ad.add(a, b), [A, B]),
        "add_bias": (lambda a, b: ad.add(a, b), [A, vec]),
        "sub": (lambda a, b: ad.sub(a, b), [A, B]),
        "sub_bias": (lambda a, b: ad.sub(a, b), [A, vec]),
        "mul": (lambda a, b: ad.mul(a, b), [A, B]),
        "scale": (lambda a: ad.scale(a, -2.5), [A]),
        "row_scale": (lambda a, w: ad.row_scale(a, w), [A, r.standard_normal(m)]),
        "matmul": (lambda a, b: ad.matmul(a, b), [A, r.standard_normal((n, 4))]),
        "linear": (lambda x, w, b: ad.linear(x, w, b), [A, r.standard_normal((n, 3)), r.standard_normal(3)]),
        "relu": (lambda a: ad.relu(a), [_away_from_zero(r, (m, n))]),
        "sigmoid": (lambda a: ad.sigmoid(a), [A]),
        "sin": (lambda a: ad.sin(a), [A]),
        "cos": (lambda a: ad.cos(a), [A]),
        "abs": (lambda a: ad.abs_(a), [_away_from_zero(r, (m, n))]),
        "concat0": (lambda a, b: ad.concat([a, b], axis=0), [A, r.standard_normal((2, n))]),
        "concat1": (lambda a, b: ad.concat([a, b], axis=1), [A, r.standard_normal((m, 2))]),
        "slice": (lambda a: ad.slice_(a, (slice(0, max(m - 1, 1)), slice(None))), [A]),
        "slice_fancy": (lambda a: ad.slice_(a, ([0, 0, m - 1], slice(None))), [A]),
        "reshape": (lambda a: ad.reshape(a, (n, m)), [A]),
        "sum_all": (lambda a: ad.sum_(a), [A]),
        "sum0": (lambda a: ad.sum_(a, 0), [A]),
        "sum1": (lambda a: ad.sum_(a, 1), [A]),
        "mean0": (lambda a: ad.mean(a, 0), [A]),
        "mean1": (lambda a: ad.mean(a, 1), [A]),
        "max0": (lambda a: ad.max_(a, 0), [A]),
        "max1": (lambda a: ad.max_(a, 1), [A]),
        "softmax1": (lambda a: ad.softmax(a, 1), [A]),
        "softmax0": (lambda a: ad.softmax(a, 0), [A]),
        "layer_norm": (lambda a, g, b: ad.layer_norm(a, g, b), [A, r.standard_normal(n), r.standard_normal(n)]),
        "l1_loss": (lambda a, b: ad.l1_loss(a, b), [A, A + _away_from_zero(r, (m, n))]),
        "gather": (lambda a: ad.gather(a, idx), [A]),
        "scatter_add": (lambda a: ad.scatter_add(a, idx, m), [r.standard_normal((m + 2, n))]),
        "segment_sum": (lambda a: ad.segment_sum(a, seg, 3), [A]),
        "segment_mean": (lambda a: ad.segment_mean(a, seg, 3), [A]),
        "segment_max": (lambda a: ad.segment_max(a, seg, 3), [A]),
        "segment_softmax": (lambda a: ad.segment_softmax(a, seg, 3), [r.standard_normal(m)]),
        "spmm": (lambda a: ad.spmm(sp.random(4, m, density=0.6, random_state=1, format="csr"), a), [A]),
    }
    return table[name]


OPS = [
    "add", "add_bias", "sub", "sub_bias", "mul", "scale", "row_scale", "matmul", "linear",
    "relu", "sigmoid", "sin", "cos", "abs", "concat0", "concat1", "slice", "slice_fancy",
    "reshape", "sum_all", "sum0", "sum1", "mean0", "mean1", "max0", "max1", "softmax1",
    "softmax0", "layer_norm", "l1_loss", "gather", "scatter_add", "segment_sum",
    "segment_mean", "segment_max", "segment_softmax", "spmm",
]


def check_op(name, m, n, seed):
    r = np.random.default_rng(seed)
    fn, arrays = _case(name, m, n, r)
    proj = np.random.default_rng(seed + 1)
    probe = fn(*[Tensor(a) for a in arrays])
    w = proj.standard_normal(probe.shape)

    def scalar(*leaves):
        out = fn(*leaves)
        return out if out.shape == () else ad.sum_(ad.reshape(ad.mul(out, Tensor(w)), (-1,)))

    return gradcheck(scalar, arrays)


@pytest.mark.parametrize("name", OPS)
def test_gradcheck_fixed_shape(name):
    assert check_op(name, 5, 4, seed=0) < TOL


@settings(max_examples=60, deadline=None)
@given(name=st.sampled_from(OPS), m=st.integers(1, 7), n=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_gradcheck_random_shapes(name, m, n, seed):
    assert check_op(name, m, n, seed) < TOL


def test_softmax_uniform_and_zero_gradient():
    x = Tensor(np.zeros(3), requires_grad=True)
    s = ad.softmax(x, 0)
    np.testing.assert_allclose(s.data, [1 / 3] * 3)
    ad.sum_(s).backward()
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)


def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((2, 6), 3.7))
    out = ad.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
    # mean rounding leaves ~1e-16 in the centred row, amplified by 1/sqrt(eps)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)
    assert np.isfinite(out.data).all()


def test_backward_needs_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(BackwardOnNonScalar):
        ad.relu(x).backward()


@pytest.mark.parametrize(
    "op",
    [
        lambda: ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))),
        lambda: ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
        lambda: ad.mul(Tensor(np.ones(3)), Tensor(np.ones(4))),
        lambda: ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0),
        lambda: ad.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.ones(2))),
        lambda: ad.scatter_add(Tensor(np.ones((3, 2))), [0, 1], 4),
    ],
)
def test_shape_mismatch(op):
    with pytest.raises(ShapeMismatch):
        op()


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    ad.sum_(ad.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [4.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_segment_max_empty_segment_is_zero():
    out = ad.segment_max(Tensor(np.array([[1.0], [2.0]])), [0, 0], 2)
    np.testing.assert_array_equal(out.data, [[2.0], [0.0]])


def test_deterministic_forward_backward():
    def run():
        r = np.random.default_rng(3)
        a = Tensor(r.standard_normal((6, 4)), requires_grad=True)
        w = Tensor(r.standard_normal((4, 4)), requires_grad=True)
        h = ad.layer_norm(ad.relu(ad.matmul(a, w)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        ad.sum_(ad.segment_max(h, [0, 1, 0, 1, 2, 2], 3)).backward()
        return a.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


# -- optimiser -------------------------------------------------------------------


def _params(**arrays):
    p = Params()
    for k, v in arrays.items():
        p.add(k, np.asarray(v, dtype=float))
    return p


def test_adam_zero_gradient_is_noop():
    p = _params(w=[1.0, -2.0])
    adam_step(p, {"w": np.zeros(2)}, 1e-3, AdamState())
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = _params(w=[0.5])
    state = adam_step(p, {"w": np.array([1.0])}, 1e-3, AdamState())
    # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    np.testing.assert_allclose(0.5 - p["w"].data, [1e-3 / (1 + 1e-8)], rtol=1e-12)
    assert state.t == 1


def test_adam_nan_names_parameter():
    p = _params(a=[1.0], b=[2.0])
    with pytest.raises(NonFiniteGradient) as err:
        adam_step(p, {"a": np.array([0.1]), "b": np.array([np.nan])}, 1e-3, AdamState())
    assert err.value.param_name == "b"
    np.testing.assert_array_equal(p["a"].data, [1.0])


def test_cosine_schedule_points():
    assert cosine_lr(0, 100) == pytest.approx(1e-3)
    assert cosine_lr(100, 100) == pytest.approx(1e-5)
    assert cosine_lr(50, 100) == pytest.approx((1e-3 + 1e-5) / 2)
    with pytest.raises(ValueError):
        cosine_lr(101, 100)


@settings(max_examples=50, deadline=None)
@given(total=st.integers(1, 10_000), frac=st.floats(0, 1))
def test_cosine_monotone_and_bounded(total, frac):
    step = int(frac * total)
    lr = cosine_lr(step, total)
    assert 1e-5 - 1e-15 <= lr <= 1e-3 + 1e-15
    if step < total:
        assert cosine_lr(step + 1, total) <= lr


# -- parameters and checkpoints ------------------------------------------------------


def test_blend_matches_arithmetic():
    t = _params(w=np.zeros((2, 2)))
    s = _params(w=np.ones((2, 2)))
    t.blend_(s, 0.99)
    np.testing.assert_allclose(t["w"].data, 0.01, rtol=0, atol=1e-15)


def test_blend_requires_alignment():
    with pytest.raises(ParamMismatch):
        _params(w=[1.0]).blend_(_params(v=[1.0]), 0.5)
    with pytest.raises(ParamMismatch):
        _params(w=[1.0]).blend_(_params(w=[1.0, 2.0]), 0.5)


def test_checkpoint_round_trip(tmp_path):
    r = np.random.default_rng(0)
    p = _params(a=r.standard_normal((3, 4)), b=r.standard_normal(5), c=np.array(2.5))
    save_checkpoint(tmp_path / "x.ckpt", p, {"note": "hi"})
    back, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert back.names() == p.names() and meta == {"note": "hi"}
    for k in p.names():
        np.testing.assert_array_equal(back[k].data, p[k].data)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
