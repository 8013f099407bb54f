import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dslab import tensor as T
from dslab.errors import ConfigurationError, ContractError, DimensionError, FormatError, TargetIndexError
from dslab.tensor import ParamGroup, Tensor


def gradcheck(build, inputs, h=1e-6):
    """Return the worst relative error over all ``inputs`` of scalar ``build()``."""
    for x in inputs:
        x.grad = None
    loss = build()
    loss.backward()
    worst = 0.0
    for x in inputs:
        def f():
            with T.no_grad():
                return build().item()
        num = T.numerical_grad(f, x.data, h=h)
        worst = max(worst, T.max_relative_error(x.grad, num))
    return worst


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# -- matmul --------------------------------------------------------------------

def test_matmul_identity():
    b = np.arange(12.0).reshape(3, 4)
    out = T.matmul(Tensor(np.eye(3)), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_hand_arithmetic():
    out = T.matmul(T.tensor([[1, 2], [3, 4]]), T.tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 4, 5), rand(rng, 5, 3)
    w = rng.normal(size=(4, 3))
    assert gradcheck(lambda: (T.matmul(a, b) * w).sum(), [a, b]) < 1e-6


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    a, b = rand(rng, 2, 3, 4), rand(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    assert gradcheck(lambda: (a @ b * w).sum(), [a, b]) < 1e-6


# -- patch projection ---------------------------------------------------------------

def test_patch_project_zero_image():
    rng = np.random.default_rng(0)
    out = T.patch_project(Tensor(np.zeros((1, 4, 4))), Tensor(rng.normal(size=(3, 1, 2, 2))), Tensor(np.zeros(3)))
    assert out.shape == (4, 3)
    assert not out.data.any()


def test_patch_project_matches_brute_force_extraction():
    rng = np.random.default_rng(2)
    img = rng.normal(size=(1, 4, 4))
    w = rng.normal(size=(5, 1, 2, 2))
    b = rng.normal(size=5)
    out = T.patch_project(Tensor(img), Tensor(w), Tensor(b)).data
    assert out.shape == (4, 5)
    k = 0
    for py in range(2):
        for px in range(2):
            block = img[:, 2 * py:2 * py + 2, 2 * px:2 * px + 2]
            expected = np.array([sum(w[d, c, i, j] * block[c, i, j]
                                     for c in range(1) for i in range(2) for j in range(2)) + b[d]
                                 for d in range(5)])
            np.testing.assert_allclose(out[k], expected, rtol=0, atol=1e-12)
            k += 1


def test_patch_project_gradient():
    rng = np.random.default_rng(3)
    img, w, b = rand(rng, 1, 8, 8), rand(rng, 6, 1, 4, 4), rand(rng, 6)
    m = rng.normal(size=(4, 6))
    assert gradcheck(lambda: (T.patch_project(img, w, b) * m).sum(), [img, w, b]) < 1e-6


def test_patch_project_batched_matches_single():
    rng = np.random.default_rng(4)
    imgs = rng.normal(size=(3, 2, 8, 8))
    w, b = Tensor(rng.normal(size=(4, 2, 4, 4))), Tensor(rng.normal(size=4))
    batched = T.patch_project(Tensor(imgs), w, b).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], T.patch_project(Tensor(imgs[i]), w, b).data, atol=1e-12)


def test_patch_project_indivisible():
    with pytest.raises(ConfigurationError):
        T.patch_project(Tensor(np.zeros((1, 5, 4))), Tensor(np.zeros((2, 1, 2, 2))), Tensor(np.zeros(2)))


# -- cross-entropy / softmax ------------------------------------------------------------

def test_cross_entropy_single_logit_is_zero():
    assert T.softmax_cross_entropy(T.tensor([[3.7]]), [0]).item() == 0.0


def test_cross_entropy_uniform():
    loss = T.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [1, 3]).item()
    assert loss == pytest.approx(np.log(4), abs=1e-12)
    assert loss == pytest.approx(1.3863, abs=1e-4)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    logits = rand(rng, 3, 5)
    assert gradcheck(lambda: T.softmax_cross_entropy(logits, [0, 4, 2]), [logits]) < 1e-6


def test_weighted_cross_entropy_gradient():
    rng = np.random.default_rng(6)
    logits = rand(rng, 4, 3)
    w = [1.0, 0.0, 1.0, 1.0]
    assert gradcheck(lambda: T.softmax_cross_entropy(logits, [0, 1, 2, 0], w), [logits]) < 1e-6
    # zero-weight row contributes nothing
    full = T.softmax_cross_entropy(Tensor(logits.data[[0, 2, 3]]), [0, 2, 0]).item()
    assert T.softmax_cross_entropy(Tensor(logits.data), [0, 1, 2, 0], w).item() == pytest.approx(full, abs=1e-14)


def test_cross_entropy_stable_for_large_logits():
    assert np.isfinite(T.softmax_cross_entropy(T.tensor([[1e4, 0.0]]), [1]).item())


@pytest.mark.parametrize("bad", [-1, 5])
def test_cross_entropy_bad_target(bad):
    with pytest.raises(TargetIndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 5))), [bad])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(n, k, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(n, k))
    y = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


# -- other differentiable ops -----------------------------------------------------------

def test_layer_norm_gradient():
    rng = np.random.default_rng(7)
    x, g, b = rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)
    m = rng.normal(size=(3, 6))
    assert gradcheck(lambda: (T.layer_norm(x, g, b) * m).sum(), [x, g, b]) < 1e-6


def test_softmax_gradient():
    rng = np.random.default_rng(8)
    x = rand(rng, 2, 3, 4)
    m = rng.normal(size=(2, 3, 4))
    assert gradcheck(lambda: (T.softmax(x) * m).sum(), [x]) < 1e-6


def test_log_softmax_gradient():
    rng = np.random.default_rng(8)
    x = rand(rng, 3, 4)
    m = rng.normal(size=(3, 4))
    assert gradcheck(lambda: (T.log_softmax(x) * m).sum(), [x]) < 1e-6


def test_gelu_gradient():
    rng = np.random.default_rng(9)
    x = rand(rng, 10)
    assert gradcheck(lambda: (T.gelu(x) * np.arange(10.0)).sum(), [x]) < 1e-6


def test_embedding_gradient_with_repeats():
    rng = np.random.default_rng(10)
    table = rand(rng, 5, 3)
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    m = rng.normal(size=(2, 3, 3))
    assert gradcheck(lambda: (T.embedding(table, ids) * m).sum(), [table]) < 1e-6


def test_elementwise_and_shape_ops_gradient():
    rng = np.random.default_rng(11)
    a, b = rand(rng, 2, 3), rand(rng, 3)
    c = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)

    def build():
        x = (a * b - a / c + c ** 1.5).exp().tanh()
        y = T.concat([x, c.log()], axis=0).reshape(3, 4).transpose(1, 0)
        return (y[1:3] * 2.0).mean() + T.l2_normalize(a).sum()

    assert gradcheck(build, [a, b, c]) < 1e-6


# -- backward -----------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_backward_populates_intermediates_and_clears_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 3.0
    loss = y.sum()
    loss.backward()
    assert y.grad is not None and x.grad is not None
    assert loss._parents == () and y._parents == ()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad


# -- sgd ---------------------------------------------------------------------------------

def test_sgd_hand_arithmetic():
    th = Tensor(np.array(1.0), requires_grad=True)
    th.grad = np.array(2.0)
    T.sgd_step([ParamGroup("p", [th])], lr=0.1)
    assert th.item() == pytest.approx(0.8, abs=1e-15)
    assert th.grad is None


def test_sgd_frozen_group_is_byte_identical():
    rng = np.random.default_rng(0)
    ts = [Tensor(rng.normal(size=(3, 4)), requires_grad=True) for _ in range(3)]
    group = ParamGroup("frozen", ts, frozen=True)
    before = group.tobytes()
    for t in ts:
        t.grad = rng.normal(size=t.shape)
    T.sgd_step([group], lr=10.0)
    assert group.tobytes() == before
    assert all(t.grad is None for t in ts)


def test_sgd_zero_lr():
    rng = np.random.default_rng(0)
    t = Tensor(rng.normal(size=5), requires_grad=True)
    group = ParamGroup("g", [t])
    before = group.tobytes()
    for _ in range(2):
        t.grad = rng.normal(size=5)
        T.sgd_step([group], lr=0.0)
    assert group.tobytes() == before


def test_determinism_of_loss_and_update():
    def run():
        rng = np.random.default_rng(123)
        w = T.init_uniform(rng, (5, 3), fan_in=5)
        x = Tensor(rng.normal(size=(4, 5)))
        loss = T.softmax_cross_entropy(x @ w, [0, 1, 2, 0])
        loss.backward()
        T.sgd_step([ParamGroup("w", [w])], 0.5)
        return loss.data.tobytes(), w.data.tobytes()

    assert run() == run()


# -- checkpoint ------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    groups = [
        ParamGroup("vision.depth_conv", [Tensor(rng.normal(size=(4, 1, 2, 2))), Tensor(rng.normal(size=4))], True),
        ParamGroup("text.tau", [Tensor(np.array(0.07))], False),
        ParamGroup("empty", [], False),
    ]
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(path, groups)
    raw = path.read_bytes()
    assert raw[:4] == b"DSCK" and int.from_bytes(raw[4:8], "little") == 1
    back = T.load_checkpoint(path)
    assert [(g.name, g.frozen, len(g.tensors)) for g in back] == [(g.name, g.frozen, len(g.tensors)) for g in groups]
    for g0, g1 in zip(groups, back):
        for t0, t1 in zip(g0.tensors, g1.tensors):
            assert t0.shape == t1.shape
            assert t0.data.tobytes() == t1.data.tobytes()
    assert T.encode_checkpoint(back) == raw


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(path, [ParamGroup("a", [Tensor(np.ones((2, 2)))])])
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        T.load_checkpoint(path)
    path.write_bytes(b"XXXX\x01\x00\x00\x00")
    with pytest.raises(FormatError):
        T.load_checkpoint(path)
