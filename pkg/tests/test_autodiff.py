import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from normfill.autodiff import (AdamState, CheckpointError, Conv2d, GraphError, NonFiniteError, Tensor, adam_step,
                               finite_diff_check, no_grad, parameter, precision)
from normfill.autodiff import checkpoint
from normfill.autodiff import functional as F
from normfill.autodiff.functional import ShapeError

from oracles import grad_cases


def conv_oracle(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((bsz, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad: pad + h, pad: pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[n, c, i * stride + p, j * stride + q] * w[o, c, p, q]
                    out[n, o, i, j] = acc
    return out


def test_conv2d_matches_loop_oracle_on_50_configs():
    rng = np.random.default_rng(7)
    with precision(np.float64):
        for _ in range(50):
            k = int(rng.choice([1, 3, 5]))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, k // 2 + 1))
            h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
            cin, cout, b = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
            x = rng.normal(size=(b, cin, h, w))
            wt = rng.normal(size=(cout, cin, k, k))
            bias = rng.normal(size=cout) if rng.random() < 0.5 else None
            got = F.conv2d(Tensor(x), Tensor(wt), None if bias is None else Tensor(bias), stride, pad).data
            np.testing.assert_allclose(got, conv_oracle(x, wt, bias, stride, pad), atol=1e-12)


def test_conv2d_shape_errors_are_descriptive():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    with pytest.raises(ShapeError, match="Cin=3"):
        F.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))))
    with pytest.raises(ShapeError, match="odd"):
        F.conv2d(x, Tensor(np.zeros((4, 3, 2, 2))))
    with pytest.raises(ShapeError, match="4-D"):
        F.conv2d(Tensor(np.zeros((3, 8, 8))), Tensor(np.zeros((4, 3, 3, 3))))


def test_upsample_conv_equals_conv_of_upsampled_input():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        for k in (3, 5):
            x = Tensor(rng.normal(size=(2, 3, 4, 6)))
            w = Tensor(rng.normal(size=(5, 3, k, k)))
            b = Tensor(rng.normal(size=5))
            fused = F.upsample_conv2d(x, w, b).data
            plain = F.conv2d(F.upsample_nearest2x(x), w, b, padding=k // 2).data
            np.testing.assert_allclose(fused, plain, atol=1e-12)


@pytest.mark.parametrize("name", sorted(grad_cases()))
def test_gradients_match_finite_differences(name):
    fn, arrays = grad_cases()[name]
    with precision(np.float64):
        err64 = finite_diff_check(fn, [Tensor(a) for a in arrays])
    err32 = finite_diff_check(fn, [Tensor(a) for a in arrays])
    assert err64 < 1e-6
    assert err32 < 1e-3


def test_softmax_pair_saturates_without_overflow():
    wa, wb = F.softmax_pair(Tensor([1000.0, 0.0, -1000.0]), Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(wa.data, [1.0, 0.5, 0.0])
    np.testing.assert_allclose(wa.data + wb.data, 1.0)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.lists(st.floats(-50, 50), min_size=1, max_size=20))
@settings(max_examples=50, deadline=None)
def test_softmax_pair_sums_to_one(a, b):
    n = min(len(a), len(b))
    wa, wb = F.softmax_pair(Tensor(a[:n]), Tensor(b[:n]))
    assert np.all(np.abs(wa.data + wb.data - 1) < 1e-6)
    assert np.all((wa.data >= 0) & (wa.data <= 1))


def test_adam_matches_hand_computed_steps():
    p = parameter(np.array([1.0, -2.0]))
    state = AdamState(lr=0.1)
    m = v = np.zeros(2)
    ref = np.array([1.0, -2.0])
    for t in range(1, 4):
        g = 2 * ref
        p.grad = g.astype(np.float32)
        adam_step({"p": p}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-6)


def test_adam_first_step_moves_by_lr():
    # bias correction makes the first update exactly lr * sign(g)
    p = parameter(np.array([0.5, 0.5]))
    p.grad = np.array([3.0, -0.01], dtype=np.float32)
    adam_step({"p": p}, AdamState(lr=0.01))
    np.testing.assert_allclose(p.data, [0.49, 0.51], atol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.weight": rng.normal(size=(2, 3, 3, 3)).astype(np.float32), "ü/bias": np.arange(4, dtype=np.float32),
              "scalar": np.array(2.5, dtype=np.float32)}
    path = checkpoint.save(tmp_path / "m.ckpt", arrays)
    back = checkpoint.load(path)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    assert path.read_bytes()[:4] == b"NFCK"


def test_checkpoint_rejects_corruption(tmp_path):
    blob = checkpoint.encode({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.decode(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.decode(blob + b"\0")
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "missing.ckpt")


def test_backward_twice_raises():
    x = parameter([1.0, 2.0])
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_stale_gradients_detected_unless_accumulating():
    x = parameter([1.0, 2.0])
    (x * x).sum().backward()
    with pytest.raises(GraphError, match="zero_grad"):
        (x * 3.0).sum().backward()
    (x * 3.0).sum().backward(accumulate=True)
    np.testing.assert_allclose(x.grad, [5.0, 7.0])


def test_non_scalar_backward_raises():
    with pytest.raises(GraphError, match="scalar"):
        (parameter([1.0, 2.0]) * 2.0).backward()


def test_non_finite_forward_names_the_op():
    with pytest.raises(NonFiniteError, match="log"):
        Tensor([-1.0]).log()


def test_shared_subexpression_accumulates():
    x = parameter([3.0])
    y = x * x
    (y + y * x).sum().backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [6.0 + 27.0])


def test_no_grad_builds_no_tape():
    x = parameter([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_conv_module_init_is_seeded():
    a = Conv2d(3, 4, 3, np.random.default_rng(5))
    b = Conv2d(3, 4, 3, np.random.default_rng(5))
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    assert a.count() == 4 * 3 * 9 + 4
