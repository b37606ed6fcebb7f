"""Gradient and serialization checks for the tensor core.

Every differentiable primitive is checked against central finite differences
(h = 1e-4, relative tolerance 1e-3), and the composed forward pass against an
independently coded straight-line oracle built from plain loops.
"""

import numpy as np
import pytest

from chromafl import tensor as T

H_FD = 1e-4
REL_TOL = 1e-3


def rel_close(a, b, rel=REL_TOL, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    err = np.abs(a - b)
    bound = rel * np.maximum(np.abs(a), np.abs(b)) + floor
    return bool((err <= bound).all())


def finite_diff(f, x, h=H_FD):
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f(x)
        flat[i] = keep - h
        lo = f(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2 * h)
    return g


def nudged(rng, shape, margin=5e-2):
    """Uniform values kept away from 0 so ReLU/pool kinks don't bite FD."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    x = np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)
    return x


# ---------------------------------------------------------------- forward

def naive_conv2d(x, w, b):
    bsz, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((bsz, h, wd, co), dtype=np.float64)
    for n in range(bsz):
        for y in range(h):
            for xx in range(wd):
                for o in range(co):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(ci):
                                acc += xp[n, y + i, xx + j, c] * w[i, j, c, o]
                    out[n, y, xx, o] = acc + b[o]
    return out


def naive_maxpool2(x):
    bsz, h, wd, c = x.shape
    out = np.zeros((bsz, h // 2, wd // 2, c), dtype=x.dtype)
    for n in range(bsz):
        for y in range(h // 2):
            for xx in range(wd // 2):
                for ch in range(c):
                    out[n, y, xx, ch] = x[n, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2, ch].max()
    return out


def test_dense_identity_weights_pass_input_through():
    x = np.array([[1.0, 2.0, 3.0]])
    out = T.dense(None, T.Tensor(x), T.Tensor(np.eye(3)), T.Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_1x1_weight_two_no_bias_doubles_input():
    x = np.full((1, 4, 4, 1), 0.5)
    w = np.full((1, 1, 1, 1), 2.0)
    b = np.zeros(1)
    out = T.conv2d(None, T.Tensor(x), T.Tensor(w), T.Tensor(b))
    assert np.allclose(out.data, 1.0)
    assert out.shape == (1, 4, 4, 1)


def test_forward_matches_straightline_oracle():
    rng = np.random.default_rng(7)
    for _ in range(3):
        x = rng.normal(size=(2, 6, 6, 3))
        w1 = rng.normal(size=(3, 3, 3, 4)) * 0.5
        b1 = rng.normal(size=4) * 0.1
        w2 = rng.normal(size=(3, 3, 4, 5)) * 0.5
        b2 = rng.normal(size=5) * 0.1
        wd = rng.normal(size=(3 * 3 * 5, 7)) * 0.2
        bd = rng.normal(size=7) * 0.1

        h1 = T.relu(None, T.conv2d(None, T.Tensor(x), T.Tensor(w1), T.Tensor(b1)))
        h1 = T.maxpool2(None, h1)
        h2 = T.relu(None, T.conv2d(None, h1, T.Tensor(w2), T.Tensor(b2)))
        logits = T.dense(None, h2, T.Tensor(wd), T.Tensor(bd))

        o1 = np.maximum(naive_conv2d(x, w1, b1), 0)
        o1 = naive_maxpool2(o1)
        o2 = np.maximum(naive_conv2d(o1, w2, b2), 0)
        ologits = o2.reshape(2, -1) @ wd + bd

        assert np.abs(logits.data - ologits).max() < 1e-6


def test_forward_is_deterministic_bitwise():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 8, 8, 3)).astype(np.float32)
    w = rng.normal(size=(3, 3, 3, 4)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)

    def run():
        tape = T.Tape()
        out = T.maxpool2(tape, T.relu(tape, T.conv2d(tape, T.Tensor(x), T.Tensor(w), T.Tensor(b))))
        return out.data
    assert np.array_equal(run(), run())


# ---------------------------------------------------------------- gradients

def test_grad_linear_layer_is_exact():
    # y = w . x  =>  dy/dx = w
    x = T.Tensor(np.array([[2.0, -1.0, 0.5]]))
    w = T.Tensor(np.array([[3.0], [4.0], [5.0]]))
    b = T.Tensor(np.zeros(1))
    tape = T.Tape()
    y = T.dense(tape, x, w, b)
    g = T.grad_wrt(tape, y, x)
    assert np.array_equal(g, np.array([[3.0, 4.0, 5.0]]))


def test_grad_relu_dead_region_is_zero():
    x = T.Tensor(np.array([[-1.0, 2.0]]))
    tape = T.Tape()
    y = T.class_score(tape, T.relu(tape, x), 0)
    g = T.grad_wrt(tape, y, x)
    assert np.array_equal(g, np.array([[0.0, 0.0]]))


def _loss_of_conv(x, w, b, labels):
    out = T.conv2d(None, T.Tensor(x), T.Tensor(w), T.Tensor(b))
    pooled = T.global_avg_pool(None, out)
    return T.softmax_cross_entropy(None, pooled, labels).item()


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(2, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3)) * 0.5
    b = rng.normal(size=3) * 0.1
    labels = rng.integers(0, 3, size=2)

    tape = T.Tape()
    tx, tw, tb = T.Tensor(x), T.Tensor(w), T.Tensor(b)
    loss = T.softmax_cross_entropy(
        tape, T.global_avg_pool(tape, T.conv2d(tape, tx, tw, tb)), labels)
    gx, gw, gb = tape.gradients(loss, [tx, tw, tb])

    assert rel_close(gx, finite_diff(lambda v: _loss_of_conv(v, w, b, labels), x))
    assert rel_close(gw, finite_diff(lambda v: _loss_of_conv(x, v, b, labels), w))
    assert rel_close(gb, finite_diff(lambda v: _loss_of_conv(x, w, v, labels), b))


@pytest.mark.parametrize("seed", range(5))
def test_dense_and_softmax_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    x = rng.normal(size=(3, 6))
    w = rng.normal(size=(6, 4)) * 0.5
    b = rng.normal(size=4) * 0.1
    labels = rng.integers(0, 4, size=3)

    def f(xv, wv, bv):
        out = T.dense(None, T.Tensor(xv), T.Tensor(wv), T.Tensor(bv))
        return T.softmax_cross_entropy(None, out, labels).item()

    tape = T.Tape()
    tx, tw, tb = T.Tensor(x), T.Tensor(w), T.Tensor(b)
    loss = T.softmax_cross_entropy(tape, T.dense(tape, tx, tw, tb), labels)
    gx, gw, gb = tape.gradients(loss, [tx, tw, tb])

    assert rel_close(gx, finite_diff(lambda v: f(v, w, b), x))
    assert rel_close(gw, finite_diff(lambda v: f(x, v, b), w))
    assert rel_close(gb, finite_diff(lambda v: f(x, w, v), b))


@pytest.mark.parametrize("seed", range(5))
def test_relu_maxpool_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(300 + seed)
    x = nudged(rng, (2, 4, 4, 3))
    w = rng.normal(size=(3 * 2 * 2, 5)) * 0.3
    b = rng.normal(size=5) * 0.1
    labels = rng.integers(0, 5, size=2)

    def f(xv):
        h = T.maxpool2(None, T.relu(None, T.Tensor(xv)))
        out = T.dense(None, h, T.Tensor(w), T.Tensor(b))
        return T.softmax_cross_entropy(None, out, labels).item()

    tape = T.Tape()
    tx = T.Tensor(x)
    h = T.maxpool2(tape, T.relu(tape, tx))
    loss = T.softmax_cross_entropy(tape, T.dense(tape, h, T.Tensor(w), T.Tensor(b)), labels)
    gx = T.grad_wrt(tape, loss, tx)
    assert rel_close(gx, finite_diff(f, x))


@pytest.mark.parametrize("seed", range(5))
def test_global_avg_pool_and_class_score_gradients(seed):
    rng = np.random.default_rng(400 + seed)
    x = rng.normal(size=(2, 4, 4, 3))
    ids = rng.integers(0, 3, size=2)

    def f(xv):
        pooled = T.global_avg_pool(None, T.Tensor(xv))
        return T.class_score(None, pooled, ids).item()

    tape = T.Tape()
    tx = T.Tensor(x)
    score = T.class_score(tape, T.global_avg_pool(tape, tx), ids)
    gx = T.grad_wrt(tape, score, tx)
    assert rel_close(gx, finite_diff(f, x))


def test_full_chain_gradient_matches_finite_differences():
    rng = np.random.default_rng(500)
    x = nudged(rng, (2, 8, 8, 3))
    w1 = rng.normal(size=(3, 3, 3, 4)) * 0.4
    b1 = np.full(4, 0.05)
    wd = rng.normal(size=(4 * 4 * 4, 3)) * 0.3
    bd = np.zeros(3)
    labels = np.array([0, 2])

    def f(w1v):
        h = T.maxpool2(None, T.relu(None, T.conv2d(None, T.Tensor(x), T.Tensor(w1v), T.Tensor(b1))))
        out = T.dense(None, h, T.Tensor(wd), T.Tensor(bd))
        return T.softmax_cross_entropy(None, out, labels).item()

    tape = T.Tape()
    tw1 = T.Tensor(w1)
    h = T.maxpool2(tape, T.relu(tape, T.conv2d(tape, T.Tensor(x), tw1, T.Tensor(b1))))
    loss = T.softmax_cross_entropy(tape, T.dense(tape, h, T.Tensor(wd), T.Tensor(bd)), labels)
    gw1 = T.grad_wrt(tape, loss, tw1)
    assert rel_close(gw1, finite_diff(f, w1))


def test_every_parameter_receives_a_live_gradient():
    # All parameter blocks must be wired into the tape: perturbing any block
    # changes the loss, and its adjoint is not silently zero.
    rng = np.random.default_rng(600)
    x = np.abs(rng.normal(size=(4, 8, 8, 3))) + 0.1
    params = [
        rng.normal(size=(3, 3, 3, 4)) * 0.4, np.full(4, 0.1),
        rng.normal(size=(3, 3, 4, 4)) * 0.4, np.full(4, 0.1),
        rng.normal(size=(2 * 2 * 4, 5)) * 0.3, np.zeros(5),
    ]
    labels = rng.integers(0, 5, size=4)

    def run(ps, tape=None):
        t = [T.Tensor(p) for p in ps]
        h = T.maxpool2(tape, T.relu(tape, T.conv2d(tape, T.Tensor(x), t[0], t[1])))
        h = T.maxpool2(tape, T.relu(tape, T.conv2d(tape, h, t[2], t[3])))
        loss = T.softmax_cross_entropy(tape, T.dense(tape, h, t[4], t[5]), labels)
        return loss, t

    tape = T.Tape()
    loss, tensors = run(params, tape)
    grads = tape.gradients(loss, tensors)
    base = loss.item()
    for k, g in enumerate(grads):
        assert np.abs(g).max() > 0, f"parameter block {k} has an all-zero gradient"
        bumped = [p.copy() for p in params]
        bumped[k].flat[0] += 1e-3  # one entry; a uniform bump can cancel in softmax
        moved, _ = run(bumped)
        assert abs(moved.item() - base) > 1e-9, \
            f"loss is insensitive to parameter block {k}"


def test_grad_wrt_rejects_unrecorded_target():
    tape = T.Tape()
    x = T.Tensor(np.ones((1, 2)))
    y = T.class_score(tape, x, 0)
    stranger = T.Tensor(np.ones((1, 2)))
    with pytest.raises(ValueError, match="not recorded"):
        T.grad_wrt(tape, y, stranger)


def test_gradients_reject_nonscalar_output():
    tape = T.Tape()
    x = T.Tensor(np.ones((1, 4)))
    y = T.relu(tape, x)
    with pytest.raises(ValueError, match="scalar"):
        T.grad_wrt(tape, y, x)


def test_maxpool_tie_prefers_first_in_row_major_order():
    x = np.zeros((1, 2, 2, 1))
    x[0, :, :, 0] = [[1.0, 1.0], [1.0, 1.0]]
    tape = T.Tape()
    tx = T.Tensor(x)
    y = T.class_score(tape, T.dense(tape, T.maxpool2(tape, tx),
                                    T.Tensor(np.ones((1, 1))), T.Tensor(np.zeros(1))), 0)
    g = T.grad_wrt(tape, y, tx)
    assert g[0, 0, 0, 0] == 1.0
    assert g[0, 0, 1, 0] == g[0, 1, 0, 0] == g[0, 1, 1, 0] == 0.0


# ---------------------------------------------------------------- sgd

def test_sgd_step_arithmetic():
    w = [np.array([1.0, 2.0]), np.array([[3.0]])]
    g = [np.array([0.5, -0.5]), np.array([[1.0]])]
    out = T.sgd_step(w, g, lr=0.1)
    assert np.allclose(out[0], [0.95, 2.05])
    assert np.allclose(out[1], [[2.9]])
    assert np.array_equal(w[0], [1.0, 2.0])  # inputs untouched


def test_sgd_step_converges_on_quadratic():
    # loss = 0.5 * (p - 3)^2, grad = p - 3; p_k = 3 * (1 - 0.9^k) from p_0 = 0.
    p = np.array([0.0])
    for k in range(1, 11):
        p = T.sgd_step([p], [p - 3.0], lr=0.1)[0]
        assert np.allclose(p, 3.0 * (1.0 - 0.9 ** k))


def test_sgd_step_rejects_bad_lr_and_shapes():
    with pytest.raises(ValueError, match="positive"):
        T.sgd_step([np.ones(2)], [np.ones(2)], lr=0.0)
    with pytest.raises(ValueError, match="mismatch"):
        T.sgd_step([np.ones(2)], [np.ones(3)], lr=0.1)


# ---------------------------------------------------------------- weights io

def test_weights_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    ws = [rng.normal(size=s).astype(np.float32)
          for s in [(3, 3, 3, 16), (16,), (2048, 10)]]
    path = tmp_path / "w.bin"
    T.save_weights(path, ws)
    back = T.load_weights(path)
    assert len(back) == len(ws)
    for a, b in zip(ws, back):
        assert a.shape == b.shape
        assert np.array_equal(a.view(np.uint32), b.view(np.uint32))


def test_weights_loader_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        T.load_weights(path)


def test_weights_loader_rejects_truncated_payload(tmp_path):
    path = tmp_path / "trunc.bin"
    T.save_weights(path, [np.ones((4, 4), dtype=np.float32)])
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="truncated"):
        T.load_weights(path)


def test_weights_loader_rejects_wrong_version(tmp_path):
    import struct
    path = tmp_path / "ver.bin"
    path.write_bytes(T.WEIGHTS_MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(ValueError, match="version"):
        T.load_weights(path)


def test_tensor_rejects_zero_size():
    with pytest.raises(ValueError):
        T.Tensor(np.zeros((0, 3)))
