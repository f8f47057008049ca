import math

import numpy as np

import tensor_engine as te
from constants import Activation
from errors import DTypeMismatchError, ShapeMismatchError, TapeError


def f64(x):
    return np.asarray(x, dtype=np.float64)


def test_matmul_values():
    out = te.matmul(te.Tensor(f64([[1, 2], [3, 4]])), te.Tensor(f64([[1, 0], [0, 1]])))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])

    out = te.forward_primitive("matmul", te.Tensor(f64([[1, 2, 3]])), te.Tensor(f64([[4], [5], [6]])))
    assert np.array_equal(out.data, [[32]])


def test_add_identity():
    out = te.add(te.Tensor(f64([1, 2, 3])), te.Tensor(f64([0, 0, 0])))
    assert np.array_equal(out.data, [1, 2, 3])


def test_shape_mismatch_names_both_shapes():
    try:
        te.matmul(te.Tensor(np.ones((2, 3))), te.Tensor(np.ones((2, 3))))
        assert False, "expected ShapeMismatchError"
    except ShapeMismatchError as e:
        assert "[2, 3]" in str(e)

    try:
        te.add(te.Tensor(np.ones(3)), te.Tensor(np.ones(4)))
        assert False, "expected ShapeMismatchError"
    except ShapeMismatchError as e:
        assert "[3]" in str(e) and "[4]" in str(e)


def test_dtype_mismatch():
    try:
        te.add(te.Tensor(np.ones(3, dtype=np.float32)), te.Tensor(np.ones(3)))
        assert False, "expected DTypeMismatchError"
    except DTypeMismatchError:
        pass

    try:
        te.Tensor(np.ones(3, dtype=np.int32))
        assert False, "expected DTypeMismatchError"
    except DTypeMismatchError:
        pass


def test_unknown_primitive():
    try:
        te.forward_primitive("conv2d", te.Tensor(np.ones((2, 2))))
        assert False, "expected TapeError"
    except TapeError:
        pass


def test_no_recording_outside_tape():
    assert te.current_tape() is None
    with te.Tape() as tape:
        assert te.current_tape() is tape
        te.add(te.Tensor(np.ones(2)), te.Tensor(np.ones(2)))
        assert len(tape.nodes) == 1
    assert te.current_tape() is None
    te.add(te.Tensor(np.ones(2)), te.Tensor(np.ones(2)))
    assert len(tape.nodes) == 1


def test_backward_of_sum():
    with te.Tape() as tape:
        x = tape.watch(f64([1, 2, 3]))
        loss = te.sum_all(x)
    grads = te.backward(tape, loss.tid)
    assert np.array_equal(grads[x.tid], [1, 1, 1])
    assert tape.gradients is grads


def test_zero_scaled_loss_gives_zero_gradients():
    rng = np.random.default_rng(0)
    with te.Tape() as tape:
        w = tape.watch(rng.normal(size=(3, 4)))
        x = te.Tensor(rng.normal(size=(5, 3)))
        f = te.sum_all(te.activation(te.matmul(x, w), Activation.SILU))
        loss = te.scale(f, 0.0)
    grads = te.backward(tape, loss.tid)
    assert not np.any(grads[w.tid])


def test_leaf_without_path_gets_zeros():
    with te.Tape() as tape:
        used = tape.watch(f64([1, 2]))
        unused = tape.watch(np.ones((2, 3)))
        loss = te.sum_all(used)
    grads = te.backward(tape, loss.tid)
    assert grads[unused.tid].shape == (2, 3)
    assert not np.any(grads[unused.tid])


def test_backward_errors():
    with te.Tape() as tape:
        x = tape.watch(f64([1, 2, 3]))
        y = te.scale(x, 2.0)
    try:
        te.backward(tape, y.tid)
        assert False, "expected TapeError for non-scalar loss"
    except TapeError:
        pass
    try:
        te.backward(tape, 10**9)
        assert False, "expected TapeError for dangling id"
    except TapeError:
        pass


def test_cross_entropy_values():
    uniform = te.softmax_cross_entropy(te.Tensor(np.zeros((1, 3))), [0])
    assert abs(uniform.item() - math.log(3)) < 1e-15

    direct = te.softmax_cross_entropy(te.Tensor(f64([[1, 2, 3]])), [2])
    assert abs(direct.item() - 0.40761) < 1e-5

    margin = te.softmax_cross_entropy(te.Tensor(f64([[20, 0, 0]])), [0])
    assert margin.item() < 1e-8


def test_primitive_gradients_match_finite_differences():
    labels = np.array([0, 2, 1, 2])
    segments = np.array([0, 0, 1, 2, 2, 3])
    rows = np.array([2, 0, 1, 1, 3, 2])
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
        bias = rng.normal(size=3)
        table = rng.normal(size=(4, 3))
        x6 = rng.normal(size=(6, 3))
        logits = rng.normal(size=(4, 3))
        cases = [
            (lambda t: te.sum_all(te.matmul(t[0], t[1])), [a, b]),
            (lambda t: te.sum_all(te.transpose(t[0])), [a]),
            (lambda t: te.sum_all(te.activation(te.add_bias(t[0], t[1]), "silu")), [a, bias]),
            (lambda t: te.sum_all(te.activation(t[0], "gelu")), [a]),
            (lambda t: te.sum_all(te.activation(t[0], "relu")), [a]),
            (lambda t: te.sum_all(te.activation(te.gather_rows(t[0], rows), "silu")), [table]),
            (lambda t: te.sum_all(te.activation(te.segment_mean(t[0], segments, 4), "gelu")), [x6]),
            (lambda t: te.sum_all(te.activation(te.mean(t[0], 0), "silu")), [a]),
            (lambda t: te.softmax_cross_entropy(t[0], labels), [logits]),
        ]
        for fn, arrays in cases:
            assert te.gradient_check(fn, arrays) < 1e-4


def two_layer_loss(labels):
    def fn(t):
        x, w1, w2 = t
        h = te.activation(te.matmul(x, te.transpose(w1)), Activation.SILU)
        out = te.matmul(h, te.transpose(w2))
        return te.softmax_cross_entropy(out, labels)

    return fn


def test_two_layer_network_gradient():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 4))
        w1 = rng.normal(size=(8, 4))
        w2 = rng.normal(size=(3, 8))
        labels = rng.integers(0, 3, size=6)
        assert te.gradient_check(two_layer_loss(labels), [x, w1, w2]) < 1e-4


def test_backward_is_deterministic():
    rng = np.random.default_rng(7)
    arrays = [rng.normal(size=(6, 4)), rng.normal(size=(8, 4)), rng.normal(size=(3, 8))]
    labels = rng.integers(0, 3, size=6)
    runs = []
    for _ in range(2):
        with te.Tape() as tape:
            leaves = [tape.watch(a) for a in arrays]
            loss = two_layer_loss(labels)(leaves)
        grads = te.backward(tape, loss.tid)
        runs.append([grads[leaf.tid] for leaf in leaves])
    for g1, g2 in zip(*runs):
        assert g1.tobytes() == g2.tobytes()


if __name__ == "__main__":
    tests = [v for k, v in list(globals().items()) if k.startswith("test_")]
    for test in tests:
        test()
        print(f"✓ {test.__name__}")
