import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uniconvnet import ops
from uniconvnet.tensor import (
    PartitionError,
    Rng,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat_channels,
    resolve_dtype,
    split_channels,
    tensor_new,
    tensor_random_normal,
)


def test_tensor_new_singleton():
    t = tensor_new((1, 1, 1, 1), [5.0])
    assert t.shape == (1, 1, 1, 1)
    assert t.data.item() == 5.0


def test_tensor_new_length_checks():
    assert tensor_new((1, 2, 2, 2), np.arange(8)).shape == (1, 2, 2, 2)
    with pytest.raises(ShapeError):
        tensor_new((1, 2, 2, 2), np.arange(7))


def test_tensor_new_rejects_bad_rank():
    with pytest.raises(ShapeError):
        tensor_new((2, 2), [1, 2, 3, 4])


def test_tensor_is_read_only_and_copies():
    src = np.ones(4)
    t = tensor_new((1, 1, 2, 2), src)
    src[0] = 7.0
    assert t.data[0, 0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0, 0, 0] = 3.0


def test_precision_names():
    assert resolve_dtype("f32") == np.float32
    assert resolve_dtype("f64") == np.float64
    with pytest.raises(ValueError):
        resolve_dtype("f16")


def test_random_normal_zero_std():
    t = tensor_random_normal((1, 3, 4, 4), 0.0, Rng(1))
    assert not t.data.any()


def test_random_normal_truncation_bound():
    t = tensor_random_normal((1, 64, 8, 8), 0.02, Rng(7))
    assert np.abs(t.data).max() <= 0.04


def test_random_normal_is_deterministic():
    a = tensor_random_normal((2, 3, 5, 5), 0.5, Rng(11))
    b = tensor_random_normal((2, 3, 5, 5), 0.5, Rng(11))
    assert a.data.tobytes() == b.data.tobytes()


def test_rng_rejects_out_of_range_seed():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(2**64)


def test_split_heads():
    x = tensor_new((1, 8, 4, 4), np.arange(128))
    parts = split_channels(x, [2, 2, 2, 2])
    assert [p.shape for p in parts] == [(1, 2, 4, 4)] * 4
    assert split_channels(x, [8])[0].data.tobytes() == x.data.tobytes()
    with pytest.raises(PartitionError):
        split_channels(x, [3, 3, 3])


def test_concat_shapes():
    a = tensor_new((1, 2, 4, 4), np.zeros(32))
    b = tensor_new((1, 6, 4, 4), np.ones(96))
    assert concat_channels([a, b]).shape == (1, 8, 4, 4)
    with pytest.raises(ShapeError):
        concat_channels([a, tensor_new((1, 2, 5, 4), np.zeros(40))])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=5), st.integers(0, 2**32))
def test_split_concat_round_trip(sizes, seed):
    x = Tensor(Rng(seed).normal((2, sum(sizes), 3, 2)))
    y = concat_channels(split_channels(x, sizes))
    assert y.data.tobytes() == x.data.tobytes()


def test_product_rule():
    tape = Tape()
    x = tape.leaf(np.arange(1.0, 5.0).reshape(1, 1, 2, 2))
    w = tape.leaf(np.arange(5.0, 9.0).reshape(1, 1, 2, 2))
    y = ops.elementwise_mul(x, w)
    g = backward(tape, y, np.ones(y.shape))
    np.testing.assert_array_equal(g[x.id], w.data)
    np.testing.assert_array_equal(g[w.id], x.data)


def test_identity_chain():
    tape = Tape()
    x = tape.leaf(np.zeros((1, 2, 3, 3)))
    g = backward(tape, x, np.ones(x.shape))
    np.testing.assert_array_equal(g[x.id], np.ones(x.shape))


def test_unreachable_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(np.ones((1, 1, 2, 2)))
    unused = tape.leaf(np.ones((1, 3, 2, 2)))
    y = ops.add(x, x)
    g = backward(tape, y, np.ones(y.shape))
    np.testing.assert_array_equal(g[x.id], 2 * np.ones(x.shape))
    assert not g[unused.id].any()


def test_seed_shape_must_match():
    tape = Tape()
    x = tape.leaf(np.ones((1, 1, 2, 2)))
    with pytest.raises(ShapeError):
        backward(tape, x, np.ones((1, 1, 3, 3)))


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32))
def test_backward_is_linear_in_seed(a, b, seed):
    rng = Rng(seed)
    tape = Tape()
    x = tape.leaf(rng.normal((1, 2, 3, 3)))
    y = ops.gelu(ops.elementwise_mul(x, x))
    s1, s2 = rng.normal(y.shape), rng.normal(y.shape)
    g1 = backward(tape, y, s1)[x.id]
    g2 = backward(tape, y, s2)[x.id]
    g = backward(tape, y, a * s1 + b * s2)[x.id]
    np.testing.assert_allclose(g, a * g1 + b * g2, rtol=1e-10, atol=1e-10)
