import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import stden.diffengine as de
from stden.diffengine import NonFiniteError, ParamStore, Tape, Tensor


def make_store(**arrays):
    store = ParamStore()
    for name, value in arrays.items():
        store.add(name, value)
    return store


class TestForwardValues:
    def test_hadamard_by_hand(self):
        out = de.hadamard(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert out.data.tolist() == [3.0, 8.0]

    def test_tanh_zero(self):
        assert de.tanh(Tensor([0.0])).data.tolist() == [0.0]

    def test_matvec_identity(self):
        out = de.matvec(Tensor(np.eye(2)), Tensor([5.0, 7.0]))
        assert out.data.tolist() == [5.0, 7.0]

    def test_matmul(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0], [6.0]])
        assert de.matmul(a, b).data.tolist() == [[17.0], [39.0]]

    def test_scalar_broadcast(self):
        out = de.add(Tensor([1.0, 2.0]), Tensor([10.0]))
        assert out.data.tolist() == [11.0, 12.0]

    def test_vector_vector_mismatch_rejected(self):
        with pytest.raises(ValueError, match="conform"):
            de.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_softplus_is_stable_at_large_inputs(self):
        out = de.softplus(Tensor([800.0, -800.0]))
        assert out.data[0] == pytest.approx(800.0)
        assert out.data[1] == pytest.approx(0.0)

    def test_sigmoid_is_stable_at_large_inputs(self):
        out = de.sigmoid(Tensor([800.0, -800.0]))
        assert out.data.tolist() == [1.0, 0.0]

    def test_log_of_nonpositive_raises(self):
        with pytest.raises(NonFiniteError):
            de.log(Tensor([-1.0]))

    def test_concat_and_slice(self):
        a = Tensor([[1.0], [2.0]])
        b = Tensor([[3.0], [4.0]])
        cat = de.concat([a, b], axis=0)
        assert cat.data[:, 0].tolist() == [1.0, 2.0, 3.0, 4.0]
        part = de.slice(cat, (slice(1, 3), 0))
        assert part.data.tolist() == [2.0, 3.0]

    def test_reshape_row_major(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert de.reshape(x, (4,)).data.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_transpose(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert de.transpose(x).data.tolist() == [[1.0, 3.0], [2.0, 4.0]]


class TestBackward:
    def test_sum_gives_ones(self):
        store = make_store(x=np.array([[1.0, 2.0], [3.0, 4.0]]))
        tape = Tape()
        loss = de.sum(store.leaf("x", tape))
        tape.backward(loss)
        assert np.array_equal(store.grads["x"], np.ones((2, 2)))

    def test_half_norm_squared(self):
        store = make_store(x=np.array([3.0, -1.0]))
        tape = Tape()
        x = store.leaf("x", tape)
        loss = de.scale(de.sum(de.hadamard(x, x)), 0.5)
        tape.backward(loss)
        assert store.grads["x"].tolist() == [3.0, -1.0]

    def test_tanh_times_constant(self):
        store = make_store(w=np.array([0.0]))
        tape = Tape()
        loss = de.sum(de.scale(de.tanh(store.leaf("w", tape)), 2.0))
        tape.backward(loss)
        assert store.grads["w"].tolist() == [2.0]

    def test_backward_twice_rejected(self):
        store = make_store(x=np.array([1.0]))
        tape = Tape()
        loss = de.sum(store.leaf("x", tape))
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="already"):
            tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        store = make_store(x=np.array([1.0, 2.0]))
        tape = Tape()
        x = store.leaf("x", tape)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(x)

    def test_mixed_tapes_rejected(self):
        store = make_store(x=np.array([1.0]), y=np.array([1.0]))
        a = store.leaf("x", Tape())
        b = store.leaf("y", Tape())
        with pytest.raises(ValueError, match="tapes"):
            de.add(a, b)

    def test_fanout_accumulates(self):
        # x used twice: loss = sum(x*x + x) so dloss/dx = 2x + 1
        store = make_store(x=np.array([2.0, -3.0]))
        tape = Tape()
        x = store.leaf("x", tape)
        loss = de.sum(de.add(de.hadamard(x, x), x))
        tape.backward(loss)
        assert store.grads["x"].tolist() == [5.0, -5.0]

    def test_gradients_are_deterministic(self):
        store = make_store(w=np.arange(6, dtype=float).reshape(2, 3))

        def run():
            store.zero_grads()
            tape = Tape()
            w = store.leaf("w", tape)
            loss = de.mean(de.tanh(de.matmul(w, de.transpose(w))))
            tape.backward(loss)
            return store.grads["w"].copy()

        first, second = run(), run()
        assert np.array_equal(first, second)


def quadratic(store, tape):
    x = store.leaf("x", tape)
    return de.scale(de.sum(de.hadamard(x, x)), 0.5)


class TestGradCheck:
    def test_quadratic(self):
        store = make_store(x=np.array([0.3, -1.2, 4.0]))
        assert de.grad_check(quadratic, store) < 1e-7

    def test_constant_function(self):
        store = make_store(x=np.array([1.0, 2.0]))

        def fn(store, tape):
            store.leaf("x", tape)
            return de.sum(Tensor([0.0]))

        assert de.grad_check(fn, store) == 0.0

    @pytest.mark.parametrize(
        "name,fn",
        [
            ("add", lambda x, c: de.add(x, c)),
            ("subtract", lambda x, c: de.subtract(c, x)),
            ("hadamard", lambda x, c: de.hadamard(x, c)),
            ("scale", lambda x, c: de.scale(x, 1.7)),
            ("tanh", lambda x, c: de.tanh(x)),
            ("sigmoid", lambda x, c: de.sigmoid(x)),
            ("softplus", lambda x, c: de.softplus(x)),
            ("exp", lambda x, c: de.exp(x)),
            ("scalar_broadcast", lambda x, c: de.add(de.slice(x, 0), c)),
        ],
    )
    def test_elementwise_primitives(self, name, fn):
        rng = np.random.default_rng(hash(name) % 2**32)
        store = make_store(x=rng.normal(size=4))
        c = Tensor(rng.normal(size=4))

        def loss(store, tape):
            return de.sum(de.hadamard(fn(store.leaf("x", tape), c), Tensor(rng.standard_normal(4) * 0 + [1.0, -2.0, 0.5, 3.0])))

        assert de.grad_check(loss, store) < 1e-6

    def test_log_primitive(self):
        store = make_store(x=np.array([0.5, 1.5, 3.0]))

        def loss(store, tape):
            return de.sum(de.log(store.leaf("x", tape)))

        assert de.grad_check(loss, store) < 1e-6

    def test_matmul_matvec_transpose(self):
        rng = np.random.default_rng(7)
        store = make_store(a=rng.normal(size=(3, 2)), v=rng.normal(size=3))

        def loss(store, tape):
            a = store.leaf("a", tape)
            v = store.leaf("v", tape)
            m = de.matmul(a, de.transpose(a))
            return de.add(de.mean(de.matvec(m, v)), de.sum(m))

        assert de.grad_check(loss, store) < 1e-6

    def test_concat_slice_reshape_mean(self):
        rng = np.random.default_rng(9)
        store = make_store(p=rng.normal(size=(2, 2)), q=rng.normal(size=(1, 2)))

        def loss(store, tape):
            p = store.leaf("p", tape)
            q = store.leaf("q", tape)
            stacked = de.concat([p, q], axis=0)
            flat = de.reshape(stacked, (6,))
            head = de.slice(flat, slice(0, 3))
            return de.add(de.mean(head), de.sum(de.slice(stacked, (2, slice(None)))))

        assert de.grad_check(loss, store) < 1e-6


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_linearity_of_backward(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=3)
    c = rng.normal(size=3)

    def f_part(x):
        return de.sum(de.tanh(de.hadamard(x, Tensor(c))))

    def g_part(x):
        return de.mean(de.hadamard(x, x))

    def run(fn):
        store = make_store(x=x0.copy())
        tape = Tape()
        loss = fn(store.leaf("x", tape))
        tape.backward(loss)
        return store.grads["x"]

    g_f = run(f_part)
    g_g = run(g_part)
    combined = run(lambda x: de.add(de.scale(f_part(x), alpha), de.scale(g_part(x), beta)))
    want = alpha * g_f + beta * g_g
    assert np.allclose(combined, want, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_fanout_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    store = make_store(w=rng.normal(size=(2, 2)))

    def loss(store, tape):
        w = store.leaf("w", tape)
        reused = de.add(de.matmul(w, w), de.hadamard(w, w))
        return de.sum(de.tanh(reused))

    assert de.grad_check(loss, store) < 1e-6


class TestParamStore:
    def test_duplicate_name_rejected(self):
        store = make_store(x=np.array([1.0]))
        with pytest.raises(ValueError, match="duplicate"):
            store.add("x", np.array([2.0]))

    def test_zero_grads(self):
        store = make_store(x=np.array([1.0, 2.0]))
        tape = Tape()
        tape.backward(de.sum(store.leaf("x", tape)))
        store.zero_grads()
        assert np.array_equal(store.grads["x"], np.zeros(2))

    def test_same_leaf_twice_sums_contributions(self):
        store = make_store(x=np.array([2.0]))
        tape = Tape()
        a = store.leaf("x", tape)
        b = store.leaf("x", tape)
        tape.backward(de.sum(de.hadamard(a, b)))
        assert store.grads["x"].tolist() == [4.0]


def test_non_finite_forward_raises():
    big = Tensor([1e308])
    with pytest.raises(NonFiniteError):
        de.exp(big)
