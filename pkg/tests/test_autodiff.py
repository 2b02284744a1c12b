import numpy as np
import pytest

from gazelatent import autodiff as ad
from gazelatent.autodiff import (
    ParamSet,
    Tape,
    Tensor,
    backward,
    finite_difference_check,
    load_params,
    save_params,
)


def _scalarize(t):
    # reduce any output to a scalar so backward applies
    return ad.reduce_sum(t) if t.data.shape != () else t


class TestForwardValues:
    def test_sigmoid_symmetry_point(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_log_softmax_uniform(self):
        out = ad.log_softmax(Tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, -np.log(4.0), atol=1e-15)

    def test_matmul_hand(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_log_softmax_exponentiates_to_distribution(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-2, 2, size=(5, 7))
        out = ad.log_softmax(Tensor(x), axis=-1)
        lse = np.log(np.exp(out.data).sum(axis=-1))
        np.testing.assert_allclose(lse, 0.0, atol=1e-12)

    def test_shape_errors_name_primitive(self):
        with pytest.raises(ad.ShapeMismatchError, match="matmul"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ad.ShapeMismatchError, match="bias-add"):
            ad.bias_add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
        with pytest.raises(ad.ShapeMismatchError, match="elementwise-mul"):
            ad.mul(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_log_domain_error(self):
        with pytest.raises(ad.DomainError):
            ad.log(Tensor([1.0, 0.0]))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        p = ParamSet({"recog/p": np.array([1.0, 2.0, 3.0])})
        with Tape() as tape:
            w = tape.watch(p)
            out = ad.reduce_sum(w["recog/p"])
        grads = backward(tape, out)
        np.testing.assert_array_equal(grads["recog/p"], [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        p = ParamSet({"recog/p": np.array([1.0, 2.0, 3.0])})
        with Tape() as tape:
            w = tape.watch(p)
            out = ad.reduce_sum(ad.mul(w["recog/p"], w["recog/p"]))
        grads = backward(tape, out)
        np.testing.assert_array_equal(grads["recog/p"], [2.0, 4.0, 6.0])

    def test_cross_entropy_gradient_matches_softmax_minus_onehot(self):
        rng = np.random.default_rng(42)
        logits = rng.uniform(-2, 2, size=5)
        onehot = np.zeros(5)
        onehot[2] = 1.0
        p = ParamSet({"recog/logits": logits.copy()})

        def loss(w):
            return ad.neg(ad.gather_onehot(ad.log_softmax(w["recog/logits"]), onehot))

        with Tape() as tape:
            out = loss(tape.watch(p))
        grads = backward(tape, out)
        soft = np.exp(logits - logits.max())
        soft /= soft.sum()
        np.testing.assert_allclose(grads["recog/logits"], soft - onehot, atol=1e-12)
        assert finite_difference_check(loss, p, step=1e-5) <= 1e-9

    def test_unused_parameter_gets_zero_gradient(self):
        p = ParamSet({"recog/a": np.ones(3), "gaze/b": np.ones((2, 2))})
        with Tape() as tape:
            w = tape.watch(p)
            out = ad.reduce_sum(w["recog/a"])
        grads = backward(tape, out)
        np.testing.assert_array_equal(grads["gaze/b"], np.zeros((2, 2)))

    def test_non_scalar_output_rejected(self):
        p = ParamSet({"recog/a": np.ones(3)})
        with Tape() as tape:
            w = tape.watch(p)
            out = ad.scalar_mul(w["recog/a"], 2.0)
        with pytest.raises(ad.TapeUsageError):
            backward(tape, out)

    def test_backward_is_bit_deterministic(self):
        rng = np.random.default_rng(7)
        p = ParamSet({"recog/w": rng.normal(size=(4, 3)), "recog/b": rng.normal(size=3)})
        x = rng.normal(size=(5, 4))

        def run():
            with Tape() as tape:
                w = tape.watch(p)
                h = ad.relu(ad.affine(Tensor(x), w["recog/w"], w["recog/b"]))
                out = ad.reduce_mean(ad.mul(h, h))
            return backward(tape, out)

        g1, g2 = run(), run()
        for name in g1:
            assert np.array_equal(g1[name], g2[name])


def _fd_input_for(kind, rng):
    """Random in-domain inputs for each primitive, as (watched-shape, builder)."""
    if kind == "matmul":
        b = rng.uniform(-2, 2, size=(4, 3))
        return (3, 4), lambda w: ad.matmul(w, Tensor(b))
    if kind == "bias-add":
        x = rng.uniform(-2, 2, size=(5, 4))
        return (4,), lambda w: ad.bias_add(Tensor(x), w)
    if kind == "add":
        b = rng.uniform(-2, 2, size=(3, 4))
        return (3, 4), lambda w: ad.add(w, Tensor(b))
    if kind == "elementwise-mul":
        b = rng.uniform(-2, 2, size=(3, 4))
        return (3, 4), lambda w: ad.mul(w, Tensor(b))
    if kind == "scalar-mul":
        return (3, 4), lambda w: ad.scalar_mul(w, -1.7)
    if kind == "relu":
        # keep inputs away from the kink so central differences are valid
        return ("relu", (3, 4)), lambda w: ad.relu(w)
    if kind == "sigmoid":
        return (3, 4), lambda w: ad.sigmoid(w)
    if kind == "exp":
        return (3, 4), lambda w: ad.exp(w)
    if kind == "log":
        return ("pos", (3, 4)), lambda w: ad.log(w)
    if kind == "reduce-sum":
        return (3, 4), lambda w: ad.reduce_sum(w, axis=1)
    if kind == "reduce-mean":
        return (3, 4), lambda w: ad.reduce_mean(w, axis=0)
    if kind == "log-softmax-grouped":
        return (3, 4), lambda w: ad.log_softmax(w, axis=-1)
    if kind == "gather-by-onehot":
        onehot = np.zeros((3, 4))
        onehot[np.arange(3), [1, 0, 3]] = 1.0
        return (3, 4), lambda w: ad.gather_onehot(w, onehot)
    if kind == "broadcast":
        return (3, 1), lambda w: ad.broadcast_to(w, (2, 3, 4))
    if kind == "reshape":
        return (3, 4), lambda w: ad.reshape(w, (2, 6))
    raise AssertionError(kind)


@pytest.mark.parametrize("kind", ad.primitive_kinds())
def test_every_primitive_matches_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    spec, build = _fd_input_for(kind, rng)
    if isinstance(spec, tuple) and spec and spec[0] == "pos":
        arr = rng.uniform(0.5, 2.5, size=spec[1])
    elif isinstance(spec, tuple) and spec and spec[0] == "relu":
        arr = rng.uniform(0.05, 2.0, size=spec[1]) * rng.choice([-1.0, 1.0], size=spec[1])
    else:
        arr = rng.uniform(-2, 2, size=spec)
    params = ParamSet({"recog/x": arr})

    def fn(w):
        return _scalarize(build(w["recog/x"]))

    # weight the output entries so reductions over axes are non-trivial
    assert finite_difference_check(fn, params, step=1e-5) <= 1e-6


def test_apply_primitive_dispatch():
    out = ad.apply_primitive("sigmoid", Tensor([0.0]))
    assert out.data[0] == 0.5
    with pytest.raises(ValueError):
        ad.apply_primitive("convolution", Tensor([0.0]))


class TestFiniteDifferenceCheck:
    def test_linear_function_is_exact(self):
        p = ParamSet({"recog/p": np.random.default_rng(1).normal(size=6)})
        err = finite_difference_check(lambda w: ad.reduce_sum(w["recog/p"]), p)
        assert err <= 1e-9

    def test_constant_function_error_zero(self):
        p = ParamSet({"recog/p": np.ones(3)})
        err = finite_difference_check(lambda w: ad.reduce_sum(Tensor(np.ones(2))), p)
        assert err == 0.0

    def test_nonfinite_rejected(self):
        p = ParamSet({"recog/p": np.array([0.5])})

        def fn(w):
            return ad.reduce_sum(ad.log(w["recog/p"]))

        with pytest.raises((ad.EvaluationError, ad.DomainError)):
            finite_difference_check(fn, p, step=1.0)


class TestParamSetAndCheckpoint:
    def test_group_prefix_enforced(self):
        with pytest.raises(ValueError):
            ParamSet({"other/p": np.ones(1)})

    def test_group_filtering(self):
        p = ParamSet({"recog/a": np.ones(1), "gaze/b": np.ones(2)})
        assert p.names("gaze") == ["gaze/b"]
        assert p.size("gaze") == 2

    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        p = ParamSet({
            "recog/w": rng.normal(size=(4, 7)) * 1e-7,
            "gaze/b": rng.normal(size=5) * 1e300,
        })
        path = tmp_path / "ckpt.json"
        save_params(p, path)
        q = load_params(path)
        for name, arr in p.items():
            assert np.array_equal(arr, q[name])
            assert arr.dtype == q[name].dtype

    def test_watch_twice_rejected(self):
        p = ParamSet({"recog/a": np.ones(1)})
        with Tape() as tape:
            tape.watch(p)
            with pytest.raises(ad.TapeUsageError):
                tape.watch(p)
