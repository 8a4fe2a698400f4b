import numpy as np
import pytest

from treeformer import numerics as nm
from treeformer.numerics import (
    CheckpointError,
    NonFiniteError,
    ParamStore,
    ShapeError,
    backward,
    broadcast_add_row,
    constant,
    grad_check,
    layer_norm,
    linear,
    load_checkpoint,
    matmul,
    save_checkpoint,
    softmax,
)


class TestSoftmax:
    def test_uniform(self):
        out = softmax(constant([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_shift_invariance(self):
        a = softmax(constant([1.0, 2.0])).data
        b = softmax(constant([101.0, 102.0])).data
        assert np.array_equal(a, b)  # max-subtraction makes the shift exact

    def test_frozen_values(self):
        # exp-normalize at 64-bit: exp([1,2,3]) / sum
        out = softmax(constant([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(
            out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-8
        )

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.standard_normal(int(rng.integers(1, 30))) * 10
            assert abs(softmax(constant(x)).data.sum() - 1.0) < 1e-12

    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            softmax(constant([0.0, np.nan]))


class TestLayerNorm:
    G = constant(np.ones(4))
    B = constant(np.zeros(4))

    def test_constant_vector(self):
        out = layer_norm(constant([[2.0, 2.0, 2.0, 2.0]]), self.G, self.B)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_normalized(self):
        g = constant(np.ones(2))
        b = constant(np.zeros(2))
        out = layer_norm(constant([[1.0, -1.0]]), g, b, eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-10)

    def test_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(8)
        gamma = rng.standard_normal(8)
        beta = rng.standard_normal(8)
        out = layer_norm(constant(x[None]), constant(gamma), constant(beta)).data[0]
        # independent two-pass mean/variance computation
        mean = sum(x) / 8
        var = sum((v - mean) ** 2 for v in x) / 8
        expected = [(v - mean) / np.sqrt(var + 1e-5) * g + b for v, g, b in zip(x, gamma, beta)]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_pre_affine_mean_small(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.standard_normal((3, 16)) * 5
            out = layer_norm(constant(x), constant(np.ones(16)), constant(np.zeros(16)))
            assert np.abs(out.data.mean(axis=-1)).max() < 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(constant(np.zeros((2, 4))), constant(np.ones(3)), constant(np.zeros(4)))


class TestMatmulFamily:
    def test_identity(self):
        x = np.arange(12.0).reshape(3, 4)
        out = matmul(constant(np.eye(3)), constant(x))
        assert np.array_equal(out.data, x)

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((3, 2))
        expected = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    expected[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(matmul(constant(a), constant(b)).data, expected, atol=1e-12)

    def test_broadcast_add_row(self):
        v = np.array([1.0, 2.0, 3.0])
        out = broadcast_add_row(constant(np.zeros((3, 3))), constant(v))
        assert np.array_equal(out.data, np.stack([v] * 3))

    def test_broadcast_add_row_width_mismatch(self):
        with pytest.raises(ShapeError):
            broadcast_add_row(constant(np.zeros((3, 3))), constant(np.zeros(2)))

    def test_linear(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 4)), rng.standard_normal(4)
        out = linear(constant(x), constant(w), constant(b))
        np.testing.assert_allclose(out.data, x @ w + b, atol=1e-14)


class TestGradCheck:
    def test_quadratic(self):
        params = ParamStore("float64")
        params.add_param("w", np.array([3.0]))

        def f(p):
            w = p["w"]
            return nm.sum_all(nm.mul(w, w))

        assert grad_check(f, params, eps=1e-5) <= 1e-10

    def test_linear_function(self):
        params = ParamStore("float64")
        params.add_param("w", np.array([1.0, -2.0, 0.5]))
        c = constant([2.0, 1.0, -1.0])

        def f(p):
            return nm.sum_all(nm.mul(p["w"], c))

        assert grad_check(f, params, eps=1e-4) <= 1e-10

    def test_non_finite_probe_rejected(self):
        params = ParamStore("float64")
        params.add_param("w", np.array([1e200]))
        prev = nm.set_check_finite(False)
        try:
            with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
                grad_check(lambda p: nm.mul(nm.mul(p["w"], p["w"]), p["w"]), params)
        finally:
            nm.set_check_finite(prev)


PRIMITIVE_CASES = {}


def _case(name):
    def deco(fn):
        PRIMITIVE_CASES[name] = fn
        return fn

    return deco


rng0 = np.random.default_rng(42)
C34 = constant(rng0.standard_normal((3, 4)))
C235 = constant(rng0.standard_normal((2, 3, 5)))
C44 = constant(rng0.standard_normal((4, 4)))
C324 = constant(rng0.standard_normal((3, 2, 4)))
C39 = constant(rng0.standard_normal((3, 9)))
C35 = constant(rng0.standard_normal((3, 5)))
C14 = constant(rng0.standard_normal((1, 4)))


@_case("matmul")
def _(p):
    return nm.sum_all(nm.mul(matmul(p["x34"], p["w45"]), C35))


@_case("matmul_batched_shared_weight")
def _(p):
    return nm.sum_all(nm.mul(matmul(p["b234"], p["w45"]), C235))


@_case("softmax")
def _(p):
    return nm.sum_all(nm.mul(softmax(p["x34"]), C34))


@_case("log_softmax")
def _(p):
    return nm.sum_all(nm.mul(nm.log_softmax(p["x34"]), C34))


@_case("layer_norm")
def _(p):
    return nm.sum_all(nm.mul(layer_norm(p["x34"], p["g4"], p["b4"]), C34))


@_case("relu")
def _(p):
    return nm.sum_all(nm.mul(nm.relu(p["x34"]), C34))


@_case("gather_rows")
def _(p):
    return nm.sum_all(nm.mul(nm.gather_rows(p["x34"], np.array([0, 2, 2, 1])), C44))


@_case("scatter_rows")
def _(p):
    return nm.sum_all(nm.mul(nm.scatter_rows(p["x34"], np.array([1]), p["r14"]), C34))


@_case("select_columns")
def _(p):
    return nm.sum_all(nm.select_columns(p["x34"], np.array([1, 3, 0])))


@_case("transpose")
def _(p):
    return nm.sum_all(nm.mul(nm.transpose(p["b234"], (1, 0, 2)), C324))


@_case("concat")
def _(p):
    return nm.sum_all(nm.mul(nm.concat([p["x34"], p["y35"]], axis=1), C39))


@_case("add_broadcast")
def _(p):
    return nm.sum_all(nm.mul(nm.add(p["x34"], p["g4"]), C34))


@_case("mul_broadcast")
def _(p):
    return nm.sum_all(nm.mul(nm.mul(p["x34"], p["g4"]), C34))


@_case("reshape_neg_sub_scale")
def _(p):
    y = nm.reshape(p["x34"], (4, 3))
    return nm.sum_all(nm.scale(nm.sub(nm.neg(y), nm.reshape(C34, (4, 3))), 0.7))


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    """Analytic gradients of every primitive match central differences."""
    rng = np.random.default_rng(abs(hash(name)) % 2**31)
    params = ParamStore("float64")
    params.add_param("x34", rng.standard_normal((3, 4)))
    params.add_param("w45", rng.standard_normal((4, 5)))
    params.add_param("b234", rng.standard_normal((2, 3, 4)))
    params.add_param("g4", rng.standard_normal(4))
    params.add_param("b4", rng.standard_normal(4))
    params.add_param("r14", rng.standard_normal((1, 4)))
    params.add_param("y35", rng.standard_normal((3, 5)))
    assert grad_check(PRIMITIVE_CASES[name], params, eps=1e-6) < 1e-6


class TestDeterminism:
    def test_bit_identical_reruns(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((5, 5))
        g = rng.standard_normal(5)
        b = rng.standard_normal(5)

        def run():
            t = layer_norm(constant(x), constant(g), constant(b))
            t = softmax(matmul(t, constant(x)))
            return t.data.tobytes()

        assert run() == run()


class TestBackward:
    def test_accumulates_over_reuse(self):
        params = ParamStore("float64")
        w = params.add_param("w", np.array([2.0]))
        out = nm.add(nm.mul(w, w), nm.scale(w, 3.0))  # w^2 + 3w -> grad 2w+3 = 7
        backward(out)
        np.testing.assert_allclose(w.grad, [7.0])

    def test_seed_grad_required_for_nonscalar(self):
        with pytest.raises(ShapeError):
            backward(nm.add(constant([1.0, 2.0]), constant([0.0, 0.0])))

    def test_intermediate_grads_available(self):
        params = ParamStore("float64")
        w = params.add_param("w", np.array([[1.0, 2.0]]))
        mid = nm.mul(w, constant([[2.0, 2.0]]))
        backward(nm.sum_all(mid))
        assert mid.grad is not None and w.grad is not None


class TestParamStore:
    def test_duplicate_name(self):
        store = ParamStore()
        store.add_param("a", np.zeros(2))
        with pytest.raises(ValueError):
            store.add_buffer("a", np.zeros(2))

    def test_sorted_iteration(self):
        store = ParamStore()
        for name in ("b", "a", "c"):
            store.add_param(name, np.zeros(1))
        assert store.names() == ["a", "b", "c"]

    def test_dtype(self):
        store = ParamStore("float32")
        t = store.add_param("w", np.zeros(3))
        assert t.data.dtype == np.float32


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", ["float64", "float32"])
    def test_round_trip_bit_exact(self, tmp_path, dtype):
        rng = np.random.default_rng(17)
        store = ParamStore(dtype)
        store.add_param("w.a", rng.standard_normal((3, 4)))
        store.add_param("w.b", rng.standard_normal(7))
        store.add_buffer("pos", rng.standard_normal((4, 2)))
        path = tmp_path / "ckpt.json"
        save_checkpoint(store, path, extra={"note": 1})
        loaded, extra = load_checkpoint(path)
        assert extra == {"note": 1}
        assert loaded.dtype == dtype
        for name in ("w.a", "w.b", "pos"):
            assert loaded[name].data.tobytes() == store[name].data.tobytes()
        assert loaded.buffer_names() == ["pos"]

    def test_version_mismatch(self, tmp_path):
        store = ParamStore()
        store.add_param("w", np.zeros(2))
        path = tmp_path / "ckpt.json"
        save_checkpoint(store, path)
        import json

        manifest = json.loads(path.read_text())
        manifest["format_version"] = 99
        path.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestFiniteGuard:
    def test_overflow_raises(self):
        big = constant(np.array([1e308]))
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            nm.mul(big, big)

    def test_toggle(self):
        prev = nm.set_check_finite(False)
        try:
            with np.errstate(over="ignore"):
                out = nm.mul(constant(np.array([1e308])), constant(np.array([1e308])))
            assert np.isinf(out.data).any()
        finally:
            nm.set_check_finite(prev)
