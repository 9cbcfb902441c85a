"""Reverse-mode engine checks: forward values against closed forms and
numpy, analytic gradients against central differences, and the graph
bookkeeping rules (accumulation, unreachable parameters, purity)."""

import numpy as np
import pytest

from metacontrast import autodiff as ad


def params_of(**arrays):
    return ad.ParamSet({name: np.asarray(value, dtype=np.float64)
                        for name, value in arrays.items()})


def check_against_numeric(f, params, tolerance=1e-6):
    analytic = ad.backward(f(params), params)
    numeric = ad.numeric_grad(f, params)
    for name in params.names():
        np.testing.assert_allclose(analytic[name], numeric[name],
                                   rtol=tolerance, atol=tolerance)


# ---------------------------------------------------------------------------
# forward values


def test_add_sub_mul_broadcast_values():
    a = ad.as_node(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = ad.as_node(np.array([10.0, 20.0]))
    np.testing.assert_array_equal(ad.add(a, b).values, [[11.0, 22.0], [13.0, 24.0]])
    np.testing.assert_array_equal(ad.sub(a, b).values, [[-9.0, -18.0], [-7.0, -16.0]])
    np.testing.assert_array_equal(ad.mul(a, b).values, [[10.0, 40.0], [30.0, 80.0]])


def test_matmul_matches_numpy():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 4))
    v = rng.normal(size=4)
    w = rng.normal(size=(4, 2))
    np.testing.assert_allclose(ad.matmul(ad.as_node(m), ad.as_node(w)).values, m @ w)
    np.testing.assert_allclose(ad.matmul(ad.as_node(m), ad.as_node(v)).values, m @ v)


def test_scalar_op_values():
    x = ad.as_node(np.array([-2.0, 0.0, 3.0]))
    np.testing.assert_array_equal(ad.absolute(x).values, [2.0, 0.0, 3.0])
    np.testing.assert_array_equal(ad.relu(x).values, [0.0, 0.0, 3.0])
    np.testing.assert_allclose(ad.sigmoid(x).values, 1.0 / (1.0 + np.exp([2.0, 0.0, -3.0])))
    np.testing.assert_allclose(ad.exp(x).values, np.exp([-2.0, 0.0, 3.0]))


def test_sigmoid_is_stable_at_large_magnitudes():
    x = ad.as_node(np.array([-1000.0, 1000.0]))
    out = ad.sigmoid(x).values
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0, abs=1e-300)
    assert out[1] == pytest.approx(1.0)


def test_log_rejects_nonpositive():
    with pytest.raises(ValueError):
        ad.log(ad.as_node(np.array([1.0, 0.0])))
    with pytest.raises(ValueError):
        ad.log(ad.as_node(np.array([-1.0])))


def test_reduce_and_clip_values():
    x = ad.as_node(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert ad.reduce_sum(x).item() == 10.0
    assert ad.reduce_mean(x).item() == 2.5
    np.testing.assert_array_equal(ad.reduce_sum(x, axis=0).values, [4.0, 6.0])
    np.testing.assert_array_equal(ad.reduce_mean(x, axis=1).values, [1.5, 3.5])
    np.testing.assert_array_equal(ad.clip(x, 1.5, 3.5).values, [[1.5, 2.0], [3.0, 3.5]])


def test_concat_stack_values():
    a = ad.as_node(np.array([1.0, 2.0]))
    b = ad.as_node(np.array([3.0]))
    np.testing.assert_array_equal(ad.concat([a, b]).values, [1.0, 2.0, 3.0])
    s = ad.stack([ad.as_node(1.0), ad.as_node(2.0), ad.as_node(3.0)])
    np.testing.assert_array_equal(s.values, [1.0, 2.0, 3.0])


def test_l2_normalize_unit_rows():
    x = ad.as_node(np.array([[3.0, 4.0], [0.5, 0.0]]))
    out = ad.l2_normalize(x).values
    np.testing.assert_allclose(out, [[0.6, 0.8], [1.0, 0.0]])


def test_l2_normalize_zero_vector_maps_to_first_basis_vector():
    out = ad.l2_normalize(ad.as_node(np.zeros(4)))
    np.testing.assert_array_equal(out.values, [1.0, 0.0, 0.0, 0.0])
    # and that branch contributes no gradient
    p = params_of(v=np.zeros(4))
    loss = ad.reduce_sum(ad.mul(ad.l2_normalize(p["v"]), np.arange(4.0)))
    grads = ad.backward(loss, p)
    np.testing.assert_array_equal(grads["v"], np.zeros(4))


def test_logsumexp_matches_closed_form():
    x = np.array([1.0, 2.0, 3.0])
    got = ad.logsumexp(ad.as_node(x)).item()
    assert got == pytest.approx(np.log(np.sum(np.exp(x))), rel=1e-12)
    # max subtraction keeps huge magnitudes finite
    big = ad.logsumexp(ad.as_node(np.array([1000.0, 1000.0]))).item()
    assert big == pytest.approx(1000.0 + np.log(2.0), rel=1e-12)


# ---------------------------------------------------------------------------
# gradients against the central-difference oracle


def test_gradients_elementwise_chain():
    rng = np.random.default_rng(1)
    p = params_of(x=rng.normal(size=(3, 4)), y=rng.normal(size=(4,)))

    def f(ps):
        z = ad.mul(ad.add(ps["x"], ps["y"]), ad.sigmoid(ps["x"]))
        return ad.reduce_sum(ad.exp(ad.mul(z, 0.1)))

    check_against_numeric(f, p)


def test_gradients_matmul_both_arguments():
    rng = np.random.default_rng(2)
    p = params_of(w=rng.normal(size=(3, 5)), m=rng.normal(size=(5, 2)), v=rng.normal(size=5))

    def f(ps):
        return ad.reduce_sum(ad.matmul(ps["w"], ps["m"])) + ad.reduce_sum(
            ad.matmul(ps["w"], ps["v"]))

    check_against_numeric(f, p)


def test_gradients_normalize_and_logsumexp():
    rng = np.random.default_rng(3)
    p = params_of(x=rng.normal(size=(4, 6)) + 0.5)

    def f(ps):
        z = ad.l2_normalize(ps["x"])
        return ad.reduce_sum(ad.logsumexp(ad.reduce_sum(z, axis=1), axis=0))

    check_against_numeric(f, p)


def test_gradients_reductions_with_axes():
    rng = np.random.default_rng(4)
    p = params_of(x=rng.normal(size=(3, 4)))

    def f(ps):
        a = ad.reduce_mean(ps["x"], axis=0)
        b = ad.reduce_sum(ps["x"], axis=1)
        return ad.reduce_sum(ad.mul(a, a)) + ad.reduce_mean(ad.mul(b, b))

    check_against_numeric(f, p)


def test_gradient_clip_is_masked_outside_bounds():
    p = params_of(x=np.array([-2.0, 0.5, 2.0]))
    loss = ad.reduce_sum(ad.clip(p["x"], -1.0, 1.0))
    grads = ad.backward(loss, p)
    np.testing.assert_array_equal(grads["x"], [0.0, 1.0, 0.0])


def test_gradient_concat_routes_segments():
    p = params_of(a=np.array([1.0, 2.0]), b=np.array([3.0]))
    loss = ad.reduce_sum(ad.mul(ad.concat([p["a"], p["b"]]), np.array([1.0, 10.0, 100.0])))
    grads = ad.backward(loss, p)
    np.testing.assert_array_equal(grads["a"], [1.0, 10.0])
    np.testing.assert_array_equal(grads["b"], [100.0])


def test_gradient_accumulates_on_reuse():
    p = params_of(x=np.array([2.0, 3.0]))
    # x used twice: d/dx sum(x * x) = 2x
    loss = ad.reduce_sum(ad.mul(p["x"], p["x"]))
    grads = ad.backward(loss, p)
    np.testing.assert_allclose(grads["x"], [4.0, 6.0])


def test_unreachable_parameter_gets_zero_gradient():
    p = params_of(used=np.array([1.0]), unused=np.array([5.0, 6.0]))
    loss = ad.reduce_sum(ad.mul(p["used"], 3.0))
    grads = ad.backward(loss, p)
    np.testing.assert_array_equal(grads["unused"], np.zeros(2))
    np.testing.assert_array_equal(grads["used"], [3.0])


def test_backward_requires_scalar_loss():
    p = params_of(x=np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(ad.mul(p["x"], 2.0), p)


def test_backward_twice_does_not_leak_stale_gradients():
    p = params_of(x=np.array([1.0, 2.0]))

    def f(ps):
        return ad.reduce_sum(ad.mul(ps["x"], ps["x"]))

    first = ad.backward(f(p), p)
    second = ad.backward(f(p), p)
    np.testing.assert_array_equal(first["x"], second["x"])


def test_broadcast_mismatch_rejected():
    a = ad.as_node(np.ones((3, 2)))
    b = ad.as_node(np.ones((4,)))
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_matmul_shape_rules():
    with pytest.raises(ValueError):
        ad.matmul(ad.as_node(np.ones((2, 3))), ad.as_node(np.ones((2, 3))))
    with pytest.raises(ValueError):
        ad.matmul(ad.as_node(np.ones(3)), ad.as_node(np.ones((3, 2))))


# ---------------------------------------------------------------------------
# ParamSet and the optimizer step


def test_paramset_merged_and_lookup():
    a = ad.ParamSet({"w": np.ones((2, 2))})
    b = ad.ParamSet({"v": np.zeros(3)})
    merged = ad.ParamSet.merged(a, b)
    assert set(merged.names()) == {"w", "v"}
    assert merged.n_params == 7
    assert merged.shapes == {"w": (2, 2), "v": (3,)}
    assert "w" in merged and "missing" not in merged


def test_paramset_merged_rejects_duplicate_names():
    a = ad.ParamSet({"w": np.ones(2)})
    b = ad.ParamSet({"w": np.zeros(2)})
    with pytest.raises(ValueError):
        ad.ParamSet.merged(a, b)


def test_paramset_construction_copies_arrays():
    source = np.ones(3)
    p = ad.ParamSet({"x": source})
    source[0] = 99.0
    np.testing.assert_array_equal(p["x"].values, [1.0, 1.0, 1.0])


def test_sgd_step_is_pure_and_correct():
    p = params_of(x=np.array([1.0, 2.0]))
    stepped = ad.sgd_step(p, {"x": np.array([0.5, -0.5])}, lr=0.1)
    np.testing.assert_allclose(stepped["x"].values, [0.95, 2.05])
    np.testing.assert_array_equal(p["x"].values, [1.0, 2.0])


def test_sgd_step_rejects_missing_and_mismatched_grads():
    p = params_of(x=np.ones(2))
    with pytest.raises(ValueError):
        ad.sgd_step(p, {}, lr=0.1)
    with pytest.raises(ValueError):
        ad.sgd_step(p, {"x": np.ones(3)}, lr=0.1)


def test_numeric_grad_rejects_nonfinite_functions():
    p = params_of(x=np.array([0.0]))

    def f(ps):
        return ad.log(ad.exp(ps["x"]) - 1.0 + 1e-300)

    with pytest.raises(ValueError):
        ad.numeric_grad(f, p)


def test_node_operator_sugar_matches_functions():
    a = ad.as_node(np.array([1.0, -2.0]))
    b = ad.as_node(np.array([3.0, 5.0]))
    np.testing.assert_array_equal((a + b).values, ad.add(a, b).values)
    np.testing.assert_array_equal((a - b).values, ad.sub(a, b).values)
    np.testing.assert_array_equal((a * b).values, ad.mul(a, b).values)
    np.testing.assert_array_equal((-a).values, [-1.0, 2.0])
    np.testing.assert_array_equal((1.0 - a).values, [0.0, 3.0])
