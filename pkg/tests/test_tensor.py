import numpy as np
import pytest

from gsrecon import tensor as T


def test_sigmoid_at_zero():
    assert T.sigmoid(T.Value(np.zeros(3))).data == pytest.approx([0.5] * 3)


def test_softmax_uniform_logits():
    out = T.softmax(T.Value(np.full((2, 3), 1.7)))
    assert np.allclose(out.data, 1.0 / 3.0)


def test_matmul_against_triple_loop(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 4))
    out = T.matmul(T.Value(a), T.Value(b)).data
    ref = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs(out - ref).max() <= 1e-12 * np.abs(ref).max()


def test_backward_square():
    with T.Tape():
        x = T.Value(np.array(3.0), watch=True)
        (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_sigmoid_sum():
    with T.Tape():
        x = T.Value(np.zeros((2, 3)), watch=True)
        T.reduce_sum(T.sigmoid(x)).backward()
    assert np.allclose(x.grad, 0.25)


def test_mlp_matches_finite_differences(rng):
    """Three-layer MLP: every parameter gradient vs central differences."""
    dims = [5, 7, 6, 1]
    params = [rng.normal(size=(dims[i], dims[i + 1])) for i in range(3)]
    x0 = rng.normal(size=(4, 5))

    def run(ws):
        h = T.Value(x0)
        for i, w in enumerate(ws):
            h = h @ w
            if i < 2:
                h = T.gelu(h)
        return T.reduce_mean(h * h)

    with T.Tape():
        wv = [T.Value(p, watch=True) for p in params]
        run(wv).backward()

    for pi in range(3):
        flat = params[pi].ravel()
        for fi in rng.integers(0, flat.size, size=4):
            eps = 1e-6
            vals = []
            for sign in (+1, -1):
                ws = [T.Value(p.copy()) for p in params]
                ws[pi].data.ravel()[fi] += sign * eps
                vals.append(run(ws).item())
            num = (vals[0] - vals[1]) / (2 * eps)
            ana = wv[pi].grad.ravel()[fi]
            assert abs(ana - num) / max(1.0, abs(num)) < 1e-5


def test_grad_check_closed_form(rng):
    x = T.Value(rng.normal(size=8))
    err = T.grad_check(lambda v: T.reduce_sum(v * v), x, eps=1e-5)
    assert err <= 1e-8


def test_grad_check_constant():
    x = T.Value(np.ones(4))
    err = T.grad_check(lambda v: T.reduce_sum(v * 0.0), x)
    assert err == 0.0


def test_grad_check_nonfinite_reports_coordinate():
    x = T.Value(np.array([1.0, -1.0]))
    with np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError, match="coordinate"):
            T.grad_check(lambda v: T.reduce_sum(T.log(v)), x)


def test_backward_linearity(rng):
    """grad(a*f + b*g) = a*grad(f) + b*grad(g)."""
    x0 = rng.normal(size=6)
    a, b = 2.5, -1.3

    def grad_of(fn):
        with T.Tape():
            x = T.Value(x0.copy(), watch=True)
            fn(x).backward()
            return x.grad

    f = lambda x: T.reduce_sum(T.sigmoid(x) * x)
    g = lambda x: T.reduce_mean(T.exp(x * 0.3))
    combined = grad_of(lambda x: a * f(x) + b * g(x))
    assert np.allclose(combined, a * grad_of(f) + b * grad_of(g), atol=1e-12)


def test_gradient_accumulation_double_use(rng):
    x0 = rng.normal(size=5)
    with T.Tape():
        x = T.Value(x0.copy(), watch=True)
        y = T.reduce_sum(x * x.detach()) + T.reduce_sum(x * 3.0)
        y.backward()
    assert np.allclose(x.grad, x0 + 3.0)

    with T.Tape():
        x = T.Value(x0.copy(), watch=True)
        T.reduce_sum(x * x).backward()
    assert np.allclose(x.grad, 2 * x0)


def test_forward_determinism(rng):
    x = rng.normal(size=(4, 4))
    a = T.softmax(T.gelu(T.Value(x))).data
    b = T.softmax(T.gelu(T.Value(x))).data
    assert np.array_equal(a, b)


def test_non_scalar_loss_rejected():
    with T.Tape():
        x = T.Value(np.ones(3), watch=True)
        with pytest.raises(T.ShapeError, match="scalar"):
            (x * x).backward()


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(T.ShapeError) as e:
        T.matmul(T.Value(np.ones((2, 3))), T.Value(np.ones((4, 5))))
    msg = str(e.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg

    with pytest.raises(T.ShapeError) as e:
        T.add(T.Value(np.ones((2, 3))), T.Value(np.ones((3, 2))))
    assert "add" in str(e.value)


def test_apply_registry(rng):
    x = rng.normal(size=(3, 4))
    assert np.allclose(T.apply("exp", T.Value(x)).data, np.exp(x))
    assert np.allclose(
        T.apply("matmul", T.Value(x), T.Value(x.T)).data, x @ x.T)
    with pytest.raises(KeyError, match="unknown primitive"):
        T.apply("conv3d", T.Value(x))


def test_detached_value_gets_no_gradient(rng):
    with T.Tape():
        x = T.Value(rng.normal(size=3), watch=True)
        c = T.Value(np.ones(3))          # detached
        T.reduce_sum(x * c).backward()
    assert c.grad is None and x.grad is not None


def _unary_cases(rng):
    r = lambda *s: rng.uniform(0.2, 2.0, size=s)
    return [
        ("exp", T.exp, rng.normal(size=(3, 4))),
        ("log", T.log, r(4, 3)),
        ("sqrt", T.sqrt, r(5,)),
        ("sigmoid", T.sigmoid, rng.normal(size=(2, 3, 4))),
        ("gelu", T.gelu, rng.normal(size=(6,))),
        ("softplus", T.softplus, rng.normal(size=(2, 5))),
        ("softmax", T.softmax, rng.normal(size=(3, 5))),
        ("l2norm", T.l2_normalize, rng.normal(size=(4, 3))),
        ("neg", T.neg, rng.normal(size=(2, 2))),
        ("pow", lambda v: T.power(v, 3.0), r(4,)),
        ("reshape", lambda v: T.reshape(v, (6,)), rng.normal(size=(2, 3))),
        ("transpose", lambda v: T.transpose(v, (1, 0, 2)),
         rng.normal(size=(2, 3, 2))),
        ("slice", lambda v: v[1:3, ::2], rng.normal(size=(4, 5))),
        ("sum", lambda v: T.reduce_sum(v, axis=1), rng.normal(size=(3, 4))),
        ("mean", lambda v: T.reduce_mean(v, axis=(0, 2), keepdims=True),
         rng.normal(size=(2, 3, 4))),
        ("roll", lambda v: T.roll(v, 2, axis=0), rng.normal(size=(5, 2))),
        ("repeat", lambda v: T.repeat(v, 3, axis=1), rng.normal(size=(4, 1))),
        ("pad2d", lambda v: T.pad2d(v, 1, 2), rng.normal(size=(1, 3, 3, 2))),
        ("patches", lambda v: T.patches(v, 2, 2), rng.normal(size=(1, 4, 4, 3))),
        ("patches_overlap", lambda v: T.patches(v, 3, 1),
         rng.normal(size=(1, 5, 5, 2))),
        ("gather", lambda v: T.gather(v, np.array([2, 0, 2]), axis=0),
         rng.normal(size=(4, 3))),
        ("scatter_add", lambda v: T.scatter_add(v, np.array([1, 0, 1]), 3),
         rng.normal(size=(3, 2))),
        ("clip", lambda v: T.clip(v, -0.5, 0.5), rng.normal(size=(8,))),
        ("cast", lambda v: T.cast(v, np.float64), rng.normal(size=(3,))),
    ]


def test_every_primitive_backward_vs_finite_differences(rng):
    """Spec invariant: each primitive's backward matches central finite
    differences within 1e-5 relative on random inputs of rank <= 4."""
    weights = {}

    def scalarize(name, fn):
        def f(v):
            out = fn(v)
            if name not in weights:
                weights[name] = np.random.default_rng(1).normal(
                    size=out.data.shape)
            return T.reduce_sum(out * T.Value(weights[name]))
        return f

    for name, fn, x in _unary_cases(rng):
        err = T.grad_check(scalarize(name, fn), T.Value(x), eps=1e-6)
        assert err < 1e-5, f"{name}: max rel grad error {err}"


def test_binary_primitive_gradients(rng):
    a0 = rng.uniform(0.5, 1.5, size=(3, 4))
    b0 = rng.uniform(0.5, 1.5, size=(3, 4))
    small = rng.uniform(0.5, 1.5, size=(4,))
    m = rng.normal(size=(4, 2))
    probe = np.random.default_rng(2)

    cases = [
        ("add", lambda x: T.add(x, T.Value(b0)), a0),
        ("sub", lambda x: T.sub(T.Value(b0), x), a0),
        ("mul", lambda x: T.mul(x, T.Value(b0)), a0),
        ("div", lambda x: T.div(T.Value(b0), x), a0),
        ("mul_bcast", lambda x: T.mul(T.Value(a0), x), small),
        ("matmul_a", lambda x: T.matmul(x, T.Value(m)), a0),
        ("matmul_b", lambda x: T.matmul(T.Value(a0), x), m),
        ("concat", lambda x: T.concat([x, T.Value(b0)], axis=1), a0),
        ("layernorm_x", lambda x: T.layer_norm(
            x, T.Value(np.ones(4)), T.Value(np.zeros(4))), a0),
        ("layernorm_gain", lambda g: T.layer_norm(
            T.Value(a0), g, T.Value(np.zeros(4))), np.ones(4)),
        ("layernorm_bias", lambda b: T.layer_norm(
            T.Value(a0), T.Value(np.ones(4)), b), np.zeros(4)),
    ]
    for name, fn, x in cases:
        w = probe.normal(size=fn(T.Value(x)).data.shape)
        err = T.grad_check(
            lambda v: T.reduce_sum(fn(v) * T.Value(w)), T.Value(x), eps=1e-6)
        assert err < 1e-5, f"{name}: max rel grad error {err}"


def test_batched_matmul_gradient(rng):
    a = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=(3, 4, 2))
    w = rng.normal(size=(3, 2, 2))
    err = T.grad_check(
        lambda v: T.reduce_sum(T.matmul(v, T.Value(b)) * T.Value(w)),
        T.Value(a), eps=1e-6)
    assert err < 1e-5


def test_broadcasting_policy_rejects_middle_dims():
    with pytest.raises(T.ShapeError):
        T.add(T.Value(np.ones((3, 1))), T.Value(np.ones((3, 4))))
    # scalars and trailing-suffix expansion are allowed
    T.add(T.Value(np.ones((3, 4))), T.Value(np.float64(2.0)))
    out = T.add(T.Value(np.ones((2, 3, 4))), T.Value(np.ones((3, 4))))
    assert out.data.shape == (2, 3, 4)


def test_unbroadcast_sums_leading_axes(rng):
    b0 = rng.normal(size=(4,))
    with T.Tape():
        b = T.Value(b0.copy(), watch=True)
        (T.Value(np.ones((5, 4))) * b).sum().backward()
    assert np.allclose(b.grad, 5.0)
