import json

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from safemark_lab import grad as G

REL, ABS = 1e-4, 1e-7


def close(a, b, rel=REL, abs_=ABS):
    a, b = np.asarray(a), np.asarray(b)
    return np.all(np.abs(a - b) <= rel * np.maximum(np.abs(a), np.abs(b)) + abs_)


def away_from(rng, shape, kinks, lo=-2.0, hi=2.0, margin=1e-3):
    """Uniform draws that keep at least ``margin`` from every kink."""
    x = rng.uniform(lo, hi, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.where(x[near] >= k, 1, -1) * (margin + rng.uniform(0.01, 0.1, size=near.sum()))
    return x


# --- primitive examples -------------------------------------------------------


def test_sigmoid_at_zero():
    t = G.Tape()
    assert G.sigmoid(t.const(0.0)).item() == 0.5


def test_conv_identity_kernel(rng):
    x = rng.random((6, 5, 2))
    k = np.zeros((2, 3, 3))
    k[:, 1, 1] = 1
    t = G.Tape()
    np.testing.assert_array_equal(G.conv2d_same(t.const(x), t.const(k)).value, x)


def test_affine_identity(rng):
    x = rng.random((4, 4, 3))
    t = G.Tape()
    out = G.per_channel_affine(t.const(x), t.const(np.ones(3)), t.const(np.zeros(3)))
    np.testing.assert_array_equal(out.value, x)


def scalar_param(v):
    return G.ParamVector.from_segments({"theta": np.array([v])})


def test_square_gradient():
    pv = scalar_param(3.0)
    t = G.Tape()
    y = G.sum_(G.square(t.param(pv, "theta")))
    assert G.backward(t, y).values[0] == 6.0


def test_abs_subgradient():
    pv = scalar_param(-2.0)
    t = G.Tape()
    y = G.sum_(G.abs_(t.param(pv, "theta")))
    assert G.backward(t, y).values[0] == -1.0


@pytest.mark.parametrize("kind,x,expected", [("abs", 0.0, 0.0), ("clamp01", 0.0, 0.0), ("clamp01", 1.0, 0.0), ("hinge", 0.0, 0.0)])
def test_kink_conventions(kind, x, expected):
    pv = scalar_param(x)
    t = G.Tape()
    y = G.sum_(G.forward_op(kind, [t.param(pv, "theta")]))
    assert G.backward(t, y).values[0] == expected


def test_fd_cubic():
    g = G.finite_difference_gradient(lambda p: float(p.values[0] ** 3), scalar_param(1.0), step=1e-4)
    assert abs(g.values[0] - 3.0) < 1e-6


def test_fd_constant():
    pv = G.ParamVector.from_segments({"a": np.ones(5)})
    assert not G.finite_difference_gradient(lambda p: 7.0, pv).values.any()


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        G.finite_difference_gradient(lambda p: 0.0, scalar_param(0.0), step=0.0)


# --- forward values against independent implementations ----------------------


def test_conv_matches_scipy_nearest(rng):
    x = rng.random((7, 9, 3))
    k = rng.standard_normal((3, 5, 5))
    t = G.Tape()
    got = G.conv2d_same(t.const(x), t.const(k)).value
    want = np.stack([ndimage.correlate(x[..., c], k[c], mode="nearest") for c in range(3)], axis=-1)
    np.testing.assert_allclose(got, want, atol=1e-12)


def naive_upsample(x, size):
    h_in, w_in, c = x.shape
    h_out, w_out = size
    out = np.zeros((h_out, w_out, c))
    for i in range(h_out):
        for j in range(w_out):
            sy = min(max((i + 0.5) * h_in / h_out - 0.5, 0), h_in - 1)
            sx = min(max((j + 0.5) * w_in / w_out - 0.5, 0), w_in - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h_in - 1), min(x0 + 1, w_in - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = (
                (1 - fy) * (1 - fx) * x[y0, x0] + (1 - fy) * fx * x[y0, x1] + fy * (1 - fx) * x[y1, x0] + fy * fx * x[y1, x1]
            )
    return out


@pytest.mark.parametrize("size", [(8, 8), (13, 7), (3, 4)])
def test_upsample_matches_naive(rng, size):
    x = rng.random((3, 4, 2))
    t = G.Tape()
    np.testing.assert_allclose(G.bilinear_upsample(t.const(x), size).value, naive_upsample(x, size), atol=1e-12)


def test_sigmoid_matches_high_precision(rng):
    x = rng.uniform(-40, 40, size=200)
    t = G.Tape()
    want = np.array([float(1 / (1 + mpmath.exp(-mpmath.mpf(v)))) for v in x])
    np.testing.assert_allclose(G.sigmoid(t.const(x)).value, want, rtol=1e-14, atol=0)


def test_inner_product_matches_loop(rng):
    x = rng.random((2, 3, 4, 2))
    p = rng.standard_normal((5, 3, 4, 2))
    t = G.Tape()
    got = G.inner_product(t.const(x), p).value
    want = np.array([[sum(x[n].ravel()[i] * p[k].ravel()[i] for i in range(24)) for k in range(5)] for n in range(2)])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_shape_errors():
    t = G.Tape()
    with pytest.raises(G.ShapeError):
        G.add(t.const(np.ones(3)), t.const(np.ones(4)))
    with pytest.raises(G.ShapeError):
        G.inner_product(t.const(np.ones((2, 2))), np.ones((3, 2, 3)))
    with pytest.raises(ValueError):
        G.forward_op("relu", [t.const(1.0)])


# --- every primitive against central differences ------------------------------

# (kind, input shapes, kinks, forward kwargs)
CASES = [
    ("add", [(3, 4), (4,)], [], {}),
    ("sub", [(3, 4), (3, 1)], [], {}),
    ("scalar-mul", [(5,)], [], {"scale": -1.7}),
    ("elementwise-mul", [(2, 3, 2), (3, 2)], [], {}),
    ("conv2d-same", [(5, 6, 2), (2, 3, 3)], [], {}),
    ("conv2d-same", [(2, 4, 4, 1), (1, 5, 5)], [], {}),
    ("per-channel-affine", [(4, 3, 3), (3,), (3,)], [], {}),
    ("bilinear-upsample", [(3, 4, 2)], [], {"size": (7, 9)}),
    ("sigmoid", [(6,)], [], {}),
    ("clamp01", [(12,)], [0.0, 1.0], {}),
    ("hinge", [(12,)], [0.0], {}),
    ("inner-product", [(4, 4, 2), (3, 4, 4, 2)], [], {}),
    ("inner-product", [(6,), (6,)], [], {}),
    ("sum", [(3, 4)], [], {"axis": 1}),
    ("mean", [(2, 3, 4)], [], {"axis": (0, 2), "keepdims": True}),
    ("abs", [(10,)], [0.0], {}),
    ("square", [(7,)], [], {}),
]


@pytest.mark.parametrize("kind,shapes,kinks,kw", CASES, ids=[f"{c[0]}-{i}" for i, c in enumerate(CASES)])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(kind, shapes, kinks, kw, seed):
    rng = np.random.default_rng([seed, len(kind)])
    pv = G.ParamVector.from_segments({f"in{i}": away_from(rng, s, kinks) for i, s in enumerate(shapes)})
    weights = None

    def build(p):
        nonlocal weights
        t = G.Tape()
        out = G.forward_op(kind, [t.param(p, f"in{i}") for i in range(len(shapes))], **kw)
        if weights is None:
            weights = np.random.default_rng(99).uniform(-1, 1, size=out.shape)
        return t, G.sum_(G.elementwise_mul(out, t.const(weights)))

    t, y = build(pv)
    analytic = G.backward(t, y).values
    numeric = G.finite_difference_gradient(lambda p: build(p)[1].item(), pv).values
    assert close(analytic, numeric)


# --- structural properties ----------------------------------------------------


def pipeline_value(p, x, patterns):
    t = G.Tape()
    y = G.conv2d_same(t.const(x), t.param(p, "k"))
    y = G.clamp01(G.add(y, t.param(p, "b")))
    return t, G.mean(G.sigmoid(G.inner_product(y, patterns)))


def test_linearity(rng):
    p = G.ParamVector.from_segments({"a": rng.standard_normal(6), "b": rng.standard_normal(6)})
    alpha, beta = 0.7, -2.3

    def f(t):
        return G.sum_(G.square(t.param(p, "a")))

    def g(t):
        return G.sum_(G.sigmoid(G.elementwise_mul(t.param(p, "a"), t.param(p, "b"))))

    t1 = G.Tape()
    ga = G.backward(t1, f(t1)).values
    t2 = G.Tape()
    gb = G.backward(t2, g(t2)).values
    t3 = G.Tape()
    combo = G.add(G.scalar_mul(f(t3), alpha), G.scalar_mul(g(t3), beta))
    np.testing.assert_allclose(G.backward(t3, combo).values, alpha * ga + beta * gb, rtol=0, atol=1e-10)


def test_determinism():
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(5)
        x = rng.random((6, 6, 2))
        pats = rng.choice([-1.0, 1.0], size=(4, 6, 6, 2))
        p = G.ParamVector.from_segments({"k": rng.standard_normal((2, 3, 3)), "b": rng.standard_normal(2) * 0.1})
        t, y = pipeline_value(p, x, pats)
        outs.append((y.value.tobytes(), G.backward(t, y).values.tobytes()))
    assert outs[0] == outs[1]


def test_topological_order(rng):
    p = G.ParamVector.from_segments({"k": rng.standard_normal((1, 3, 3)), "b": rng.standard_normal(1)})
    t, y = pipeline_value(p, rng.random((5, 5, 1)), np.ones((2, 5, 5, 1)))
    for i, node in enumerate(t.nodes):
        assert all(parent < i for parent in node.parents)


def test_backward_visits_each_node_once(rng, monkeypatch):
    p = G.ParamVector.from_segments({"k": rng.standard_normal((1, 3, 3)), "b": rng.standard_normal(1)})
    t, y = pipeline_value(p, rng.random((5, 5, 1)), np.ones((2, 5, 5, 1)))
    calls = []
    for i, node in enumerate(t.nodes):
        if node.vjp is not None:
            node.vjp = (lambda f, i: lambda g: calls.append(i) or f(g))(node.vjp, i)
    G.backward(t, y)
    assert sorted(calls) == sorted(set(calls))


def test_untouched_segment_gets_zero_gradient():
    p = G.ParamVector.from_segments({"used": np.array([2.0]), "idle": np.array([1.0, 1.0])})
    t = G.Tape()
    y = G.sum_(G.square(t.param(p, "used")))
    np.testing.assert_array_equal(G.backward(t, y).values, [4.0, 0.0, 0.0])


def test_non_scalar_seed_rejected():
    t = G.Tape()
    p = G.ParamVector.from_segments({"a": np.ones(3)})
    with pytest.raises(ValueError):
        G.backward(t, G.square(t.param(p, "a")))


# --- ParamVector --------------------------------------------------------------


def test_layout_must_cover_without_overlap():
    with pytest.raises(ValueError):
        G.ParamVector(np.zeros(4), [G.Segment("a", 0, 2), G.Segment("b", 1, 3)])
    with pytest.raises(ValueError):
        G.ParamVector(np.zeros(4), [G.Segment("a", 0, 2)])
    with pytest.raises(ValueError):
        G.ParamVector(np.zeros(4), [G.Segment("a", 0, 2), G.Segment("a", 2, 2)])


@given(st.lists(st.integers(1, 6), min_size=1, max_size=5), st.integers(0, 2**32 - 1))
def test_paramvector_json_round_trip(sizes, seed):
    rng = np.random.default_rng(seed)
    pv = G.ParamVector.from_segments({f"s{i}": rng.standard_normal(n) for i, n in enumerate(sizes)})
    doc = json.loads(json.dumps(pv.to_json()))
    back = G.ParamVector.from_json(doc, {f"s{i}": (n,) for i, n in enumerate(sizes)})
    np.testing.assert_array_equal(back.values, pv.values)
    assert back.layout == pv.layout


def test_checkpoint_file(tmp_path, rng):
    pv = G.ParamVector.from_segments({"k": rng.standard_normal((2, 3)), "b": rng.standard_normal(2)})
    pv.save(tmp_path / "theta.ckpt")
    back = G.ParamVector.load(tmp_path / "theta.ckpt", {"k": (2, 3), "b": (2,)})
    np.testing.assert_array_equal(back.get("k"), pv.get("k"))
