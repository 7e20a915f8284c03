import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from safemark_lab import codec as C
from safemark_lab import grad as G
from safemark_lab.synth import make_dataset

KEY = C.WatermarkKey(seed=7)


@given(st.integers(0, 2**63), st.integers(2, 24), st.sampled_from([(8, 8, 1), (16, 16, 3), (32, 32, 3), (5, 7, 3)]))
def test_patterns_pm1_and_near_orthogonal(seed, b, shape):
    p = C.WatermarkKey(seed=seed, b_bits=b).patterns(shape)
    assert p.shape == (b, *shape)
    assert set(np.unique(p)) <= {-1.0, 1.0}
    n = int(np.prod(shape))
    flat = p.reshape(b, n)
    gram = flat @ flat.T / n
    off = gram[~np.eye(b, dtype=bool)]
    assert np.abs(off).max() <= 4 / np.sqrt(n)


def test_patterns_deterministic_and_keyed():
    a = C.WatermarkKey(seed=11).patterns((8, 8, 3))
    b = C._patterns.__wrapped__(11, C.DEFAULT_BITS, (8, 8, 3))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, C.WatermarkKey(seed=12).patterns((8, 8, 3)))
    assert not a.flags.writeable


def test_zero_strength_leaves_image(rng):
    x = rng.random((8, 8, 3))
    key = C.WatermarkKey(seed=1, alpha=0.0)
    np.testing.assert_array_equal(C.embed(key, x, C.random_messages(rng, 1, key.b_bits)[0]), x)


def test_complement_difference(rng):
    w = C.random_messages(rng, 1, KEY.b_bits)[0]
    shape = (8, 8, 3)
    diff = C.watermark_signal(KEY, w, shape) - C.watermark_signal(KEY, 1 - w, shape)
    p = KEY.patterns(shape)
    want = 2 * KEY.alpha / np.sqrt(KEY.b_bits) * sum((2 * w[b] - 1) * p[b] for b in range(KEY.b_bits))
    np.testing.assert_allclose(diff, want, atol=1e-15)


def test_embed_decode_64px_is_exact():
    """100 seeded 64x64 images decode every bit correctly without editing."""
    data = make_dataset(100, seed=3, size=(64, 64))
    w = C.random_messages(np.random.default_rng(0), 100, KEY.b_bits)
    soft = C.decode_soft(KEY, C.embed(KEY, data, w))
    assert C.bit_accuracy(w, C.harden(soft)) == 1.0
    # every soft bit is on the correct side of 1/2
    assert np.all((soft > 0.5) == (w == 1))


def test_flat_gray_decodes_to_half():
    np.testing.assert_array_equal(C.decode_soft(KEY, np.full((8, 8, 3), 0.5)), 0.5)


def test_decoder_ignores_constant_offset(rng):
    # N = 512 and dyadic pixel values keep every sum and the mean exact
    x = rng.integers(0, 128, size=(16, 16, 2)) / 256
    np.testing.assert_array_equal(C.decode_soft(KEY, x + 0.25), C.decode_soft(KEY, x))


def test_decoder_gradient_matches_fd(rng):
    key = C.WatermarkKey(seed=2, b_bits=4, beta=40.0)
    pv = G.ParamVector.from_segments({"x": rng.random((6, 6, 1))})

    def build(p):
        t = G.Tape()
        return t, G.sum_(C.decode_soft_var(key, t.param(p, "x")))

    t, y = build(pv)
    analytic = G.backward(t, y).values
    numeric = G.finite_difference_gradient(lambda p: build(p)[1].item(), pv).values
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_tape_decoder_matches_numpy(rng):
    x = rng.random((3, 8, 8, 3))
    t = G.Tape()
    np.testing.assert_allclose(C.decode_soft_var(KEY, t.const(x)).value, C.decode_soft(KEY, x), rtol=1e-13)


def test_harden_tie_rule():
    np.testing.assert_array_equal(C.harden([0.51, 0.5, 0.49]), [1, 0, 0])


def test_soft_accuracy_examples():
    w = np.array([1, 0, 1, 1])
    assert C.soft_accuracy(w, w.astype(float)) == 1.0
    assert C.soft_accuracy(w, np.full(4, 0.5)) == 0.75
    wrong = w.astype(float)
    wrong[2] = 0.0
    assert C.soft_accuracy(w, wrong) == 1 - 1 / 4
    assert C.bit_accuracy(w, C.harden(wrong)) == 1 - 1 / 4


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        C.soft_accuracy([1, 0], [0.5])
    with pytest.raises(ValueError):
        C.embed(KEY, np.zeros((4, 4, 3)), np.zeros(KEY.b_bits - 1, dtype=int))


def test_calibration_pointwise_1e5():
    rng = np.random.default_rng(2024)
    n, b = 100_000, 32
    w = rng.integers(0, 2, size=(n, b))
    # mix uniform soft bits with near-correct ones so both regimes are exercised
    soft = rng.random((n, b))
    near = rng.random(n) < 0.5
    soft[near] = np.clip(w[near] + rng.normal(0, 0.2, size=(near.sum(), b)) * (1 - 2 * w[near]), 0, 1)
    hard = (C.harden(soft) == w).mean(axis=1)
    soft_acc = 1 - ((soft - w) ** 2).mean(axis=1)
    assert np.sum(hard < 4 * soft_acc - 3 - 1e-12) == 0


@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=1, max_size=64))
def test_calibration_property(pairs):
    w = np.array([p[0] for p in pairs])
    s = np.array([p[1] for p in pairs])
    assert C.bit_accuracy(w, C.harden(s)) >= 4 * C.soft_accuracy(w, s) - 3 - 1e-12


# soft bits on a 1/1024 grid: a nonzero error must survive squaring in float64
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1024)), min_size=1, max_size=64))
def test_soft_accuracy_range_and_equality(pairs):
    w = np.array([p[0] for p in pairs])
    s = np.array([p[1] / 1024 for p in pairs])
    v = C.soft_accuracy(w, s)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == bool(np.all(s == w))


@given(st.lists(st.integers(0, 1), min_size=1, max_size=70))
def test_hex_round_trip(bits):
    w = np.array(bits)
    np.testing.assert_array_equal(C.message_from_hex(C.message_to_hex(w), len(bits)), w)


def test_hex_is_msb_first():
    assert C.message_to_hex([1, 0, 0, 0, 0, 0, 0, 1]) == "81"


def test_key_json_round_trip(tmp_path):
    KEY.save(tmp_path / "key.json")
    assert C.WatermarkKey.load(tmp_path / "key.json") == KEY
    with pytest.raises(ValueError):
        C.WatermarkKey.from_json({**KEY.to_json(), "extra": 1})
    with pytest.raises(ValueError):
        C.WatermarkKey(beta=0.0)
