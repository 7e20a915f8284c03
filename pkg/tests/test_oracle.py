import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import entropy

from safemark_lab import oracle as O
from safemark_lab.bounds import binary_entropy


def mi_from_entropies(cond: np.ndarray) -> float:
    """I(W;X) = H(X) - H(X|W) with a uniform prior, via scipy's entropy."""
    px = cond.mean(axis=0)
    return entropy(px, base=2) - np.mean([entropy(row, base=2) for row in cond])


channels = st.builds(
    lambda seed, b, k: O.random_channel(np.random.default_rng(seed), b, k),
    st.integers(0, 2**32 - 1),
    st.integers(1, 3),
    st.sampled_from([2, 4, 8]),
)


def test_identity_channel_carries_b_bits():
    for b in (1, 2, 3, 5):
        assert abs(O.exact_mi(O.identity_channel(b)) - b) < 1e-12


def test_useless_channel_carries_nothing():
    ch = O.DiscreteChannel(2, np.tile([0.2, 0.3, 0.5], (4, 1)))
    assert abs(O.exact_mi(ch)) < 1e-15


def test_bsc_matches_capacity_formula():
    assert abs(O.exact_mi(O.bsc_channel(0.1)) - (1 - binary_entropy(0.1))) < 1e-12
    assert abs(O.exact_mi(O.bsc_channel(0.1)) - 0.531) < 0.001


@given(channels)
def test_exact_mi_matches_entropy_difference(ch):
    assert abs(O.exact_mi(ch) - mi_from_entropies(ch.cond)) < 1e-10


@given(channels)
def test_exact_mi_range(ch):
    mi = O.exact_mi(ch)
    assert -1e-12 <= mi <= min(ch.b_bits, math.log2(ch.alphabet_size)) + 1e-12


def test_identity_decoder_stats():
    ch = O.identity_channel(3)
    assert O.decoder_stats(ch, np.arange(8)) == (1.0, 0.0)


def test_constant_decoder_guesses():
    ch = O.identity_channel(1)
    acc, err = O.decoder_stats(ch, np.zeros(2, dtype=int))
    assert (acc, err) == (0.5, 0.5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stats_match_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    ch = O.random_channel(rng, 3, 8)
    dec = O.random_decoder(rng, ch)
    acc, err = O.decoder_stats(ch, dec)
    n = 10**6
    mc_acc, mc_err = O.monte_carlo_stats(ch, dec, n, rng)
    # bit accuracy averages 3 correlated bits per sample; per-sample variance is at most acc(1-acc)
    assert abs(mc_acc - acc) <= 3 * math.sqrt(acc * (1 - acc) / n)
    assert abs(mc_err - err) <= 3 * math.sqrt(err * (1 - err) / n)


@given(channels, st.integers(0, 2**32 - 1))
def test_merging_outputs_never_adds_information(ch, seed):
    rng = np.random.default_rng(seed)
    mapping = rng.integers(0, max(1, ch.alphabet_size // 2), size=ch.alphabet_size)
    mapping[0] = 0
    merged = O.merge_outputs(ch, mapping)
    assert O.exact_mi(merged) <= O.exact_mi(ch) + 1e-12


@given(channels, st.integers(0, 2**32 - 1))
def test_per_bit_fano_step(ch, seed):
    dec = O.random_decoder(np.random.default_rng(seed), ch)
    h, a = O.per_bit_conditional_entropy(ch, dec)
    for hb, ab in zip(h, a):
        assert hb <= binary_entropy(min(1.0, max(0.0, 1 - ab))) + 1e-12


def test_identity_certificate_is_tight():
    cert = O.certify_bounds(O.identity_channel(3), np.arange(8))
    assert cert.ok
    assert abs(cert.accmi_margin) < 1e-12
    assert cert.fano_margin == 0.0


def test_bsc_map_equality():
    ch = O.bsc_channel(0.1)
    cert = O.certify_bounds(ch, O.map_decoder(ch))
    assert abs(cert.bit_acc - 0.9) < 1e-12
    assert abs(cert.accmi_margin) < 1e-9


def test_verify_report():
    report = O.verify(200, seed=3, max_bits=3)
    assert report["violations"] == []
    assert report["equality_ok"]
    assert report["min_margin_fano"] >= 0 and report["min_margin_accmi"] >= -1e-12


def test_verify_is_deterministic():
    assert O.verify(50, 9) == O.verify(50, 9)


def test_channel_validation():
    with pytest.raises(ValueError):
        O.DiscreteChannel(1, np.array([[0.5, 0.6], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        O.DiscreteChannel(1, np.array([[1.5, -0.5], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        O.DiscreteChannel(2, np.ones((3, 1)))
    with pytest.raises(ValueError):
        O.DiscreteChannel(13, np.ones((2**13, 1)))
    # rounding within tolerance is accepted and renormalized
    ch = O.DiscreteChannel(1, np.array([[0.3, 0.7 + 5e-13], [0.5, 0.5]]))
    assert abs(ch.cond.sum(axis=1) - 1).max() < 1e-15
