"""Exact information quantities on small enumerable watermark channels.

A channel is the full table p(x | w) for every message w in {0,1}^B under a
uniform prior, so every quantity here is a finite sum. This is the
brute-force check on the closed-form bounds in :mod:`safemark_lab.bounds`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bounds import acc_to_mi_lower_bound, binary_entropy, fano_block_error_lower_bound

MAX_BITS = 12
MAX_ALPHABET = 64
ROW_TOL = 1e-12


@dataclass
class DiscreteChannel:
    b_bits: int
    cond: np.ndarray

    def __post_init__(self) -> None:
        cond = np.array(self.cond, dtype=np.float64)
        if not 1 <= self.b_bits <= MAX_BITS:
            raise ValueError(f"b_bits must be in [1, {MAX_BITS}], got {self.b_bits}")
        if cond.ndim != 2 or cond.shape[0] != 2**self.b_bits:
            raise ValueError(f"cond must have {2 ** self.b_bits} rows, got shape {cond.shape}")
        if not 1 <= cond.shape[1] <= MAX_ALPHABET:
            raise ValueError(f"alphabet size must be in [1, {MAX_ALPHABET}], got {cond.shape[1]}")
        if (cond < 0).any():
            raise ValueError("negative transition probability")
        rows = cond.sum(axis=1)
        bad = np.flatnonzero(np.abs(rows - 1) > ROW_TOL)
        if bad.size:
            raise ValueError(f"row {bad[0]} sums to {rows[bad[0]]!r}")
        self.cond = cond / rows[:, None]

    @property
    def n_messages(self) -> int:
        return 2**self.b_bits

    @property
    def alphabet_size(self) -> int:
        return self.cond.shape[1]

    def joint(self) -> np.ndarray:
        return self.cond / self.n_messages


def bits_of(words: np.ndarray, b_bits: int) -> np.ndarray:
    """(..., B) bit matrix, bit b is ``(word >> b) & 1``."""
    words = np.asarray(words)
    return (words[..., None] >> np.arange(b_bits)) & 1


def _xlogx_ratio(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(p[mask] / q[mask])))


def exact_mi(channel: DiscreteChannel) -> float:
    joint = channel.joint()
    px = joint.sum(axis=0)
    pw = np.full(channel.n_messages, 1.0 / channel.n_messages)
    return max(0.0, _xlogx_ratio(joint, np.outer(pw, px)))


def identity_channel(b_bits: int) -> DiscreteChannel:
    return DiscreteChannel(b_bits, np.eye(2**b_bits))


def bsc_channel(eps: float) -> DiscreteChannel:
    return DiscreteChannel(1, np.array([[1 - eps, eps], [eps, 1 - eps]]))


def random_channel(rng: np.random.Generator, b_bits: int, alphabet: int) -> DiscreteChannel:
    """Rows are normalized exponential draws, i.e. flat-Dirichlet samples."""
    draws = rng.standard_exponential((2**b_bits, alphabet))
    return DiscreteChannel(b_bits, draws / draws.sum(axis=1, keepdims=True))


def map_decoder(channel: DiscreteChannel) -> np.ndarray:
    return np.argmax(channel.cond, axis=0)


def random_decoder(rng: np.random.Generator, channel: DiscreteChannel) -> np.ndarray:
    return rng.integers(0, channel.n_messages, size=channel.alphabet_size)


def _check_decoder(channel: DiscreteChannel, decoder) -> np.ndarray:
    dec = np.asarray(decoder, dtype=np.int64)
    if dec.shape != (channel.alphabet_size,):
        raise ValueError(f"decoder must map all {channel.alphabet_size} symbols, got shape {dec.shape}")
    if dec.min() < 0 or dec.max() >= channel.n_messages:
        raise ValueError("decoder output outside the message set")
    return dec


def decoder_stats(channel: DiscreteChannel, decoder) -> tuple[float, float]:
    """Exact (average bit accuracy, block error) of ``decoder`` on ``channel``."""
    dec = _check_decoder(channel, decoder)
    joint = channel.joint()
    words = np.arange(channel.n_messages)
    same_word = words[:, None] == dec[None, :]
    block_error = 1.0 - float(joint[same_word].sum())
    agree = bits_of(words, channel.b_bits)[:, None, :] == bits_of(dec, channel.b_bits)[None, :, :]
    per_bit = np.einsum("wx,wxb->b", joint, agree)
    return float(per_bit.mean()), block_error


def per_bit_conditional_entropy(channel: DiscreteChannel, decoder) -> tuple[np.ndarray, np.ndarray]:
    """H(W_b | Ŵ_b) and per-bit accuracy a_b for each bit."""
    dec = _check_decoder(channel, decoder)
    joint = channel.joint()
    wb = bits_of(np.arange(channel.n_messages), channel.b_bits)
    db = bits_of(dec, channel.b_bits)
    h = np.zeros(channel.b_bits)
    acc = np.zeros(channel.b_bits)
    for b in range(channel.b_bits):
        table = np.zeros((2, 2))  # [true bit, decoded bit]
        for i in (0, 1):
            for j in (0, 1):
                table[i, j] = joint[np.ix_(wb[:, b] == i, db[:, b] == j)].sum()
        acc[b] = table[0, 0] + table[1, 1]
        pd = table.sum(axis=0)
        for j in (0, 1):
            if pd[j] > 0:
                h[b] += pd[j] * binary_entropy(min(1.0, max(0.0, table[1, j] / pd[j])))
    return h, acc


def merge_outputs(channel: DiscreteChannel, mapping) -> DiscreteChannel:
    """Post-process X_e by merging symbols: new symbol = mapping[old symbol]."""
    mapping = np.asarray(mapping)
    k_new = int(mapping.max()) + 1
    cond = np.zeros((channel.n_messages, k_new))
    np.add.at(cond.T, mapping, channel.cond.T)
    return DiscreteChannel(channel.b_bits, cond)


def monte_carlo_stats(channel: DiscreteChannel, decoder, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Sampled (bit accuracy, block error); used to cross-check :func:`decoder_stats`."""
    dec = _check_decoder(channel, decoder)
    w = rng.integers(0, channel.n_messages, size=n)
    cdf = np.cumsum(channel.cond, axis=1)
    u = rng.random(n)
    x = np.minimum((u[:, None] > cdf[w]).sum(axis=1), channel.alphabet_size - 1)
    w_hat = dec[x]
    bit_acc = float((bits_of(w, channel.b_bits) == bits_of(w_hat, channel.b_bits)).mean())
    return bit_acc, float((w_hat != w).mean())


@dataclass
class Certificate:
    b_bits: int
    mi: float
    bit_acc: float
    block_error: float
    fano_margin: float
    accmi_margin: float
    ok: bool = field(init=False)

    def __post_init__(self) -> None:
        self.ok = self.fano_margin >= -1e-12 and self.accmi_margin >= -1e-12


def certify_bounds(channel: DiscreteChannel, decoder) -> Certificate:
    mi = exact_mi(channel)
    bit_acc, block_error = decoder_stats(channel, decoder)
    b = channel.b_bits
    return Certificate(
        b_bits=b,
        mi=mi,
        bit_acc=bit_acc,
        block_error=block_error,
        fano_margin=block_error - fano_block_error_lower_bound(mi, b),
        accmi_margin=mi - acc_to_mi_lower_bound(min(1.0, bit_acc), b),
    )


def equality_checks() -> dict[str, float]:
    """Deviation from the cases where the accuracy bound is tight."""
    out = {}
    for b in (1, 2, 3):
        ch = identity_channel(b)
        cert = certify_bounds(ch, np.arange(2**b))
        out[f"identity_B{b}"] = abs(cert.accmi_margin) + abs(cert.mi - b) + abs(cert.block_error)
    ch = bsc_channel(0.1)
    cert = certify_bounds(ch, map_decoder(ch))
    out["bsc_0.1_map"] = abs(cert.accmi_margin) + abs(cert.bit_acc - 0.9) + abs(cert.mi - (1 - binary_entropy(0.1)))
    return out


def verify(trials: int, seed: int, max_bits: int = 3, alphabets=(2, 4, 8)) -> dict:
    """Randomized certification run; instances are generated in index order from ``seed``."""
    if max_bits < 1 or max_bits > MAX_BITS:
        raise ValueError(f"max_bits must be in [1, {MAX_BITS}]")
    rng = np.random.default_rng(seed)
    violations = []
    min_fano = min_accmi = float("inf")
    for t in range(trials):
        b = int(rng.integers(1, max_bits + 1))
        k = int(rng.choice(alphabets))
        ch = random_channel(rng, b, k)
        dec = map_decoder(ch) if rng.random() < 0.5 else random_decoder(rng, ch)
        cert = certify_bounds(ch, dec)
        min_fano = min(min_fano, cert.fano_margin)
        min_accmi = min(min_accmi, cert.accmi_margin)
        if not cert.ok:
            violations.append(
                {"trial": t, "b_bits": b, "alphabet": k, "fano_margin": cert.fano_margin, "accmi_margin": cert.accmi_margin}
            )
    eq = equality_checks()
    return {
        "trials": trials,
        "seed": seed,
        "max_bits": max_bits,
        "violations": violations,
        "min_margin_fano": min_fano if trials else None,
        "min_margin_accmi": min_accmi if trials else None,
        "equality_checks": eq,
        "equality_ok": all(v <= 1e-9 for v in eq.values()),
    }
