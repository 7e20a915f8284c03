"""Keyed spread-spectrum watermark: a frozen, differentiable encoder/decoder pair.

Each bit b owns a ±1 pattern P_b over the full image. Embedding adds
``(alpha / sqrt(B)) * sum_b (2 w_b - 1) P_b``; decoding correlates the
mean-removed image against every pattern and squashes with a sigmoid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import special

from . import grad as G

# default geometry-independent key parameters
DEFAULT_BITS = 32
DEFAULT_ALPHA = 0.06
DEFAULT_BETA = 400.0


@dataclass(frozen=True)
class WatermarkKey:
    seed: int = 0
    b_bits: int = DEFAULT_BITS
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self) -> None:
        if self.b_bits < 1:
            raise ValueError("b_bits must be positive")
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("alpha must be >= 0 and beta > 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def patterns(self, shape: tuple[int, int, int]) -> np.ndarray:
        """(B, H, W, C) array of ±1 patterns for an image geometry (read-only)."""
        return _patterns(self.seed, self.b_bits, tuple(int(s) for s in shape))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> WatermarkKey:
        unknown = set(doc) - {"seed", "b_bits", "alpha", "beta"}
        if unknown:
            raise ValueError(f"unknown key fields {sorted(unknown)}")
        return cls(int(doc["seed"]), int(doc["b_bits"]), float(doc["alpha"]), float(doc["beta"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> WatermarkKey:
        return cls.from_json(json.loads(Path(path).read_text()))


def orthogonality_bound(n: int) -> float:
    return 4.0 / np.sqrt(n)


@lru_cache(maxsize=32)
def _patterns(seed: int, b_bits: int, shape: tuple[int, int, int]) -> np.ndarray:
    n = int(np.prod(shape))
    rng = np.random.default_rng([seed, *shape, b_bits])
    bound = orthogonality_bound(n) * n
    rows: list[np.ndarray] = []
    while len(rows) < b_bits:
        cand = rng.integers(0, 2, size=n, dtype=np.int8) * 2 - 1
        # redraw the rare candidate that correlates too strongly with an earlier one
        if rows and np.abs(np.stack(rows).astype(np.int64) @ cand).max() > bound:
            continue
        rows.append(cand)
    out = np.stack(rows).astype(np.float64).reshape((b_bits, *shape))
    out.setflags(write=False)
    return out


def _message(key: WatermarkKey, w) -> np.ndarray:
    w = np.asarray(w)
    if w.shape[-1] != key.b_bits:
        raise ValueError(f"message has {w.shape[-1]} bits, key expects {key.b_bits}")
    if not np.isin(w, (0, 1)).all():
        raise ValueError("message bits must be 0 or 1")
    return w.astype(np.float64)


def _geometry(x: np.ndarray) -> tuple[int, int, int]:
    if x.ndim == 3:
        return x.shape
    if x.ndim == 4:
        return x.shape[1:]
    raise ValueError(f"expected (H,W,C) or (N,H,W,C) image, got {x.shape}")


def watermark_signal(key: WatermarkKey, w, shape: tuple[int, int, int]) -> np.ndarray:
    """Unclamped additive pattern for message(s) ``w``."""
    w = _message(key, w)
    signs = 2 * w - 1
    return (key.alpha / np.sqrt(key.b_bits)) * np.tensordot(signs, key.patterns(shape), axes=([-1], [0]))


def embed(key: WatermarkKey, x: np.ndarray, w) -> np.ndarray:
    """Watermarked copy of ``x`` (single image or batch with a message per image)."""
    x = np.asarray(x, dtype=np.float64)
    shape = _geometry(x)
    w = _message(key, w)
    if x.ndim == 4 and w.shape != (x.shape[0], key.b_bits):
        raise ValueError(f"batch of {x.shape[0]} images needs messages of shape ({x.shape[0]}, {key.b_bits}), got {w.shape}")
    if x.ndim == 3 and w.shape != (key.b_bits,):
        raise ValueError(f"single image needs a message of shape ({key.b_bits},), got {w.shape}")
    return np.clip(x + watermark_signal(key, w, shape), 0.0, 1.0)


def decode_logits(key: WatermarkKey, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shape = _geometry(x)
    n = int(np.prod(shape))
    axes = tuple(range(x.ndim - 3, x.ndim))
    centered = x - x.mean(axis=axes, keepdims=True)
    flat = centered.reshape(-1, n) @ key.patterns(shape).reshape(key.b_bits, n).T
    return key.beta * flat.reshape(x.shape[:-3] + (key.b_bits,)) / n


def decode_soft(key: WatermarkKey, x: np.ndarray) -> np.ndarray:
    z = decode_logits(key, x)
    return special.expit(z)


def decode_soft_var(key: WatermarkKey, x: G.Var) -> G.Var:
    """Differentiable decoder on the tape; same arithmetic as :func:`decode_soft`."""
    shape = _geometry(x.value)
    n = int(np.prod(shape))
    axes = tuple(range(x.value.ndim - 3, x.value.ndim))
    centered = G.sub(x, G.mean(x, axis=axes, keepdims=True))
    corr = G.inner_product(centered, key.patterns(shape))
    return G.sigmoid(G.scalar_mul(corr, key.beta / n))


def harden(soft) -> np.ndarray:
    """Threshold at 0.5; an exact tie decodes to 0."""
    return (np.asarray(soft) > 0.5).astype(np.int64)


def _pair(w, w_hat) -> tuple[np.ndarray, np.ndarray]:
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w.shape != w_hat.shape:
        raise ValueError(f"length mismatch: {w.shape} vs {w_hat.shape}")
    return w, w_hat


def bit_accuracy(w, w_hard) -> float:
    w, w_hard = _pair(w, w_hard)
    return float((w == w_hard).mean())


def soft_accuracy(w, w_soft) -> float:
    w, w_soft = _pair(w, w_soft)
    return float(np.mean(1.0 - (w_soft - w) ** 2))


def soft_accuracy_var(w: np.ndarray, w_soft: G.Var) -> G.Var:
    err = G.sub(w_soft, w_soft.tape.const(np.asarray(w, dtype=np.float64)))
    return G.sub(w_soft.tape.const(1.0), G.mean(G.square(err)))


def random_messages(rng: np.random.Generator, n: int, b_bits: int) -> np.ndarray:
    return rng.integers(0, 2, size=(n, b_bits))


def message_to_hex(w) -> str:
    """Most significant (first) bit first; length padded up to a whole nibble."""
    bits = [int(b) for b in np.asarray(w).ravel()]
    pad = (-len(bits)) % 4
    bits = bits + [0] * pad
    return "".join(f"{int(''.join(map(str, bits[i:i + 4])), 2):x}" for i in range(0, len(bits), 4))


def message_from_hex(text: str, b_bits: int) -> np.ndarray:
    text = text.strip().lower().removeprefix("0x")
    if len(text) * 4 < b_bits:
        raise ValueError(f"hex string too short for {b_bits} bits")
    bits = [int(c) for ch in text for c in f"{int(ch, 16):04b}"]
    if any(bits[b_bits:]):
        raise ValueError("nonzero padding bits beyond message length")
    return np.array(bits[:b_bits], dtype=np.int64)
