"""Differentiable toy editor: depthwise blur, per-channel color affine, low-res residual.

One editor holds a parameter block per prompt::

    out = clamp01(upsample(residual) + gain * conv(x, kernel) + bias + noise_amp * noise)

The reference editor (theta0) is built from each prompt's style; the trainable
editor starts as an exact copy of it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G


@dataclass(frozen=True)
class Prompt:
    id: int
    label: str
    blur_sigma: float = 0.0
    gain: tuple[float, ...] = (1.0, 1.0, 1.0)
    bias: tuple[float, ...] = (0.0, 0.0, 0.0)
    vignette: float = 0.0
    residual_jitter: float = 0.0
    noise_amp: float = 0.0

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "style": {
                "blur_sigma": self.blur_sigma,
                "gain": list(self.gain),
                "bias": list(self.bias),
                "vignette": self.vignette,
                "residual_jitter": self.residual_jitter,
                "noise_amp": self.noise_amp,
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> Prompt:
        style = dict(doc.get("style", {}))
        allowed = {"blur_sigma", "gain", "bias", "vignette", "residual_jitter", "noise_amp"}
        unknown = set(style) - allowed
        if unknown:
            raise ValueError(f"prompt {doc.get('label')!r}: unknown style keys {sorted(unknown)}")
        for k in ("gain", "bias"):
            if k in style:
                style[k] = tuple(float(v) for v in style[k])
        return cls(int(doc["id"]), str(doc["label"]), **style)


# blur strength calibrated so direct editing leaves roughly 0.6-0.8 bit accuracy
PROMPT_LIBRARY: dict[str, Prompt] = {
    "identity": Prompt(0, "identity"),
    "blur+sepia": Prompt(
        1, "blur+sepia", blur_sigma=1.2, gain=(0.9, 0.8, 0.6), bias=(0.1, 0.07, 0.03), vignette=0.15, residual_jitter=0.01
    ),
    "soft-focus+cool": Prompt(
        2, "soft-focus+cool", blur_sigma=1.1, gain=(0.8, 0.9, 1.0), bias=(0.02, 0.05, 0.1), vignette=0.1, residual_jitter=0.01
    ),
}

DEFAULT_PROMPTS = ("blur+sepia", "soft-focus+cool")


def prompt_table(labels=DEFAULT_PROMPTS) -> list[Prompt]:
    """Library prompts renumbered 0..n-1 in the given order."""
    out = []
    for i, label in enumerate(labels):
        if label not in PROMPT_LIBRARY:
            raise ValueError(f"unknown prompt {label!r}; library has {sorted(PROMPT_LIBRARY)}")
        p = PROMPT_LIBRARY[label]
        out.append(Prompt(i, p.label, p.blur_sigma, p.gain, p.bias, p.vignette, p.residual_jitter, p.noise_amp))
    return out


def load_prompt_table(path: str | Path) -> list[Prompt]:
    doc = json.loads(Path(path).read_text())
    table = [Prompt.from_json(d) for d in doc]
    if [p.id for p in table] != list(range(len(table))):
        raise ValueError("prompt ids must be 0..n-1 in order")
    return table


def save_prompt_table(table: list[Prompt], path: str | Path) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in table], indent=2) + "\n")


@dataclass(frozen=True)
class EditorGeometry:
    channels: int = 3
    kernel: int = 5
    residual: tuple[int, int] = (8, 8)

    def __post_init__(self) -> None:
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel size must be a positive odd integer")

    def segment_shapes(self, n_prompts: int) -> dict[str, tuple[int, ...]]:
        c, k = self.channels, self.kernel
        out = {}
        for i in range(n_prompts):
            out[f"p{i}/kernel"] = (c, k, k)
            out[f"p{i}/gain"] = (c,)
            out[f"p{i}/bias"] = (c,)
            out[f"p{i}/residual"] = (*self.residual, c)
        return out


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    k = np.zeros((size, size))
    if sigma <= 0:
        k[size // 2, size // 2] = 1.0
        return k
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _fit(values: tuple[float, ...], c: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == c:
        return arr
    if c == 1:
        return np.array([arr.mean()])
    raise ValueError(f"style vector of length {arr.size} for {c} channels")


def build_reference_editor(prompts: list[Prompt], seed: int, geometry: EditorGeometry = EditorGeometry()) -> G.ParamVector:
    """Frozen editor parameters theta0, deterministic in (prompts, seed)."""
    if not prompts:
        raise ValueError("prompt table is empty")
    c = geometry.channels
    rh, rw = geometry.residual
    yy, xx = np.meshgrid(np.linspace(-1, 1, rh), np.linspace(-1, 1, rw), indexing="ij")
    radial = (yy**2 + xx**2) / 2
    segs = {}
    for p in prompts:
        rng = np.random.default_rng([seed, p.id])
        kern = gaussian_kernel(p.blur_sigma, geometry.kernel)
        residual = np.repeat((-p.vignette * radial)[..., None], c, axis=2)
        if p.residual_jitter > 0:
            residual = residual + p.residual_jitter * rng.standard_normal(residual.shape)
        segs[f"p{p.id}/kernel"] = np.repeat(kern[None], c, axis=0)
        segs[f"p{p.id}/gain"] = _fit(p.gain, c)
        segs[f"p{p.id}/bias"] = _fit(p.bias, c)
        segs[f"p{p.id}/residual"] = residual
    return G.ParamVector.from_segments(segs)


def param_hash(theta: G.ParamVector) -> str:
    return hashlib.sha256(theta.values.tobytes()).hexdigest()


def _noise(noise_seed: int, shape) -> np.ndarray:
    return np.random.default_rng(noise_seed).standard_normal(shape)


def edit_var(tape: G.Tape, theta: G.ParamVector, x: np.ndarray | G.Var, prompt: Prompt, noise_seed: int = 0) -> G.Var:
    """Record the editor for ``prompt`` on ``tape``; ``x`` is (H,W,C) or (N,H,W,C)."""
    xv = x if isinstance(x, G.Var) else tape.const(x)
    key = f"p{prompt.id}"
    try:
        theta.segment(f"{key}/kernel")
    except KeyError:
        raise ValueError(f"prompt id {prompt.id} ({prompt.label!r}) not in editor parameters") from None
    h, w = xv.shape[-3], xv.shape[-2]
    y = G.conv2d_same(xv, tape.param(theta, f"{key}/kernel"))
    y = G.per_channel_affine(y, tape.param(theta, f"{key}/gain"), tape.param(theta, f"{key}/bias"))
    y = G.add(y, G.bilinear_upsample(tape.param(theta, f"{key}/residual"), (h, w)))
    if prompt.noise_amp > 0:
        y = G.add(y, tape.const(prompt.noise_amp * _noise(noise_seed, xv.shape)))
    return G.clamp01(y)


def edit(theta: G.ParamVector, x: np.ndarray, prompt: Prompt, noise_seed: int = 0) -> np.ndarray:
    return edit_var(G.Tape(), theta, x, prompt, noise_seed).value


@dataclass
class Editor:
    """Frozen reference parameters plus the prompt table they were built from."""

    prompts: list[Prompt]
    seed: int = 0
    geometry: EditorGeometry = field(default_factory=EditorGeometry)

    def __post_init__(self) -> None:
        self.theta0 = build_reference_editor(self.prompts, self.seed, self.geometry)
        self.theta0.values.setflags(write=False)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return self.geometry.segment_shapes(len(self.prompts))

    def trainable(self) -> G.ParamVector:
        return self.theta0.with_values(self.theta0.values.copy())

    def load_theta(self, path: str | Path) -> G.ParamVector:
        theta = G.ParamVector.load(path, self.shapes())
        if [s.name for s in theta.layout] != self.theta0.names() or theta.values.size != self.theta0.values.size:
            raise ValueError(f"{path}: checkpoint layout does not match the editor geometry")
        return theta
