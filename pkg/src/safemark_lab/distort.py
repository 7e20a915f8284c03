"""Post-edit distortions and watermark-failure-rate heatmaps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from . import codec
from . import grad as G
from .codec import WatermarkKey
from .editor import Prompt, edit
from .grad import bilinear_matrix
from .parallel import parallel_map
from .trainer import eval_messages

# IJG baseline luminance table
JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

_PARAMS = {
    "rotate": {"angle": (-180.0, 180.0)},
    "gaussian_blur": {"sigma": (0.0, 10.0)},
    "center_crop": {"keep": (0.1, 1.0)},
    "resize_cycle": {"scale": (0.1, 1.0)},
    "color_adjust": {"brightness": (-0.5, 0.5), "contrast": (-0.5, 0.5)},
    "additive_noise": {"sigma": (0.0, 0.5), "seed": (0, 2**63)},
    "jpeg_like": {"quality": (1.0, 100.0)},
}


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in _PARAMS:
            raise ValueError(f"unknown distortion {self.kind!r}; expected one of {sorted(_PARAMS)}")
        allowed = _PARAMS[self.kind]
        for name, value in self.params.items():
            if name not in allowed:
                raise ValueError(f"{self.kind}: unknown parameter {name!r}")
            lo, hi = allowed[name]
            if not lo <= value <= hi:
                raise ValueError(f"{self.kind}: {name}={value} outside [{lo}, {hi}]")
        required = {"color_adjust": (), "additive_noise": ("sigma",)}.get(self.kind, tuple(allowed))
        missing = [r for r in required if r not in self.params]
        if missing:
            raise ValueError(f"{self.kind}: missing parameters {missing}")

    @property
    def label(self) -> str:
        p = self.params
        if self.kind == "color_adjust":
            return f"color_adjust(b={p.get('brightness', 0.0):+g},c={p.get('contrast', 0.0):+g})"
        if self.kind == "additive_noise":
            return f"additive_noise({p['sigma']:g})"
        (name,) = _PARAMS[self.kind]
        return f"{self.kind}({p[name]:g})"

    def to_json(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_json(cls, doc: dict) -> DistortionSpec:
        doc = dict(doc)
        kind = doc.pop("kind")
        return cls(kind, {k: (int(v) if k == "seed" else float(v)) for k, v in doc.items()})


def default_grid() -> list[DistortionSpec]:
    grid = [DistortionSpec("rotate", {"angle": a}) for a in (2.0, 5.0, 10.0)]
    grid += [DistortionSpec("gaussian_blur", {"sigma": s}) for s in (0.5, 1.0, 2.0)]
    grid += [DistortionSpec("center_crop", {"keep": k}) for k in (0.9, 0.75, 0.6)]
    grid += [DistortionSpec("resize_cycle", {"scale": s}) for s in (0.75, 0.5)]
    grid += [DistortionSpec("color_adjust", {"brightness": b}) for b in (0.05, -0.05, 0.15, -0.15)]
    grid += [DistortionSpec("additive_noise", {"sigma": s, "seed": 0}) for s in (0.01, 0.03)]
    grid += [DistortionSpec("jpeg_like", {"quality": q}) for q in (90.0, 70.0, 50.0)]
    return grid


def load_grid(path: str | Path) -> list[DistortionSpec]:
    return [DistortionSpec.from_json(d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------------------
# individual distortions; all take and return (H, W, C) in [0, 1]


def rotate(x: np.ndarray, angle: float, fill: float = 0.5) -> np.ndarray:
    if angle == 0:
        return x.copy()
    h, w, _ = x.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = np.deg2rad(angle)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source location
    sy = np.cos(t) * yy - np.sin(t) * xx + cy
    sx = np.sin(t) * yy + np.cos(t) * xx + cx
    out = np.empty_like(x)
    for c in range(x.shape[2]):
        out[..., c] = ndimage.map_coordinates(x[..., c], [sy, sx], order=1, mode="constant", cval=fill)
    return out


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return x.copy()
    return ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="nearest")


def _resize(x: np.ndarray, h: int, w: int) -> np.ndarray:
    mh, mw = bilinear_matrix(h, x.shape[0]), bilinear_matrix(w, x.shape[1])
    return np.einsum("Hh,hwc,Ww->HWc", mh, x, mw)


def center_crop(x: np.ndarray, keep: float) -> np.ndarray:
    h, w, _ = x.shape
    ch, cw = max(1, round(h * keep)), max(1, round(w * keep))
    if (ch, cw) == (h, w):
        return x.copy()
    top, left = (h - ch) // 2, (w - cw) // 2
    return _resize(x[top : top + ch, left : left + cw], h, w)


def resize_cycle(x: np.ndarray, scale: float) -> np.ndarray:
    h, w, _ = x.shape
    sh, sw = max(1, round(h * scale)), max(1, round(w * scale))
    if (sh, sw) == (h, w):
        return x.copy()
    return _resize(_resize(x, sh, sw), h, w)


def color_adjust(x: np.ndarray, brightness: float = 0.0, contrast: float = 0.0) -> np.ndarray:
    return (x - 0.5) * (1.0 + contrast) + 0.5 + brightness


def additive_noise(x: np.ndarray, sigma: float, seed: int = 0) -> np.ndarray:
    return x + sigma * np.random.default_rng(seed).standard_normal(x.shape)


def jpeg_table(quality: float) -> np.ndarray:
    q = min(max(quality, 1.0), 100.0)
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.maximum(1.0, np.floor((JPEG_LUMA * scale + 50.0) / 100.0))


def _blocks(h: int, w: int):
    for i in range(0, h, 8):
        for j in range(0, w, 8):
            yield slice(i, min(i + 8, h)), slice(j, min(j + 8, w))


def jpeg_like(x: np.ndarray, quality: float, quantize: bool = True) -> np.ndarray:
    """Blockwise 8x8 DCT quantization on the 0-255 scale, every channel with the luma table.

    Edge blocks smaller than 8x8 use the matching corner of the table.
    """
    table = jpeg_table(quality)
    v = x * 255.0 - 128.0
    out = np.empty_like(v)
    h, w, c = x.shape
    for ch in range(c):
        for bi, bj in _blocks(h, w):
            blk = v[bi, bj, ch]
            coef = sfft.dctn(blk, norm="ortho")
            if quantize:
                t = table[: blk.shape[0], : blk.shape[1]]
                coef = np.round(coef / t) * t
            out[bi, bj, ch] = sfft.idctn(coef, norm="ortho")
    return (out + 128.0) / 255.0


def apply_distortion(spec: DistortionSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return np.stack([apply_distortion(spec, xi) for xi in x])
    if x.ndim != 3:
        raise ValueError(f"expected (H,W,C) image, got {x.shape}")
    p = spec.params
    if spec.kind == "rotate":
        y = rotate(x, p["angle"])
    elif spec.kind == "gaussian_blur":
        y = gaussian_blur(x, p["sigma"])
    elif spec.kind == "center_crop":
        y = center_crop(x, p["keep"])
    elif spec.kind == "resize_cycle":
        y = resize_cycle(x, p["scale"])
    elif spec.kind == "color_adjust":
        y = color_adjust(x, p.get("brightness", 0.0), p.get("contrast", 0.0))
    elif spec.kind == "additive_noise":
        y = additive_noise(x, p["sigma"], int(p.get("seed", 0)))
    else:
        y = jpeg_like(x, p["quality"])
    return np.clip(y, 0.0, 1.0)


# ---------------------------------------------------------------------------
# heatmap


@dataclass
class HeatmapReport:
    rows: list[str]
    cols: list[str]
    cells: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["prompt", *self.cols])
        for label, row in zip(self.rows, self.cells):
            wr.writerow([label, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def column(self, label: str) -> np.ndarray:
        return self.cells[:, self.cols.index(label)]

    def to_json(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "cells": self.cells.tolist()}


BASELINE = "none"


def wfr_heatmap(
    theta: G.ParamVector,
    key: WatermarkKey,
    dataset: np.ndarray,
    prompts: list[Prompt],
    grid: list[DistortionSpec],
    seed: int = 0,
) -> HeatmapReport:
    """WFR = 1 - bit accuracy for every (prompt, distortion) cell, plus an undistorted column.

    Images carry the same messages as :func:`safemark_lab.trainer.evaluate` with
    the same ``seed``, so the baseline column equals 1 - safemark_acc there.
    """
    w = eval_messages(key, len(dataset), seed)
    x_wm = codec.embed(key, dataset, w)
    edited = [edit(theta, x_wm, p) for p in prompts]

    def cell(job):
        r, spec = job
        y = edited[r] if spec is None else apply_distortion(spec, edited[r])
        return 1.0 - float((codec.harden(codec.decode_soft(key, y)) == w).mean())

    specs = [None, *grid]
    jobs = [(r, s) for r in range(len(prompts)) for s in specs]
    values = parallel_map(cell, jobs)
    cells = np.array(values).reshape(len(prompts), len(specs))
    return HeatmapReport([p.label for p in prompts], [BASELINE, *(s.label for s in grid)], cells)
