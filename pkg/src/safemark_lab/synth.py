"""Procedural test images and binary PPM/PGM I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

KINDS = ("gradient-field", "gaussian-blobs", "checker-texture", "band-noise")


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    kind: str
    height: int = 32
    width: int = 32
    channels: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown image kind {self.kind!r}; expected one of {KINDS}")
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return yy, xx


def _gradient_field(rng, h, w, c):
    yy, xx = _grid(h, w)
    out = np.empty((h, w, c))
    for ch in range(c):
        ang = rng.uniform(0, 2 * np.pi)
        f = np.cos(ang) * xx + np.sin(ang) * yy
        f = f + 0.15 * np.sin(2 * np.pi * (rng.uniform(0.5, 2) * xx + rng.uniform(0, 1)))
        # fine ripple keeps some high-band energy
        f = f + 0.01 * np.sin(2 * np.pi * (0.4 * w * xx + 0.3 * h * yy))
        out[..., ch] = f
    lo, hi = out.min(), out.max()
    f = 2 * (out - lo) / (hi - lo) - 1
    # odd cubic keeps the endpoints at exactly 0 and 1 but flattens mid-tones
    return np.clip(0.5 + 0.5 * f**3, 0.0, 1.0)


def _blobs(rng, h, w, c):
    yy, xx = _grid(h, w)
    base = rng.uniform(0.35, 0.65, size=c)
    out = np.broadcast_to(base, (h, w, c)).copy()
    for _ in range(int(rng.integers(4, 9))):
        cy, cx = rng.uniform(0, 1, size=2)
        s = rng.uniform(0.03, 0.2)
        amp = rng.uniform(-0.25, 0.25, size=c)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        out += g[..., None] * amp
    # faint grain so the top band is never empty
    out += 0.015 * np.sin(2 * np.pi * (0.35 * w * xx + 0.4 * h * yy))[..., None]
    return np.clip(out, 0, 1)


def _checker(rng, h, w, c):
    yy, xx = _grid(h, w)
    cell = int(rng.integers(2, 7))
    iy = (np.arange(h) // cell)[:, None]
    ix = (np.arange(w) // cell)[None, :]
    board = ((iy + ix) % 2).astype(float) - 0.5
    base = rng.uniform(0.35, 0.65, size=c)
    shade = 0.1 * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 1.5) + yy * rng.uniform(0.5, 1.5)))
    contrast = rng.uniform(0.08, 0.2)
    out = base + (contrast * board + shade)[..., None] * rng.uniform(0.7, 1.0, size=c)
    return np.clip(out, 0, 1)


def _band_noise(rng, h, w, c):
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    r = np.sqrt(fx**2 + fy**2)
    # upper cutoff above 0.25 so the top dyadic band is never empty
    lo, hi = 0.04, rng.uniform(0.3, 0.45)
    mask = ((r >= lo) & (r <= hi)).astype(float) + 0.3 * (r < lo) * (r > 0)
    out = np.empty((h, w, c))
    for ch in range(c):
        spec = np.fft.fft2(rng.standard_normal((h, w))) * mask
        f = np.real(np.fft.ifft2(spec))
        out[..., ch] = f / (f.std() + 1e-12)
    base = rng.uniform(0.4, 0.6, size=c)
    return np.clip(base + 0.1 * out, 0, 1)


_MAKERS = {
    "gradient-field": _gradient_field,
    "gaussian-blobs": _blobs,
    "checker-texture": _checker,
    "band-noise": _band_noise,
}


def generate(spec: SynthSpec) -> np.ndarray:
    """Deterministic (H, W, C) image in [0, 1] for ``spec``."""
    rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind)])
    img = _MAKERS[spec.kind](rng, spec.height, spec.width, spec.channels)
    return np.ascontiguousarray(img, dtype=np.float64)


def dataset_specs(n: int, seed: int, size: tuple[int, int] = (32, 32), channels: int = 3, kinds=KINDS) -> list[SynthSpec]:
    """``n`` specs cycling through ``kinds``; image i uses seed ``seed * 100003 + i``."""
    return [SynthSpec(kinds[i % len(kinds)], size[0], size[1], channels, seed * 100003 + i) for i in range(n)]


def make_dataset(n: int, seed: int, size: tuple[int, int] = (32, 32), channels: int = 3, kinds=KINDS) -> np.ndarray:
    return np.stack([generate(s) for s in dataset_specs(n, seed, size, channels, kinds)])


def band_energy(img: np.ndarray, n_bands: int = 3) -> np.ndarray:
    """Fraction of AC power in dyadic radial frequency bands, lowest band first."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    power = sum(np.abs(np.fft.fft2(img[..., c] - img[..., c].mean())) ** 2 for c in range(img.shape[2]))
    r = np.sqrt(np.fft.fftfreq(h)[:, None] ** 2 + np.fft.fftfreq(w)[None, :] ** 2)
    edges = [0.5 / 2**k for k in range(n_bands, -1, -1)]
    edges[0] = 0.0
    total = power.sum()
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (r > lo) & (r <= hi) if lo > 0 else (r > 0) & (r <= hi)
        out.append(power[sel].sum() / total)
    out[-1] += power[r > 0.5].sum() / total
    return np.array(out)


# ---------------------------------------------------------------------------
# binary PPM (P6) / PGM (P5), maxval 255


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise RasterError(f"truncated header at byte {start}")
    return data[start:pos], pos


def decode_ppm(data: bytes) -> np.ndarray:
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise RasterError(f"unsupported magic {magic!r} at byte 0")
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise RasterError(f"malformed header field {tok!r} at byte {start}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise RasterError(f"maxval must be 255, got {maxval} (header ends at byte {pos})")
    if width < 1 or height < 1:
        raise RasterError(f"bad image size {width}x{height}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise RasterError(f"missing separator after header at byte {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise RasterError(f"truncated payload: expected {need} bytes from byte {pos}, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr.astype(np.float64) / 255.0


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {c}")
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + q.tobytes()


def read_ppm(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        return decode_ppm(path.read_bytes())
    except RasterError as exc:
        raise RasterError(f"{path}: {exc}") from None


def write_ppm(img: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_ppm(img))


def write_dataset(specs: list[SynthSpec], out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, spec in enumerate(specs):
        name = f"{i:03d}.ppm" if spec.channels == 3 else f"{i:03d}.pgm"
        write_ppm(generate(spec), out / name)
        entries.append({"file": name, **asdict(spec)})
    manifest = {"count": len(specs), "images": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
