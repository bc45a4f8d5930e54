"""Synthetic screen-content images, a distortion ladder and corpus writer.

The generated pages stand in for SIQAD/SCID content at desk scale: flat UI
panels, sharp rectangles, glyph-like text strokes and thin grid lines.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import fft, ndimage

from ..errors import ConfigError, SizeError
from .manifest import IMPAIRMENT_DMOS, PRISTINE, DatasetManifest, ImageRecord, save_image, write_manifest

DISTORTION_TYPES = ("GN", "GB", "MB", "CC", "BLOCK")
MAX_LEVELS = 5

# Ordered mild -> severe. The contrast ladder is sorted by |1 - gain|.
LADDERS = {
    "GN": (0.02, 0.05, 0.1, 0.2, 0.3),  # noise std
    "GB": (0.8, 1.5, 2.5, 4.0, 6.0),  # gaussian kernel std, px
    "MB": (3, 7, 11, 15, 21),  # horizontal motion length, px
    "CC": (0.8, 1.25, 0.65, 1.5, 0.5),  # contrast gain about mid-gray
    "BLOCK": (8, 16, 32, 48, 64),  # 8x8 DCT quantization step, 8-bit units
}

SCORE_OFFSETS = {"GN": 5.0, "GB": 0.0, "MB": -5.0, "CC": 2.5, "BLOCK": -2.5}


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _glyphs(rng: np.random.Generator, count: int = 40) -> list[np.ndarray]:
    """Random 7x5 stroke bitmaps built from bars, so they read as letters."""
    glyphs = []
    for _ in range(count):
        g = np.zeros((7, 5), dtype=bool)
        for _ in range(rng.integers(2, 5)):
            kind = rng.integers(3)
            if kind == 0:
                g[:, rng.integers(5)] = True
            elif kind == 1:
                g[rng.integers(7), :] = True
            else:
                r0, c0 = rng.integers(0, 4), rng.integers(0, 3)
                for k in range(4):
                    g[min(r0 + k, 6), min(c0 + k // 2, 4)] = True
        glyphs.append(g)
    return glyphs


def _draw_text(canvas, top, left, bottom, right, color, glyphs, rng, scale):
    gh, gw = 7 * scale, 5 * scale
    line_h = gh + 3 * scale
    y = top + 2
    while y + gh <= bottom - 2:
        x = left + 2
        end = right - 2 - int(rng.integers(0, max(1, (right - left) // 3)))
        while x + gw <= end:
            if rng.random() < 0.15:
                x += gw  # word gap
                continue
            g = glyphs[rng.integers(len(glyphs))]
            block = np.kron(g, np.ones((scale, scale), dtype=bool))
            region = canvas[y:y + gh, x:x + gw]
            region[block] = color
            x += gw + scale
        y += line_h


def synthesize_sci(width: int, height: int, seed: int) -> np.ndarray:
    """Deterministic pseudo screen-content image, H x W x 3 float32 in [0, 1].

    Values are multiples of 1/255, so an 8-bit PNG round trip is lossless.
    """
    if width < 64 or height < 64:
        raise SizeError(f"synthetic images need width, height >= 64 (got {width}x{height})")
    rng = np.random.default_rng(seed)
    light = rng.integers(200, 256, size=3)
    dark = rng.integers(0, 60, size=3)
    palette = rng.integers(0, 256, size=(6, 3))
    canvas = np.empty((height, width, 3), dtype=np.uint8)
    canvas[:] = light
    glyphs = _glyphs(rng)

    # title bar
    bar = max(8, height // 16)
    canvas[:bar] = palette[0]
    _draw_text(canvas, 0, 4, bar, width // 2, light, glyphs, rng, 1)

    n_panels = int(rng.integers(3, 6))
    for p in range(n_panels):
        ph = int(rng.integers(height // 6, height // 2))
        pw = int(rng.integers(width // 5, width // 2))
        top = int(rng.integers(bar, height - ph))
        left = int(rng.integers(0, width - pw))
        kind = p % 4
        fill = palette[1 + p % 5]
        if kind == 0:
            # text panel
            bg = light if rng.random() < 0.5 else np.clip(fill // 4 + 190, 0, 255)
            canvas[top:top + ph, left:left + pw] = bg
            _draw_text(canvas, top, left, top + ph, left + pw, dark, glyphs, rng,
                       int(rng.integers(1, 3)))
        elif kind == 1:
            # flat widget with border
            canvas[top:top + ph, left:left + pw] = fill
            canvas[top:top + ph, [left, left + pw - 1]] = dark
            canvas[[top, top + ph - 1], left:left + pw] = dark
        elif kind == 2:
            # table grid of thin lines
            canvas[top:top + ph, left:left + pw] = light
            step = int(rng.integers(6, 14))
            canvas[top:top + ph:step, left:left + pw] = fill
            canvas[top:top + ph, left:left + pw:step] = fill
        else:
            # smooth pictorial inset
            yy, xx = np.mgrid[0:ph, 0:pw].astype(np.float64)
            f1, f2 = rng.uniform(0.01, 0.08, size=2)
            base = 0.5 + 0.25 * np.sin(f1 * yy + rng.uniform(0, 6)) * np.cos(f2 * xx)
            colors = base[..., None] * fill[None, None, :] + (1 - base[..., None]) * light
            canvas[top:top + ph, left:left + pw] = np.clip(colors, 0, 255).astype(np.uint8)

    return canvas.astype(np.float32) / np.float32(255.0)


def _ladder_value(dtype: str, level: int, num_levels: int):
    if dtype not in LADDERS:
        raise ConfigError(f"unknown distortion type {dtype!r}; known: {DISTORTION_TYPES}")
    if not 1 <= num_levels <= MAX_LEVELS:
        raise ConfigError(f"num_levels must be in 1..{MAX_LEVELS}")
    if not 1 <= level <= num_levels:
        raise ConfigError(f"level {level} outside 1..{num_levels}")
    if num_levels == 1:
        idx = MAX_LEVELS // 2
    else:
        idx = int(round((level - 1) * (MAX_LEVELS - 1) / (num_levels - 1)))
    return LADDERS[dtype][idx]


def _block_quantize(image: np.ndarray, step: float) -> np.ndarray:
    h, w, c = image.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(image * 255.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W = padded.shape[:2]
    blocks = padded.reshape(H // 8, 8, W // 8, 8, c)
    coef = fft.dctn(blocks, axes=(1, 3), norm="ortho")
    coef = np.round(coef / step) * step
    out = fft.idctn(coef, axes=(1, 3), norm="ortho").reshape(H, W, c)
    return out[:h, :w] / 255.0


def apply_distortion(image: np.ndarray, dtype: str, level: int, seed: int = 0,
                     num_levels: int = MAX_LEVELS) -> np.ndarray:
    """Degrade ``image`` with one of GN, GB, MB, CC, BLOCK at ``level`` of ``num_levels``."""
    param = _ladder_value(dtype, level, num_levels)
    x = np.asarray(image, dtype=np.float64)
    if dtype == "GN":
        rng = np.random.default_rng(seed)
        out = x + rng.normal(0.0, param, size=x.shape)
    elif dtype == "GB":
        out = ndimage.gaussian_filter(x, sigma=(param, param, 0), mode="reflect")
    elif dtype == "MB":
        out = ndimage.uniform_filter1d(x, size=int(param), axis=1, mode="reflect")
    elif dtype == "CC":
        out = 0.5 + param * (x - 0.5)
    else:
        out = _block_quantize(x, float(param))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synthetic_score(dtype: str, level: int, num_levels: int) -> float:
    """Monotone level -> DMOS-like target with a small per-type offset."""
    return float(np.clip(100.0 * level / num_levels + SCORE_OFFSETS[dtype], 0.0, 100.0))


def write_synthetic_corpus(out_dir, refs: int = 8, types: Sequence[str] = ("GN", "GB", "CC"),
                           levels: int = 3, size: int = 256, seed: int = 0,
                           name: str = "synthetic", workers: int = 1) -> DatasetManifest:
    """Write pristine + distorted PNGs and ``manifest.csv`` under ``out_dir``.

    Each reference is rendered from its own seed, so ``workers`` only
    changes wall time, never the output.
    """
    types = list(types)
    for t in types:
        _ladder_value(t, 1, levels)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    def render(r: int) -> list[ImageRecord]:
        ref_id = f"ref{r:03d}"
        pristine = synthesize_sci(size, size, _seed(seed, r))
        rel = f"images/{ref_id}.png"
        save_image(out_dir / rel, pristine)
        out = [ImageRecord(rel, ref_id, PRISTINE, 0, None)]
        for ti, t in enumerate(types):
            for lv in range(1, levels + 1):
                img = apply_distortion(pristine, t, lv, _seed(seed, r, ti, lv), num_levels=levels)
                rel = f"images/{ref_id}_{t}_{lv}.png"
                save_image(out_dir / rel, img)
                out.append(ImageRecord(rel, ref_id, t, lv, synthetic_score(t, lv, levels)))
        return out

    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        records = [rec for chunk in pool.map(render, range(refs)) for rec in chunk]
    manifest = DatasetManifest(records, IMPAIRMENT_DMOS, name, out_dir)
    manifest.validate()
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
