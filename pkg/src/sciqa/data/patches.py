"""Patch tiling and triplet batch sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import SamplingError, SizeError
from .manifest import DatasetManifest

PATCH_SIZE = 32


def patch_grid(height: int, width: int, patch_size: int = PATCH_SIZE) -> tuple[int, int]:
    if height < patch_size or width < patch_size:
        raise SizeError(f"image {height}x{width} is smaller than one {patch_size}x{patch_size} patch")
    return height // patch_size, width // patch_size


def extract_patches(image: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    """Non-overlapping top-left tiling, row-major, as a (P, ps, ps, C) array."""
    image = np.asarray(image)
    rows, cols = patch_grid(image.shape[0], image.shape[1], patch_size)
    crop = image[: rows * patch_size, : cols * patch_size]
    tiles = crop.reshape(rows, patch_size, cols, patch_size, -1).swapaxes(1, 2)
    return tiles.reshape(rows * cols, patch_size, patch_size, -1)


def assemble_patches(patches: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`extract_patches` on the cropped region."""
    p = patches.shape[1]
    grid = patches.reshape(rows, cols, p, p, -1).swapaxes(1, 2)
    return grid.reshape(rows * p, cols * p, -1)


def _gather(image: np.ndarray, cells: np.ndarray, cols: int, patch_size: int) -> np.ndarray:
    out = np.empty((len(cells), patch_size, patch_size, image.shape[2]), dtype=np.float32)
    for k, cell in enumerate(cells):
        y, x = divmod(int(cell), cols)
        out[k] = image[y * patch_size:(y + 1) * patch_size, x * patch_size:(x + 1) * patch_size]
    return out


def draw_cells(rng: np.random.Generator, n_cells: int, n: int) -> np.ndarray:
    return rng.choice(n_cells, size=n, replace=n_cells < n)


@dataclass
class TripletBatch:
    distorted: np.ndarray  # (B, N, ps, ps, 3)
    reference: np.ndarray
    auxiliary: np.ndarray
    labels: np.ndarray  # (B,) int64
    scores: np.ndarray  # (B,) float32
    distorted_refs: list
    reference_refs: list
    auxiliary_refs: list
    levels: np.ndarray
    distorted_paths: list

    @property
    def size(self) -> int:
        return self.distorted.shape[0]

    @property
    def patches_per_image(self) -> int:
        return self.distorted.shape[1]

    @property
    def group_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.size), self.patches_per_image)


def sample_triplet_batch(manifest: DatasetManifest, B: int, N: int = 16, seed: int = 0,
                         indices: Optional[Sequence[int]] = None,
                         class_names: Optional[Sequence[str]] = None,
                         patch_size: int = PATCH_SIZE) -> TripletBatch:
    """Draw B (distorted, reference, auxiliary) triplets with N patches per image.

    ``indices`` selects distorted records (positions within ``manifest.distorted``);
    otherwise B distinct ones are drawn. Distorted and reference patches share
    locations; auxiliary locations are drawn independently.
    """
    rng = np.random.default_rng(seed)
    distorted = manifest.distorted
    pristine = manifest.pristine
    if len({r.reference_id for r in pristine}) < 2:
        raise SamplingError("need at least two reference contents to draw auxiliary images")
    if indices is None:
        if B > len(distorted):
            raise SamplingError(f"batch of {B} exceeds {len(distorted)} distorted images")
        indices = rng.choice(len(distorted), size=B, replace=False)
    indices = list(indices)
    B = len(indices)
    classes = list(class_names) if class_names is not None else manifest.distortion_types
    label_of = {c: i for i, c in enumerate(classes)}

    shape = (B, N, patch_size, patch_size, 3)
    d_out, r_out, a_out = (np.empty(shape, dtype=np.float32) for _ in range(3))
    labels = np.empty(B, dtype=np.int64)
    scores = np.empty(B, dtype=np.float32)
    levels = np.empty(B, dtype=np.int64)
    d_refs, r_refs, a_refs, paths = [], [], [], []
    for i, idx in enumerate(indices):
        rec = distorted[idx]
        ref = manifest.pristine_of(rec.reference_id)
        candidates = [p for p in pristine if p.reference_id != rec.reference_id]
        aux = candidates[rng.integers(len(candidates))]

        img_d = manifest.load_image(rec)
        img_r = manifest.load_image(ref)
        img_a = manifest.load_image(aux)
        rows = min(img_d.shape[0], img_r.shape[0]) // patch_size
        cols = min(img_d.shape[1], img_r.shape[1]) // patch_size
        if rows == 0 or cols == 0:
            raise SizeError(f"{rec.image_path}: smaller than one patch")
        cells = draw_cells(rng, rows * cols, N)
        d_out[i] = _gather(img_d, cells, cols, patch_size)
        r_out[i] = _gather(img_r, cells, cols, patch_size)
        a_rows, a_cols = patch_grid(img_a.shape[0], img_a.shape[1], patch_size)
        a_out[i] = _gather(img_a, draw_cells(rng, a_rows * a_cols, N), a_cols, patch_size)

        if rec.distortion_type not in label_of:
            raise SamplingError(f"distortion type {rec.distortion_type!r} not in class list {classes}")
        labels[i] = label_of[rec.distortion_type]
        scores[i] = rec.score
        levels[i] = rec.distortion_level
        d_refs.append(rec.reference_id)
        r_refs.append(ref.reference_id)
        a_refs.append(aux.reference_id)
        paths.append(rec.image_path)
    return TripletBatch(d_out, r_out, a_out, labels, scores, d_refs, r_refs, a_refs, levels, paths)
