"""Dataset manifests: CSV ingestion, score normalization and content splits."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from ..errors import ConfigError, DegenerateRangeError, IntegrityError, ManifestParseError

PRISTINE = "PRISTINE"
QUALITY_MOS = "quality_mos"
IMPAIRMENT_DMOS = "impairment_dmos"
POLARITIES = (QUALITY_MOS, IMPAIRMENT_DMOS)
log = logging.getLogger(__name__)

HEADER = ("image_path", "reference_id", "distortion_type", "distortion_level", "score")


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    reference_id: str
    distortion_type: str = PRISTINE
    distortion_level: int = 0
    score: Optional[float] = None

    @property
    def is_pristine(self) -> bool:
        return self.distortion_type == PRISTINE

    def check(self) -> None:
        if self.distortion_level < 0:
            raise IntegrityError(f"{self.image_path}: negative distortion level")
        if (self.distortion_level == 0) != self.is_pristine:
            raise IntegrityError(
                f"{self.image_path}: level 0 must coincide with {PRISTINE} "
                f"(got {self.distortion_type}, {self.distortion_level})"
            )
        if not self.is_pristine and self.score is None:
            raise IntegrityError(f"{self.image_path}: distorted record without score")


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    score_polarity: str = IMPAIRMENT_DMOS
    name: str = "dataset"
    base_dir: Optional[Path] = field(default=None, compare=False)
    normalized: bool = False  # scores already mapped onto [0, 100]

    def __post_init__(self):
        if self.score_polarity not in POLARITIES:
            raise ConfigError(f"unknown score polarity {self.score_polarity!r}")

    def __len__(self):
        return len(self.records)

    @property
    def pristine(self) -> list[ImageRecord]:
        return [r for r in self.records if r.is_pristine]

    @property
    def distorted(self) -> list[ImageRecord]:
        return [r for r in self.records if not r.is_pristine]

    @property
    def reference_ids(self) -> list[str]:
        """Distinct reference ids in order of first appearance."""
        return list(dict.fromkeys(r.reference_id for r in self.records))

    @property
    def distortion_types(self) -> list[str]:
        return list(dict.fromkeys(r.distortion_type for r in self.distorted))

    def validate(self) -> None:
        for r in self.records:
            r.check()
        known = {r.reference_id for r in self.pristine}
        for r in self.distorted:
            if r.reference_id not in known:
                raise IntegrityError(
                    f"{r.image_path}: reference_id {r.reference_id!r} has no pristine record"
                )

    def resolve(self, record: ImageRecord) -> Path:
        path = Path(record.image_path)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return path

    def load_image(self, record: ImageRecord) -> np.ndarray:
        return load_image(str(self.resolve(record)))

    def pristine_of(self, reference_id: str) -> ImageRecord:
        for r in self.records:
            if r.is_pristine and r.reference_id == reference_id:
                return r
        raise IntegrityError(f"no pristine record for reference {reference_id!r}")

    def subset(self, reference_ids: Iterable[str], name: Optional[str] = None) -> "DatasetManifest":
        keep = set(reference_ids)
        return DatasetManifest(
            [r for r in self.records if r.reference_id in keep],
            self.score_polarity,
            name or self.name,
            self.base_dir,
            self.normalized,
        )

    def relocated(self, new_base) -> "DatasetManifest":
        """Same records with image paths rewritten relative to ``new_base``."""
        new_base = Path(new_base).resolve()
        records = [replace(r, image_path=Path(os.path.relpath(self.resolve(r).resolve(), new_base)).as_posix())
                   for r in self.records]
        return DatasetManifest(records, self.score_polarity, self.name, new_base, self.normalized)


@lru_cache(maxsize=512)
def _cached_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    arr.setflags(write=False)
    return arr


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB image as a read-only H x W x 3 float32 array in [0, 1]."""
    return _cached_image(str(path))


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _parse_meta(line: str, meta: dict) -> None:
    body = line.lstrip("#").strip()
    if ":" in body:
        key, value = body.split(":", 1)
        meta[key.strip()] = value.strip()


def parse_manifest(text: str, name: str = "dataset", score_polarity: Optional[str] = None,
                   base_dir=None) -> DatasetManifest:
    """Parse manifest CSV text.

    Leading ``# key: value`` lines may carry ``name``, ``score_polarity``
    and ``normalized`` (scores already on the [0, 100] scale).
    Line numbers in errors are 1-based and count those comment lines.
    """
    lines = text.splitlines()
    meta: dict = {}
    start = 0
    while start < len(lines) and (lines[start].startswith("#") or not lines[start].strip()):
        if lines[start].startswith("#"):
            _parse_meta(lines[start], meta)
        start += 1
    if start >= len(lines):
        raise ManifestParseError("empty manifest (no header)", line=start + 1 if lines else 1)

    reader = csv.reader(io.StringIO("\n".join(lines[start:])))
    header = tuple(h.strip() for h in next(reader))
    if header != HEADER:
        raise ManifestParseError(f"bad header {header!r}, expected {HEADER!r}", line=start + 1)

    records = []
    for offset, row in enumerate(reader, start=2):
        lineno = start + offset
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(HEADER):
            raise ManifestParseError(f"expected {len(HEADER)} fields, got {len(row)}", line=lineno)
        path, ref, dtype, level, score = (c.strip() for c in row)
        if not path or not ref or not dtype:
            raise ManifestParseError("empty image_path/reference_id/distortion_type", line=lineno)
        try:
            level_i = int(level)
        except ValueError:
            raise ManifestParseError(f"distortion_level {level!r} is not an integer", line=lineno)
        if score == "":
            score_f = None
        else:
            try:
                score_f = float(score)
            except ValueError:
                raise ManifestParseError(f"score {score!r} is not a number", line=lineno)
            if not math.isfinite(score_f):
                raise ManifestParseError(f"score {score!r} is not finite", line=lineno)
        rec = ImageRecord(path, ref, dtype, level_i, score_f)
        if (level_i == 0) != (dtype == PRISTINE):
            raise ManifestParseError(f"level 0 must coincide with {PRISTINE}", line=lineno)
        if dtype != PRISTINE and score_f is None:
            raise ManifestParseError("distorted row without score", line=lineno)
        records.append(rec)

    if not records:
        raise ManifestParseError("manifest has a header but no records", line=start + 2)

    manifest = DatasetManifest(
        records,
        score_polarity or meta.get("score_polarity", IMPAIRMENT_DMOS),
        meta.get("name", name),
        Path(base_dir) if base_dir is not None else None,
        meta.get("normalized", "false").lower() == "true",
    )
    manifest.validate()
    return manifest


def load_manifest(path, score_polarity: Optional[str] = None) -> DatasetManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    manifest = parse_manifest(text, name=path.stem, score_polarity=score_polarity,
                              base_dir=path.parent)
    missing = [r.image_path for r in manifest.records if not manifest.resolve(r).exists()]
    if missing:
        # tolerated until the image is actually read
        log.warning(
            "%d image(s) in %s are not readable, e.g. %s", len(missing), path, missing[0]
        )
    return manifest


def format_manifest(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    buf.write(f"# name: {manifest.name}\n")
    buf.write(f"# score_polarity: {manifest.score_polarity}\n")
    if manifest.normalized:
        buf.write("# normalized: true\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for r in manifest.records:
        writer.writerow([
            r.image_path, r.reference_id, r.distortion_type, r.distortion_level,
            "" if r.score is None else repr(float(r.score)),
        ])
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(format_manifest(manifest), encoding="utf-8")


def normalize_scores(manifest: DatasetManifest) -> DatasetManifest:
    """Map distorted-record scores affinely onto [0, 100], higher meaning worse.

    Quality MOS (higher = better) is negated first so the output is DMOS-like.
    Already-normalized manifests (e.g. written splits) pass through unchanged.
    """
    if manifest.normalized:
        return manifest
    scored = [r.score for r in manifest.records if r.score is not None]
    values = np.asarray(scored, dtype=np.float64)
    if values.size < 2 or values.min() == values.max():
        raise DegenerateRangeError("need at least two distinct scores to normalize")
    sign = -1.0 if manifest.score_polarity == QUALITY_MOS else 1.0
    lo, hi = (sign * values).min(), (sign * values).max()

    def remap(s):
        return float(np.clip(100.0 * (sign * s - lo) / (hi - lo), 0.0, 100.0))

    records = [r if r.score is None else replace(r, score=remap(r.score)) for r in manifest.records]
    return DatasetManifest(records, IMPAIRMENT_DMOS, manifest.name, manifest.base_dir, normalized=True)


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share; leftovers go to the first (training) share."""
    counts = [int(math.floor(n * r + 1e-9)) for r in ratios]
    counts[0] += n - sum(counts)
    return counts


def split_by_reference(manifest: DatasetManifest, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Partition by reference content into (train, val, test) manifests."""
    ratios = tuple(float(r) for r in ratios)
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios {ratios} must be non-negative and sum to 1")
    refs = sorted(manifest.reference_ids)
    if len(refs) < 5:
        raise ConfigError(f"need at least 5 references to split, got {len(refs)}")
    order = np.random.default_rng(seed).permutation(len(refs))
    shuffled = [refs[i] for i in order]
    counts = split_counts(len(refs), ratios)
    out, pos = [], 0
    for suffix, c in zip(("train", "val", "test"), counts):
        out.append(manifest.subset(shuffled[pos:pos + c], name=f"{manifest.name}-{suffix}"))
        pos += c
    return tuple(out)
