"""Datasets on disk: ``manifest.csv`` plus binary PGM/PPM rasters.

The manifest header is ``path,label,group_id``; paths are relative to the
dataset root and label ``-1`` marks unlabeled images. Rasters are P5
(grayscale) or P6 (RGB) with maxval 255, written in the canonical header
form ``P5\\n<w> <h>\\n255\\n``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from protomoco import rng as rngmod
from protomoco.augment import bilinear_resize
from protomoco.fewshot import LabeledSample

MANIFEST = "manifest.csv"
HEADER = ["path", "label", "group_id"]


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    group_id: str


def _header_tokens(raw: bytes, path) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise DatasetError(f"{path}: truncated PNM header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Decode a P5/P6 file into a uint8 array of shape C×H×W."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read raster {path}: {exc}") from exc
    tokens, offset = _header_tokens(raw, path)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: unsupported raster type {magic!r} (need P5 or P6)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed PNM header") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: maxval {maxval} unsupported (need 255)")
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    body = raw[offset:offset + expected]
    if len(body) != expected or width < 1 or height < 1:
        raise DatasetError(f"{path}: raster holds {len(body)} bytes, header promises {expected}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


def write_pnm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Encode a uint8 C×H×W array (C = 1 or 3) as P5/P6."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[0] not in (1, 3):
        raise ValueError(f"expected uint8 C×H×W with C in (1, 3), got {pixels.dtype} {pixels.shape}")
    c, h, w = pixels.shape
    magic = "P5" if c == 1 else "P6"
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(pixels.transpose(1, 2, 0)).tobytes())


def to_unit(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / np.float32(255.0))


def read_manifest(root: str | os.PathLike) -> list[ManifestRecord]:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEADER:
            raise DatasetError(f"{path}: line 1: header must be {','.join(HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DatasetError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            rel, label_text, group = row
            try:
                label = int(label_text)
            except ValueError:
                raise DatasetError(f"{path}: line {lineno}: label {label_text!r} is not an integer") from None
            if label < -1 or not rel or not group:
                raise DatasetError(f"{path}: line {lineno}: malformed record {row}")
            resolved = (root / rel).resolve()
            if root.resolve() not in resolved.parents:
                raise DatasetError(f"{path}: line {lineno}: path {rel!r} escapes the dataset root")
            if rel in seen:
                raise DatasetError(f"{path}: line {lineno}: duplicate path {rel!r}")
            seen.add(rel)
            records.append(ManifestRecord(rel, label, group))
    return records


def write_manifest(root: str | os.PathLike, records) -> None:
    with (Path(root) / MANIFEST).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for r in records:
            writer.writerow([r.path, r.label, r.group_id])


def load_dataset(root: str | os.PathLike, image_size: int | None = 32) -> list[LabeledSample]:
    """Decode every manifest entry to [0, 1] pixels resized to ``image_size``."""
    root = Path(root)
    samples = []
    for index, rec in enumerate(read_manifest(root)):
        path = root / rec.path
        if not path.is_file():
            raise DatasetError(f"raster listed in manifest does not exist: {path}")
        img = to_unit(read_pnm(path))
        if image_size is not None and img.shape[1:] != (image_size, image_size):
            img = bilinear_resize(img, image_size, image_size)
        samples.append(LabeledSample(img, rec.label, rec.group_id, index))
    if not samples:
        raise DatasetError(f"{root / MANIFEST} lists no images")
    return samples


def _blob(size: int, gen: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 - 0.5 + gen.uniform(-size / 8, size / 8, size=2)
    amplitude = gen.uniform(0.5, 0.9)
    sigma = size / 8
    return amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def _ring(size: int, gen: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 - 0.5 + gen.uniform(-size / 8, size / 8, size=2)
    amplitude = gen.uniform(0.5, 0.9)
    radius = gen.uniform(size / 6, size / 3.5)
    width = size / 20
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return amplitude * np.exp(-((r - radius) ** 2) / (2 * width ** 2))


PATTERNS = (_blob, _ring)


def synth_images(n_per_class: int = 100, classes: int = 2, image_size: int = 32, groups_per_class: int = 10,
                 seed: int = 0) -> list[tuple[np.ndarray, int, str, int]]:
    """Synthetic two-class images (blobs vs rings) as (pixels, label, group_id, index) tuples.

    Pixels are uint8 of shape 1×H×W. Each group shares a background level;
    images of a class are split into ``groups_per_class`` contiguous blocks.
    Pixel noise has sigma 0.05.
    """
    if classes != len(PATTERNS):
        raise ValueError(f"only {len(PATTERNS)} classes are supported, got {classes}")
    if image_size < 8 or n_per_class < 1 or not 1 <= groups_per_class <= n_per_class:
        raise ValueError("need image_size >= 8 and 1 <= groups_per_class <= n_per_class")
    items = []
    for label, pattern in enumerate(PATTERNS):
        blocks = np.array_split(np.arange(n_per_class), groups_per_class)
        for g, block in enumerate(blocks):
            group_id = f"c{label}g{g:03d}"
            background = rngmod.stream(seed, "synth-group", label, g).uniform(0.05, 0.2)
            for i in block:
                gen = rngmod.stream(seed, "synth", label, int(i))
                img = background + pattern(image_size, gen)
                img = img + gen.normal(0, 0.05, size=img.shape)
                pixels = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)[None]
                items.append((pixels, label, group_id, int(i)))
    return items


def synth_dataset(out: str | os.PathLike, n_per_class: int = 100, classes: int = 2, image_size: int = 32,
                  groups_per_class: int = 10, seed: int = 0) -> list[ManifestRecord]:
    """Write :func:`synth_images` as P5 files plus a manifest under ``out``."""
    items = synth_images(n_per_class, classes, image_size, groups_per_class, seed)
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for pixels, label, group_id, i in items:
        rel = f"images/c{label}_{i:05d}.pgm"
        write_pnm(out / rel, pixels)
        records.append(ManifestRecord(rel, label, group_id))
    write_manifest(out, records)
    return records
