"""On-disk dataset layout.

    <root>/manifest.json
    <root>/seq_<id>/frame_<k>.pgm   binary mask, 0 or 255
    <root>/seq_<id>/frame_<k>.ppm   paired RGB frame
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .dataprep import MaskSequence
from .errors import DataFormatError
from .geometry import FrameDims

MANIFEST = "manifest.json"


def write_pgm(path, mask) -> None:
    m = np.asarray(mask).astype(bool)
    Image.fromarray(np.where(m, 255, 0).astype(np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    """Binary mask from an 8-bit P5 file; any value other than 0/255 is an error."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != "L":
                raise DataFormatError(f"{path}: expected 8-bit binary PGM, got {im.format} {im.mode}")
            a = np.asarray(im)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise DataFormatError(f"{path}: unreadable PGM ({exc})") from exc
    if not np.all((a == 0) | (a == 255)):
        raise DataFormatError(f"{path}: mask values must be 0 or 255")
    return a == 255


def write_ppm(path, image) -> None:
    a = np.asarray(image, dtype=float)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=-1)
    Image.fromarray(np.round(np.clip(a, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path, format="PPM")


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != "RGB":
                raise DataFormatError(f"{path}: expected 8-bit RGB PPM, got {im.format} {im.mode}")
            return np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        if isinstance(exc, DataFormatError):
            raise
        raise DataFormatError(f"{path}: unreadable PPM ({exc})") from exc


@dataclass
class SequenceEntry:
    id: str
    path: str
    length: int
    split: str = "train"


@dataclass
class Manifest:
    dims: FrameDims
    sequences: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [s for s in self.sequences if s.split == name]

    def to_dict(self) -> dict:
        return {
            "dims": [self.dims.w, self.dims.h],
            "sequences": [vars(s) for s in self.sequences],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Manifest:
        return cls(FrameDims(*d["dims"]), [SequenceEntry(**s) for s in d["sequences"]], d.get("meta", {}))


def write_manifest(root, manifest: Manifest) -> None:
    Path(root, MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")


def read_manifest(root) -> Manifest:
    path = Path(root, MANIFEST)
    if not path.is_file():
        raise DataFormatError(f"{path}: manifest not found")
    try:
        return Manifest.from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed manifest ({exc})") from exc


def write_sequence(root, seq_id: str, seq: MaskSequence) -> str:
    rel = f"seq_{seq_id}"
    d = Path(root, rel)
    d.mkdir(parents=True, exist_ok=True)
    for k, mask in enumerate(seq.frames):
        write_pgm(d / f"frame_{k:03d}.pgm", mask)
        if seq.images is not None:
            write_ppm(d / f"frame_{k:03d}.ppm", seq.images[k])
    return rel


def read_sequence(root, entry: SequenceEntry, dims: FrameDims, images: bool = True) -> MaskSequence:
    d = Path(root, entry.path)
    frames, imgs = [], []
    for k in range(entry.length):
        frames.append(read_pgm(d / f"frame_{k:03d}.pgm"))
        if images:
            imgs.append(read_ppm(d / f"frame_{k:03d}.ppm"))
    for k, f in enumerate(frames):
        if f.shape != (dims.h, dims.w):
            raise DataFormatError(f"{d / f'frame_{k:03d}.pgm'}: shape {f.shape} does not match manifest dims")
    return MaskSequence(frames, dims, imgs if images else None)
