"""Tile ingestion, 256x256 patching, blank rejection and shuffled manifests.

A manifest is a plain UTF-8 text file: a ``#``-prefixed header block followed
by one tab-separated record per patch::

    # domain: frozen
    # seed: 0
    ...
    patch_path<TAB>mask_path<TAB>source_id<TAB>row,col<TAB>blank_fraction

An empty mask column means no cached mask for that patch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 256
DEFAULT_WHITE_LEVEL = 220
DEFAULT_BLANK_THRESHOLD = 0.5
DEFAULT_MASK_SUFFIX = "_mask"
IMAGE_EXTENSIONS = (".png", ".tif", ".tiff", ".bmp", ".ppm")

MANIFEST_VERSION = 1


class Domain(str, Enum):
    FROZEN = "frozen"
    PERMANENT = "permanent"


class PipelineError(RuntimeError):
    """Raised when the data pipeline cannot produce a usable result."""


@dataclass(frozen=True)
class ImagePatch:
    pixels: np.ndarray  # H x W x 3, uint8
    source_id: str = ""
    origin: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"patch must be HxWx3, got {px.shape}")
        h, w = px.shape[:2]
        if h != w or h < 16 or h % 2:
            raise ValueError(f"patch side must be square, even and >= 16, got {h}x{w}")
        if px.dtype != np.uint8:
            raise ValueError(f"patch must be uint8, got {px.dtype}")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def patch_id(self) -> str:
        return patch_name(self.source_id, self.origin)


def patch_name(source_id: str, origin: Tuple[int, int]) -> str:
    return f"{source_id}_r{origin[0]:05d}_c{origin[1]:05d}"


def extract_patches(image: np.ndarray, patch_size: int = DEFAULT_PATCH_SIZE,
                    stride: Optional[int] = None, source_id: str = "") -> List[ImagePatch]:
    """Cut ``image`` into ``patch_size`` squares on a ``stride`` grid, row-major.

    Remainder strips at the right/bottom edges are dropped.
    """
    stride = patch_size if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if image.ndim == 2:
        image = np.stack([image] * 3, axis=-1)
    h, w = image.shape[:2]
    if patch_size > min(h, w):
        raise PipelineError(
            f"source too small: {h}x{w} image cannot hold a {patch_size}px patch")
    image = np.ascontiguousarray(image[..., :3], dtype=np.uint8)
    patches = []
    for r in range(0, h - patch_size + 1, stride):
        for c in range(0, w - patch_size + 1, stride):
            tile = image[r:r + patch_size, c:c + patch_size].copy()
            patches.append(ImagePatch(tile, source_id, (r, c)))
    return patches


def blank_mask(pixels: np.ndarray, white_level: int = DEFAULT_WHITE_LEVEL) -> np.ndarray:
    """Boolean H x W map of pixels whose darkest channel is still >= white_level."""
    if not 0 <= white_level <= 255:
        raise ValueError("white_level must be in [0, 255]")
    return pixels[..., :3].min(axis=-1) >= white_level


def blank_fraction(patch, white_level: int = DEFAULT_WHITE_LEVEL) -> float:
    pixels = patch.pixels if isinstance(patch, ImagePatch) else np.asarray(patch)
    return float(blank_mask(pixels, white_level).mean())


def filter_blank(patches: Sequence, rho: float = DEFAULT_BLANK_THRESHOLD,
                 white_level: int = DEFAULT_WHITE_LEVEL) -> list:
    """Keep patches whose blank fraction is strictly below ``rho``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must be in [0, 1]")
    return [p for p in patches if blank_fraction(p, white_level) < rho]


def normalize(patch) -> np.ndarray:
    """Map 8-bit intensities to [-1, 1] as float32."""
    pixels = patch.pixels if isinstance(patch, ImagePatch) else np.asarray(patch)
    return pixels.astype(np.float32) / 127.5 - 1.0


def denormalize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.clip(np.round(127.5 * (values + 1.0)), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestEntry:
    patch_path: str
    mask_path: Optional[str]
    source_id: str
    origin: Tuple[int, int] = (0, 0)
    blank_fraction: float = 0.0

    @property
    def patch_id(self) -> str:
        return Path(self.patch_path).stem


@dataclass
class DatasetManifest:
    domain: Domain
    entries: List[ManifestEntry]
    seed: int
    patch_size: int
    stride: int = DEFAULT_PATCH_SIZE
    blank_threshold: float = DEFAULT_BLANK_THRESHOLD
    white_level: int = DEFAULT_WHITE_LEVEL
    skipped_files: int = 0
    rejected_patches: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def with_entries(self, entries: List[ManifestEntry]) -> "DatasetManifest":
        return replace(self, entries=list(entries))

    def dumps(self) -> str:
        header = [
            ("version", MANIFEST_VERSION),
            ("domain", self.domain.value),
            ("seed", self.seed),
            ("patch_size", self.patch_size),
            ("stride", self.stride),
            ("blank_threshold", repr(float(self.blank_threshold))),
            ("white_level", self.white_level),
            ("skipped_files", self.skipped_files),
            ("rejected_patches", self.rejected_patches),
            ("entries", len(self.entries)),
        ]
        lines = [f"# {k}: {v}" for k, v in header]
        for e in self.entries:
            lines.append("\t".join([
                e.patch_path, e.mask_path or "", e.source_id,
                f"{e.origin[0]},{e.origin[1]}", repr(float(e.blank_fraction)),
            ]))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        header = {}
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                header[key.strip()] = value.strip()
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise PipelineError(f"manifest line {lineno}: expected 5 columns, got {len(cols)}")
            row, col = (int(v) for v in cols[3].split(","))
            entries.append(ManifestEntry(cols[0], cols[1] or None, cols[2], (row, col), float(cols[4])))
        try:
            if int(header.get("version", MANIFEST_VERSION)) != MANIFEST_VERSION:
                raise PipelineError(f"unsupported manifest version {header['version']}")
            return cls(
                domain=Domain(header["domain"]),
                entries=entries,
                seed=int(header["seed"]),
                patch_size=int(header["patch_size"]),
                stride=int(header["stride"]),
                blank_threshold=float(header["blank_threshold"]),
                white_level=int(header["white_level"]),
                skipped_files=int(header.get("skipped_files", 0)),
                rejected_patches=int(header.get("rejected_patches", 0)),
            )
        except KeyError as exc:
            raise PipelineError(f"manifest header missing {exc}") from None

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def shuffle_order(n: int, seed: int) -> np.ndarray:
    """Seeded permutation of range(n) using numpy's PCG64 bit generator.

    PCG64 output is specified bit-for-bit, so the order is identical across
    platforms for a given numpy major version.
    """
    return np.random.Generator(np.random.PCG64(seed)).permutation(n)


def list_images(directory, exclude_suffix: Optional[str] = DEFAULT_MASK_SUFFIX) -> List[Path]:
    directory = Path(directory)
    files = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTENSIONS or not p.is_file():
            continue
        if exclude_suffix and p.stem.endswith(exclude_suffix):
            continue
        files.append(p)
    return files


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_labels(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise PipelineError(f"{path}: label raster must be single-channel")
    return arr.astype(np.int64)


def write_rgb(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise PipelineError(f"{path}: too many labels for a 16-bit raster")
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def build_manifest(tile_dirs: Iterable, domain: Domain, patch_dir, *,
                   seed: int = 0, patch_size: int = DEFAULT_PATCH_SIZE,
                   stride: Optional[int] = None, rho: float = DEFAULT_BLANK_THRESHOLD,
                   white_level: int = DEFAULT_WHITE_LEVEL,
                   mask_suffix: str = DEFAULT_MASK_SUFFIX) -> DatasetManifest:
    """Patch every tile under ``tile_dirs``, drop blank patches, shuffle.

    Patches are written to ``patch_dir`` as PNG. A tile ``x.png`` with a
    same-size sidecar label raster ``x<mask_suffix>.png`` has its labels cut
    on the same grid and written next to each patch.
    """
    domain = Domain(domain)
    stride = patch_size if stride is None else stride
    patch_dir = Path(patch_dir)
    patch_dir.mkdir(parents=True, exist_ok=True)

    skipped = 0
    rejected = 0
    records = []
    for tile_dir in tile_dirs:
        for path in list_images(tile_dir, mask_suffix):
            try:
                image = read_rgb(path)
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable tile %s: %s", path, exc)
                skipped += 1
                continue
            try:
                patches = extract_patches(image, patch_size, stride, source_id=path.stem)
            except PipelineError as exc:
                log.warning("skipping %s: %s", path, exc)
                skipped += 1
                continue
            tile_labels = _tile_labels(path, mask_suffix, image.shape[:2])
            for patch in patches:
                frac = blank_fraction(patch, white_level)
                if not frac < rho:
                    rejected += 1
                    continue
                records.append((patch, frac, tile_labels))

    if not records:
        raise PipelineError(f"zero usable patches found in {', '.join(map(str, tile_dirs))}")

    records.sort(key=lambda rec: (rec[0].source_id, rec[0].origin))
    entries = []
    for patch, frac, tile_labels in records:
        out = patch_dir / f"{patch.patch_id}.png"
        write_rgb(out, patch.pixels)
        mask_path = None
        if tile_labels is not None:
            r, c = patch.origin
            mask_path = patch_dir / f"{patch.patch_id}{mask_suffix}.png"
            write_labels(mask_path, tile_labels[r:r + patch_size, c:c + patch_size])
            mask_path = str(mask_path)
        entries.append(ManifestEntry(str(out), mask_path, patch.source_id, patch.origin, frac))

    order = shuffle_order(len(entries), seed)
    return DatasetManifest(
        domain=domain, entries=[entries[i] for i in order], seed=seed,
        patch_size=patch_size, stride=stride, blank_threshold=rho,
        white_level=white_level, skipped_files=skipped, rejected_patches=rejected,
    )


def _tile_labels(path: Path, suffix: str, shape) -> Optional[np.ndarray]:
    sidecar = path.with_name(f"{path.stem}{suffix}.png")
    if not sidecar.exists():
        return None
    labels = read_labels(sidecar)
    if labels.shape != tuple(shape):
        raise PipelineError(f"{sidecar}: mask {labels.shape} does not match tile {tuple(shape)}")
    return labels
