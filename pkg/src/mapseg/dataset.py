"""Patch datasets: tiling co-registered rasters, spatial splits, centering, IO.

Patches are non-overlapping SxS tiles cut from an image/label raster pair;
ragged right/bottom margins are dropped.  Splits are assigned to contiguous
runs of the row-major patch order (not per-patch shuffling) so the three
regions stay spatially disjoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, FormatViolation, GeorefMismatch, IoFailure, TooFewPatches
from .geo import RasterGeoref, pixel_to_lonlat, read_georef, write_georef
from .labelgen import LABEL_ROAD, LabelRaster

SPLITS = ("train", "val", "test")

#: Tile size used in the full-scale setup; desk-scale runs configure 64.
DEFAULT_TILE_SIZE = 500
DESK_TILE_SIZE = 64


@dataclass
class ImageRaster:
    channels: np.ndarray  # (3, H, W) float64 in [0, 255]
    georef: RasterGeoref

    def __post_init__(self) -> None:
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise DimensionMismatch(f"image must be (3, H, W), got {self.channels.shape}")
        if self.channels.shape[1:] != (self.georef.height_px, self.georef.width_px):
            raise DimensionMismatch("image dimensions do not match georef")


@dataclass
class Patch:
    image: np.ndarray  # (3, S, S) float64
    labels: np.ndarray  # (S, S) uint8
    origin_px: tuple[int, int]  # (x, y) in the parent raster
    split_tag: str = ""

    @property
    def size(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class PatchRecord:
    stem: str
    origin_px: tuple[int, int]
    split_tag: str


@dataclass
class DatasetManifest:
    records: list[PatchRecord]
    seed: int
    tile_size: int
    fractions: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for r in self.records:
            counts[r.split_tag] += 1
        return counts


def tile(image: ImageRaster, labels: LabelRaster, tile_size: int) -> list[Patch]:
    """Cut the raster pair into non-overlapping SxS patches, row-major order."""
    if image.georef != labels.georef:
        raise GeorefMismatch("image and labels carry different georeferences")
    if tile_size < 8:
        raise ValueError("tile size must be >= 8")
    h, w = labels.classes.shape
    patches = []
    for y in range(0, h - tile_size + 1, tile_size):
        for x in range(0, w - tile_size + 1, tile_size):
            patches.append(
                Patch(
                    image=image.channels[:, y : y + tile_size, x : x + tile_size].copy(),
                    labels=labels.classes[y : y + tile_size, x : x + tile_size].copy(),
                    origin_px=(x, y),
                )
            )
    return patches


def split(
    patches: list[Patch],
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[list[Patch], DatasetManifest]:
    """Assign train/val/test tags by contiguous spatial blocks.

    Fractions must be nonnegative and sum to 1; a zero fraction yields an
    intentionally empty split, while a positive fraction that would receive
    zero patches raises TooFewPatches.  The seed only permutes which
    contiguous block gets which tag.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three nonnegative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(patches)
    counts = [int(np.floor(f * n)) for f in fractions]
    remainders = [f * n - c for f, c in zip(fractions, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    for frac, count, name in zip(fractions, counts, SPLITS):
        if frac > 0 and count == 0:
            raise TooFewPatches(f"split '{name}' with fraction {frac} would be empty")

    ordered = sorted(patches, key=lambda p: (p.origin_px[1], p.origin_px[0]))
    rng = np.random.default_rng(seed)
    block_order = rng.permutation(3)

    tagged: list[Patch] = []
    records: list[PatchRecord] = []
    cursor = 0
    assignments = {}
    for bi in block_order:
        name = SPLITS[bi]
        for p in ordered[cursor : cursor + counts[bi]]:
            assignments[p.origin_px] = name
        cursor += counts[bi]
    for i, p in enumerate(ordered):
        tag = assignments[p.origin_px]
        tagged.append(replace_split(p, tag))
        records.append(PatchRecord(stem=f"patch_{i:05d}", origin_px=p.origin_px, split_tag=tag))
    manifest = DatasetManifest(records=records, seed=seed, tile_size=ordered[0].size if ordered else 0,
                               fractions=tuple(float(f) for f in fractions))
    return tagged, manifest


def replace_split(p: Patch, tag: str) -> Patch:
    if tag not in SPLITS:
        raise ValueError(f"unknown split tag {tag!r}")
    return Patch(image=p.image, labels=p.labels, origin_px=p.origin_px, split_tag=tag)


def center_patch(p: Patch) -> np.ndarray:
    """Image centered per channel (zero mean); labels are untouched."""
    return p.image - p.image.mean(axis=(1, 2), keepdims=True)


# ---------------------------------------------------------------------------
# persistence


def _require_integral_image(image: np.ndarray) -> np.ndarray:
    if image.min(initial=0.0) < 0 or image.max(initial=0.0) > 255:
        raise FormatViolation("image values must lie in [0, 255] for 8-bit storage")
    rounded = np.rint(image)
    if not np.array_equal(rounded, image):
        raise FormatViolation("image values must be integral to round-trip through 8-bit PNG")
    return rounded.astype(np.uint8)



def _patch_file(stem: Path, kind: str) -> Path:
    return stem.with_name(stem.name + "." + kind)


def store_patch(p: Patch, stem: str | Path, georef: RasterGeoref | None = None) -> None:
    """Write `<stem>.img.png`, `<stem>.lab.png` and `<stem>.meta.json`.

    Storage is lossless: store followed by load returns a bitwise identical
    patch, which requires integral image values.
    """
    stem = Path(stem)
    img = _require_integral_image(p.image)
    if p.labels.max(initial=0) > LABEL_ROAD:
        raise FormatViolation("labels outside {0,1,2}")
    try:
        Image.fromarray(np.transpose(img, (1, 2, 0)), mode="RGB").save(_patch_file(stem, "img.png"))
        Image.fromarray(p.labels.astype(np.uint8), mode="L").save(_patch_file(stem, "lab.png"))
        meta = {"origin_px": list(p.origin_px), "split_tag": p.split_tag}
        _patch_file(stem, "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write patch files for {stem}") from exc
    if georef is not None:
        patch_georef = RasterGeoref(
            origin=pixel_to_lonlat(p.origin_px[0], p.origin_px[1], georef),
            gsd_m=georef.gsd_m,
            width_px=p.size,
            height_px=p.size,
        )
        write_georef(patch_georef, _patch_file(stem, "img.png"))


def load_patch(stem: str | Path) -> Patch:
    stem = Path(stem)
    img_path = _patch_file(stem, "img.png")
    lab_path = _patch_file(stem, "lab.png")
    meta_path = _patch_file(stem, "meta.json")
    for path in (img_path, lab_path, meta_path):
        if not path.exists():
            raise IoFailure(f"missing patch file {path}")
    try:
        with Image.open(img_path) as img:
            image = np.transpose(np.asarray(img.convert("RGB"), dtype=np.float64), (2, 0, 1))
        with Image.open(lab_path) as lab:
            labels = np.asarray(lab.convert("L"), dtype=np.uint8)
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatViolation(f"corrupt patch files for {stem}") from exc
    if labels.max(initial=0) > LABEL_ROAD:
        raise FormatViolation(f"label file {lab_path} contains values outside {{0,1,2}}")
    if image.shape[1:] != labels.shape:
        raise FormatViolation(f"patch image/label shapes disagree for {stem}")
    return Patch(image=image, labels=labels, origin_px=tuple(meta["origin_px"]), split_tag=meta.get("split_tag", ""))


def store_dataset(patches: list[Patch], manifest: DatasetManifest, directory: str | Path,
                  georef: RasterGeoref | None = None) -> Path:
    """Persist patches and a manifest.json describing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(patches) != len(manifest.records):
        raise ValueError("manifest does not describe the given patches")
    for p, record in zip(patches, manifest.records):
        store_patch(p, directory / record.stem, georef)
    payload = {
        "seed": manifest.seed,
        "tile_size": manifest.tile_size,
        "fractions": list(manifest.fractions),
        "records": [
            {"stem": r.stem, "origin_px": list(r.origin_px), "split_tag": r.split_tag}
            for r in manifest.records
        ],
    }
    (directory / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return directory / "manifest.json"


def load_dataset(directory: str | Path) -> tuple[list[Patch], DatasetManifest]:
    directory = Path(directory)
    try:
        payload = json.loads((directory / "manifest.json").read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read manifest in {directory}") from exc
    except json.JSONDecodeError as exc:
        raise FormatViolation(f"manifest in {directory} is not valid JSON") from exc
    records = [
        PatchRecord(stem=r["stem"], origin_px=tuple(r["origin_px"]), split_tag=r["split_tag"])
        for r in payload["records"]
    ]
    manifest = DatasetManifest(
        records=records,
        seed=payload["seed"],
        tile_size=payload["tile_size"],
        fractions=tuple(payload.get("fractions", (0.0, 0.0, 0.0))),
    )
    patches = [load_patch(directory / r.stem) for r in records]
    return patches, manifest


def save_image_png(image: ImageRaster, path: str | Path) -> None:
    """Scene-level RGB PNG with georef sidecar (requires integral values)."""
    arr = _require_integral_image(image.channels)
    path = Path(path)
    try:
        Image.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB").save(path)
    except OSError as exc:
        raise IoFailure(f"cannot write image raster {path}") from exc
    write_georef(image.georef, path)


def load_image_png(path: str | Path) -> ImageRaster:
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.transpose(np.asarray(img.convert("RGB"), dtype=np.float64), (2, 0, 1))
    except FileNotFoundError as exc:
        raise IoFailure(f"image raster {path} not found") from exc
    except OSError as exc:
        raise FormatViolation(f"image raster {path} is not a readable PNG") from exc
    return ImageRaster(arr, read_georef(path))
