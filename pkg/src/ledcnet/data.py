"""Tiling, stitching, palette masks, manifests and the tile dataset.

Arrays in this module are spatial-first: images are (H, W, 3) uint8, index
masks (H, W), probability maps (H, W, C).
"""
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TilingSpec:
    tile_size: int = 512
    overlap: int = 0
    pad_value: int = 0
    mask_pad_label: int = 255

    def __post_init__(self):
        if self.tile_size < 1:
            raise ConfigError(f"tile_size must be positive, got {self.tile_size}")
        if not 0 <= self.overlap < self.tile_size:
            raise ConfigError(
                f"overlap must be in [0, tile_size), got {self.overlap} for tile {self.tile_size}")

    @property
    def stride(self):
        return self.tile_size - self.overlap


def _axis_origins(length, spec):
    n = max(1, math.ceil((length - spec.overlap) / spec.stride))
    return [i * spec.stride for i in range(n)]


def tile_origins(height, width, spec: TilingSpec):
    """Row-major (row, col) origins whose tiles cover a ``height`` x ``width`` raster."""
    if height < 1 or width < 1:
        raise DataError(f"cannot tile an empty {height}x{width} image")
    return [(r, c) for r in _axis_origins(height, spec) for c in _axis_origins(width, spec)]


def tile_image(image, spec: TilingSpec, pad_value=None):
    """Cut ``image`` into ``tile_size`` squares; returns ``[(tile, (row, col)), ...]``.

    Tiles running past the bottom/right edge are filled with ``pad_value``
    (``spec.pad_value`` by default).
    """
    image = np.asarray(image)
    if image.ndim < 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise DataError(f"cannot tile an empty image of shape {image.shape}")
    pad_value = spec.pad_value if pad_value is None else pad_value
    h, w = image.shape[:2]
    t = spec.tile_size
    tiles = []
    for r, c in tile_origins(h, w, spec):
        tile = np.full((t, t, *image.shape[2:]), pad_value, dtype=image.dtype)
        src = image[r:r + t, c:c + t]
        tile[:src.shape[0], :src.shape[1]] = src
        tiles.append((tile, (r, c)))
    return tiles


def _edge_distance(th, tw):
    rows = np.minimum(np.arange(th), np.arange(th)[::-1])
    cols = np.minimum(np.arange(tw), np.arange(tw)[::-1])
    return np.minimum(rows[:, None], cols[None, :])


def _uncovered_rectangle(covered):
    rows = np.where(~covered.all(axis=1))[0]
    cols = np.where(~covered.all(axis=0))[0]
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def stitch_tiles(tiles, original_size, blend="average"):
    """Reassemble ``[(tile, (row, col)), ...]`` into an array of ``original_size``.

    ``average`` takes the mean of overlapping float values; for integer class
    maps it averages one-hot votes and keeps the lowest winning label.
    ``crop-center`` takes each pixel from the tile whose border is farthest
    away (earliest tile on ties). Padding beyond ``original_size`` is dropped.
    """
    if blend not in ("average", "crop-center"):
        raise ValueError(f"unknown blend rule {blend!r}")
    if not tiles:
        raise DataError("no tiles to stitch")
    h, w = original_size
    first = np.asarray(tiles[0][0])
    extra = first.shape[2:]
    is_int = np.issubdtype(first.dtype, np.integer) or first.dtype == bool

    covered = np.zeros((h, w), dtype=bool)
    clipped = []
    for tile, (r, c) in tiles:
        tile = np.asarray(tile)
        rh, cw = max(0, min(tile.shape[0], h - r)), max(0, min(tile.shape[1], w - c))
        clipped.append((tile, r, c, rh, cw))
        covered[r:r + rh, c:c + cw] = True
    if not covered.all():
        r0, c0, r1, c1 = _uncovered_rectangle(covered)
        raise DataError(f"tiles leave rows {r0}:{r1}, cols {c0}:{c1} uncovered")

    if blend == "crop-center":
        out = np.zeros((h, w, *extra), dtype=first.dtype)
        best = np.full((h, w), -1, dtype=np.int64)
        for tile, r, c, rh, cw in clipped:
            score = _edge_distance(*tile.shape[:2])[:rh, :cw]
            win = score > best[r:r + rh, c:c + cw]
            best[r:r + rh, c:c + cw][win] = score[win]
            out[r:r + rh, c:c + cw][win] = tile[:rh, :cw][win]
        return out

    if is_int:
        labels = np.unique(np.concatenate([t[:rh, :cw].ravel() for t, _, _, rh, cw in clipped]))
        votes = np.zeros((len(labels), h, w, *extra), dtype=np.int32)
        for tile, r, c, rh, cw in clipped:
            idx = np.searchsorted(labels, tile[:rh, :cw])
            for k in range(len(labels)):
                votes[k, r:r + rh, c:c + cw] += idx == k
        return labels[votes.argmax(axis=0)].astype(first.dtype)

    total = np.zeros((h, w, *extra), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    for tile, r, c, rh, cw in clipped:
        total[r:r + rh, c:c + cw] += tile[:rh, :cw]
        count[r:r + rh, c:c + cw] += 1
    count = count.reshape(h, w, *([1] * len(extra)))
    return (total / count).astype(first.dtype)


# -- palettes ------------------------------------------------------------------

@dataclass
class LabelPalette:
    names: list = field(default_factory=lambda: ["background", "house", "road"])
    colors: list = field(default_factory=lambda: [(0, 0, 0), (255, 0, 0), (0, 255, 0)])

    def __post_init__(self):
        self.colors = [tuple(int(v) for v in c) for c in self.colors]
        if len(self.names) != len(self.colors) or not self.names:
            raise ConfigError("palette needs one color per class name")
        if len(set(self.colors)) != len(self.colors):
            raise ConfigError("palette colors must be unique")
        if any(len(c) != 3 or not all(0 <= v <= 255 for v in c) for c in self.colors):
            raise ConfigError("palette colors must be RGB triples in [0, 255]")

    def __len__(self):
        return len(self.names)

    @classmethod
    def from_json(cls, entries):
        return cls([e["name"] for e in entries], [tuple(e["color"]) for e in entries])

    def to_json(self):
        return [{"name": n, "color": list(c)} for n, c in zip(self.names, self.colors)]


def _pack(rgb):
    rgb = rgb.astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def encode_mask(rgb_mask, palette: LabelPalette, ignore_index=255, return_unknown=False):
    """RGB palette mask (H, W, 3) -> index mask (H, W).

    Colors missing from the palette become ``ignore_index``; their count is
    logged and optionally returned.
    """
    rgb_mask = np.asarray(rgb_mask)
    if rgb_mask.ndim != 3 or rgb_mask.shape[2] != 3:
        raise DataError(f"expected an (H, W, 3) RGB mask, got shape {rgb_mask.shape}")
    keys = _pack(rgb_mask)
    table = _pack(np.array(palette.colors, dtype=np.int64))
    order = np.argsort(table)
    pos = np.clip(np.searchsorted(table[order], keys), 0, len(table) - 1)
    found = table[order][pos] == keys
    index = np.where(found, order[pos], ignore_index).astype(np.int64)
    unknown = int((~found).sum())
    if unknown:
        log.warning("%d mask pixels have colors outside the palette; mapped to %d",
                    unknown, ignore_index)
    return (index, unknown) if return_unknown else index


def decode_mask(index_mask, palette: LabelPalette, ignore_color=(255, 255, 255)):
    """Index mask (H, W) -> RGB (H, W, 3); out-of-palette indices get ``ignore_color``."""
    index_mask = np.asarray(index_mask)
    lut = np.array(palette.colors + [tuple(ignore_color)], dtype=np.uint8)
    idx = np.where((index_mask >= 0) & (index_mask < len(palette)), index_mask, len(palette))
    return lut[idx]


# -- manifests & files -----------------------------------------------------------

@dataclass
class Record:
    image: Path
    mask: Path
    split: str


@dataclass
class DatasetManifest:
    palette: LabelPalette
    records: list

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.split not in SPLITS:
                raise ConfigError(f"record {rec.image} has invalid split {rec.split!r}")
            for p in (rec.image, rec.mask):
                if p in seen:
                    raise ConfigError(f"path listed twice in manifest: {p}")
                seen.add(p)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def split_counts(self):
        return {s: len(self.split(s)) for s in SPLITS}

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"manifest not found: {path}")
        doc = json.loads(path.read_text())
        if "palette" not in doc:
            raise ConfigError(f"manifest {path} has no palette")
        root = path.parent
        records = [Record((root / r["image"]).resolve(), (root / r["mask"]).resolve(), r["split"])
                   for r in doc.get("records", [])]
        return cls(LabelPalette.from_json(doc["palette"]), records)

    def save(self, path):
        path = Path(path)
        root = path.parent.resolve()

        def rel(p):
            p = Path(p).resolve()
            return str(p.relative_to(root)) if p.is_relative_to(root) else str(p)
        doc = {"palette": self.palette.to_json(),
               "records": [{"image": rel(r.image), "mask": rel(r.mask), "split": r.split}
                           for r in self.records]}
        path.write_text(json.dumps(doc, indent=2))


def read_image(path):
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def read_mask(path, palette: LabelPalette, ignore_index=255):
    """Index mask from a PNG: 3-channel files are palette-encoded, single-channel
    files already hold class indices."""
    try:
        with Image.open(path) as im:
            arr = np.array(im.convert("RGB") if im.mode in ("RGB", "RGBA") else im)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    if arr.ndim == 3:
        return encode_mask(arr[..., :3], palette, ignore_index)
    return arr.astype(np.int64)


def write_png(path, array):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array).astype(np.uint8)).save(path)


def normalize(image, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
    """uint8 (H, W, 3) -> float32 tensor (3, H, W) as ``(x / 255 - mean) / std``."""
    x = torch.from_numpy(np.ascontiguousarray(image)).float().div_(255.0).permute(2, 0, 1)
    mean = torch.tensor(mean, dtype=torch.float32).view(3, 1, 1)
    std = torch.tensor(std, dtype=torch.float32).view(3, 1, 1)
    return (x - mean) / std


class SegmentationDataset(Dataset):
    """Fixed-size tiles cut from the records of one manifest split."""

    def __init__(self, manifest: DatasetManifest, split, spec: TilingSpec,
                 mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5), augment=False):
        self.records = manifest.split(split)
        if not self.records:
            raise ConfigError(f"manifest split {split!r} is empty")
        self.palette = manifest.palette
        self.spec = spec
        self.mean, self.std = tuple(mean), tuple(std)
        self.augment = augment
        self.index = []
        for i, rec in enumerate(self.records):
            try:
                with Image.open(rec.image) as im:
                    w, h = im.size
            except OSError as exc:
                raise OSError(f"cannot read image {rec.image}: {exc}") from exc
            self.index.extend((i, origin) for origin in tile_origins(h, w, spec))
        self._load = lru_cache(maxsize=8)(self._read_record)

    def _read_record(self, i):
        rec = self.records[i]
        image = read_image(rec.image)
        mask = read_mask(rec.mask, self.palette, self.spec.mask_pad_label)
        if mask.shape != image.shape[:2]:
            raise DataError(f"mask {rec.mask} is {mask.shape}, image is {image.shape[:2]}")
        return image, mask

    def __len__(self):
        return len(self.index)

    def __getitem__(self, item):
        i, (r, c) = self.index[item]
        image, mask = self._load(i)
        t = self.spec.tile_size
        img_tile = np.full((t, t, 3), self.spec.pad_value, dtype=np.uint8)
        mask_tile = np.full((t, t), self.spec.mask_pad_label, dtype=np.int64)
        src = image[r:r + t, c:c + t]
        img_tile[:src.shape[0], :src.shape[1]] = src
        mask_tile[:src.shape[0], :src.shape[1]] = mask[r:r + t, c:c + t]
        if self.augment:
            if torch.rand(()) < 0.5:
                img_tile, mask_tile = img_tile[:, ::-1], mask_tile[:, ::-1]
            if torch.rand(()) < 0.5:
                img_tile, mask_tile = img_tile[::-1], mask_tile[::-1]
        return (normalize(img_tile, self.mean, self.std),
                torch.from_numpy(np.ascontiguousarray(mask_tile)))


# -- synthetic probe set ---------------------------------------------------------

_PROBE_COLORS = {0: (70, 130, 60), 1: (190, 70, 60), 2: (125, 125, 130)}


def synthetic_tile(rng, size=64):
    """One (image, index mask) pair: grassy background, rectangular houses,
    straight road bands."""
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[:size, :size]
    for _ in range(rng.integers(1, 3)):
        width = int(rng.integers(5, 9))
        if rng.random() < 0.5:
            pos = int(rng.integers(width, size - width))
            band = np.abs(yy - pos) < width / 2 if rng.random() < 0.5 else np.abs(xx - pos) < width / 2
        else:
            off = int(rng.integers(-size // 3, size // 3))
            band = np.abs(yy - xx - off) < width / 1.4
        mask[band] = 2
    for _ in range(rng.integers(1, 4)):
        h, w = int(rng.integers(8, 18)), int(rng.integers(8, 18))
        r, c = int(rng.integers(0, size - h)), int(rng.integers(0, size - w))
        mask[r:r + h, c:c + w] = 1
    image = np.zeros((size, size, 3), dtype=np.float64)
    for k, color in _PROBE_COLORS.items():
        image[mask == k] = color
    image += rng.normal(0, 12, image.shape)
    return np.clip(image, 0, 255).astype(np.uint8), mask


def make_probe_set(out_dir, n=8, size=64, seed=0, palette=None):
    """Write ``n`` synthetic tiles (and a copy of each as the val split) plus
    ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    palette = palette or LabelPalette()
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        image, mask = synthetic_tile(rng, size)
        for split in ("train", "val"):
            img_path = out_dir / split / f"tile_{i:02d}.png"
            mask_path = out_dir / split / f"tile_{i:02d}_mask.png"
            write_png(img_path, image)
            write_png(mask_path, decode_mask(mask, palette))
            records.append(Record(img_path, mask_path, split))
    manifest_path = out_dir / "manifest.json"
    DatasetManifest(palette, records).save(manifest_path)
    return manifest_path
