"""UTM partitioning into classes/groups, manifest I/O and the synthetic city renderer."""

from __future__ import annotations

import csv
import logging
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("database", "query", "train")
MANIFEST_HEADER = ["image_id", "path", "utm_east", "utm_north", "heading", "split"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class GeoRecord:
    image_id: str
    utm_east: float
    utm_north: float
    heading: float
    split: str
    path: str = ""

    def validate(self) -> None:
        if not self.image_id:
            raise ValueError("empty image_id")
        if not (math.isfinite(self.utm_east) and math.isfinite(self.utm_north)):
            raise ValueError(f"{self.image_id}: non-finite UTM coordinates")
        if not (math.isfinite(self.heading) and 0.0 <= self.heading < 360.0):
            raise ValueError(f"{self.image_id}: heading {self.heading} outside [0, 360)")
        if self.split not in SPLITS:
            raise ValueError(f"{self.image_id}: unknown split {self.split!r}")


@dataclass(frozen=True, order=True)
class GeoClass:
    e: int
    n: int
    h: int

    def __str__(self) -> str:
        return f"{self.e}_{self.n}_{self.h}"


@dataclass
class PartitionConfig:
    M: float = 10.0
    alpha: float = 60.0
    N: int = 3
    L: int = 2
    min_images_per_class: int = 2

    def __post_init__(self) -> None:
        if not self.M > 0:
            raise ValueError(f"M must be positive, got {self.M}")
        if not self.alpha > 0 or abs(360.0 / self.alpha - round(360.0 / self.alpha)) > 1e-9:
            raise ValueError(f"alpha must divide 360, got {self.alpha}")
        if self.N < 1 or self.L < 1:
            raise ValueError("N and L must be >= 1")
        if self.L > self.heading_bins:
            raise ValueError(f"L={self.L} exceeds the number of heading bins {self.heading_bins}")
        if self.min_images_per_class < 1:
            raise ValueError("min_images_per_class must be >= 1")

    @property
    def heading_bins(self) -> int:
        return int(round(360.0 / self.alpha))


GroupKey = Tuple[int, int, int]


@dataclass
class GroupPartition:
    groups: Dict[GroupKey, List[GeoClass]]
    class_to_group: Dict[GeoClass, GroupKey]

    def ordered_keys(self) -> List[GroupKey]:
        """Largest groups first, residue key as tie-break."""
        return sorted(self.groups, key=lambda k: (-len(self.groups[k]), k))

    def __len__(self) -> int:
        return len(self.groups)


def assign_class(record: GeoRecord, cfg: PartitionConfig) -> GeoClass:
    if not (math.isfinite(record.utm_east) and math.isfinite(record.utm_north)):
        raise ValueError(f"{record.image_id}: non-finite UTM coordinates")
    if not (math.isfinite(record.heading) and 0.0 <= record.heading < 360.0):
        raise ValueError(f"{record.image_id}: heading {record.heading} outside [0, 360)")
    h = int(math.floor(record.heading / cfg.alpha))
    # float rounding right below 360 can land on the last edge
    h = min(h, cfg.heading_bins - 1)
    return GeoClass(
        int(math.floor(record.utm_east / cfg.M)),
        int(math.floor(record.utm_north / cfg.M)),
        h,
    )


def group_key(c: GeoClass, cfg: PartitionConfig) -> GroupKey:
    # Python's % already returns the non-negative residue for a positive modulus
    return (c.e % cfg.N, c.n % cfg.N, c.h % cfg.L)


def build_groups(classes: Iterable[GeoClass], cfg: PartitionConfig) -> GroupPartition:
    classes = sorted(set(classes))
    if not classes:
        raise ValueError("build_groups needs at least one class")
    groups: Dict[GroupKey, List[GeoClass]] = defaultdict(list)
    class_to_group: Dict[GeoClass, GroupKey] = {}
    for c in classes:
        key = group_key(c, cfg)
        groups[key].append(c)
        class_to_group[c] = key
    return GroupPartition(dict(groups), class_to_group)


# --------------------------------------------------------------------------- manifest


def write_manifest(records: Sequence[GeoRecord], path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.image_id, r.path, f"{r.utm_east:.3f}", f"{r.utm_north:.3f}",
                        f"{r.heading:.3f}", r.split])
    os.replace(tmp, path)


def load_manifest(path: str | os.PathLike,
                  partition: Optional[PartitionConfig] = None) -> List[GeoRecord]:
    """Parse and validate a manifest.

    Relative image paths are resolved against the manifest directory. With a
    ``partition``, train-split classes holding fewer than
    ``partition.min_images_per_class`` images are dropped.
    """
    path = Path(path)
    records: List[GeoRecord] = []
    seen: Dict[str, int] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            image_id, rel, east, north, heading, split = row
            try:
                rec = GeoRecord(image_id, float(east), float(north), float(heading), split,
                                str(path.parent / rel) if rel and not os.path.isabs(rel) else rel)
                rec.validate()
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if image_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate image_id {image_id!r} "
                                    f"(first on line {seen[image_id]})")
            seen[image_id] = lineno
            records.append(rec)

    if partition is not None:
        counts = Counter(assign_class(r, partition) for r in records if r.split == "train")
        small = {c for c, k in counts.items() if k < partition.min_images_per_class}
        if small:
            before = len(records)
            records = [r for r in records
                       if r.split != "train" or assign_class(r, partition) not in small]
            logger.info("dropped %d classes (%d images) below %d images per class",
                        len(small), before - len(records), partition.min_images_per_class)
    return records


def class_index(records: Iterable[GeoRecord], cfg: PartitionConfig) -> List[GeoClass]:
    """Sorted list of distinct classes; position in the list is the integer label."""
    return sorted({assign_class(r, cfg) for r in records})


# --------------------------------------------------------------------------- synthetic city


@dataclass
class Nuisance:
    brightness_jitter: float = 0.3
    hue_shift_amplitude: float = 60.0  # degrees
    viewpoint_jitter_meters: float = 8.0
    heading_jitter_degrees: float = 20.0
    pixel_noise_std: float = 0.03


@dataclass
class SyntheticCityConfig:
    extent_east: float = 200.0
    extent_north: float = 200.0
    origin_east: float = 551000.0
    origin_north: float = 4180000.0
    image_size: int = 32
    renders_per_class: int = 8
    database_per_class: int = 2
    queries_per_class: int = 6
    texture_grid: int = 4
    nuisance: Nuisance = field(default_factory=Nuisance)
    seed: int = 0

    def validate(self, part: PartitionConfig) -> None:
        for name in ("extent_east", "extent_north", "image_size", "renders_per_class",
                     "texture_grid"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.database_per_class < 0 or self.queries_per_class < 0:
            raise ValueError("per-class split counts must be non-negative")
        nz = self.nuisance
        if min(nz.brightness_jitter, nz.hue_shift_amplitude, nz.viewpoint_jitter_meters,
               nz.heading_jitter_degrees, nz.pixel_noise_std) < 0:
            raise ValueError("nuisance amplitudes must be non-negative")
        if nz.viewpoint_jitter_meters >= part.M / 2:
            raise ValueError("viewpoint_jitter_meters must stay below M/2")
        if nz.heading_jitter_degrees >= part.alpha / 2:
            raise ValueError("heading_jitter_degrees must stay below alpha/2")


_SPLIT_TAG = {"train": 1, "database": 2, "query": 3}


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([k + 2**32 for k in key]))


def _cell_texture(seed: int, e: int, n: int, grid: int, canvas: int) -> np.ndarray:
    """Low-frequency RGB texture for one cell, float32 in [0, 1], shape (canvas, canvas, 3)."""
    coarse = _rng(seed, 0, e, n).uniform(0.0, 1.0, size=(grid, grid, 3)).astype(np.float32)
    img = Image.fromarray((coarse * 255).round().astype(np.uint8), "RGB")
    img = img.resize((canvas, canvas), Image.BICUBIC)
    return np.asarray(img, dtype=np.float32) / 255.0


def _hue_rotate(rgb: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0:
        return rgb
    # rotation of the chroma plane in YIQ
    to_yiq = np.array([[0.299, 0.587, 0.114],
                       [0.596, -0.274, -0.322],
                       [0.211, -0.523, 0.312]], dtype=np.float32)
    th = math.radians(degrees)
    rot = np.array([[1, 0, 0],
                    [0, math.cos(th), -math.sin(th)],
                    [0, math.sin(th), math.cos(th)]], dtype=np.float32)
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return rgb @ m.T.astype(np.float32)


def render_view(cfg: SyntheticCityConfig, part: PartitionConfig, cls: GeoClass,
                offset_east: float, offset_north: float, heading: float,
                rng: np.random.Generator) -> np.ndarray:
    """Render one uint8 RGB view of ``cls`` from a camera displaced from the cell center."""
    size = cfg.image_size
    canvas = 2 * size
    tex = _cell_texture(cfg.seed, cls.e, cls.n, cfg.texture_grid, canvas)
    px_per_m = size / (2.0 * part.M)
    cx = int(round(size / 2 + offset_east * px_per_m))
    cy = int(round(size / 2 - offset_north * px_per_m))
    view = tex[cy:cy + size, cx:cx + size]

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    xx = xx / (size - 1) - 0.5
    yy = yy / (size - 1) - 0.5
    th = math.radians(heading)
    ramp = (math.sin(th) * xx - math.cos(th) * yy)[..., None]
    img = 0.8 * view + 0.3 * ramp + 0.1

    nz = cfg.nuisance
    img = img * (1.0 + rng.uniform(-nz.brightness_jitter, nz.brightness_jitter)) \
        if nz.brightness_jitter else img
    if nz.hue_shift_amplitude:
        img = _hue_rotate(img, rng.uniform(-nz.hue_shift_amplitude, nz.hue_shift_amplitude))
    if nz.pixel_noise_std:
        img = img + rng.normal(0.0, nz.pixel_noise_std, size=img.shape).astype(np.float32)
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)


def city_classes(cfg: SyntheticCityConfig, part: PartitionConfig) -> List[GeoClass]:
    e0 = math.floor(cfg.origin_east / part.M)
    n0 = math.floor(cfg.origin_north / part.M)
    ne = math.ceil(cfg.extent_east / part.M)
    nn = math.ceil(cfg.extent_north / part.M)
    return [GeoClass(e0 + i, n0 + j, h)
            for i in range(ne) for j in range(nn) for h in range(part.heading_bins)]


def generate_synthetic_city(cfg: SyntheticCityConfig, part: PartitionConfig,
                            out_dir: str | os.PathLike) -> Tuple[Path, List[GeoRecord]]:
    """Render train/database/query images for every class and write ``manifest.csv``.

    Returns the manifest path and the records (paths relative to ``out_dir``).
    """
    cfg.validate(part)
    out_dir = Path(out_dir)
    nz = cfg.nuisance
    counts = {"train": cfg.renders_per_class, "database": cfg.database_per_class,
              "query": cfg.queries_per_class}
    records: List[GeoRecord] = []
    for split in SPLITS:
        (out_dir / "images" / split).mkdir(parents=True, exist_ok=True)
    for cls in city_classes(cfg, part):
        center_e = (cls.e + 0.5) * part.M
        center_n = (cls.n + 0.5) * part.M
        center_h = (cls.h + 0.5) * part.alpha
        for split in ("train", "database", "query"):
            for i in range(counts[split]):
                rng = _rng(cfg.seed, _SPLIT_TAG[split], cls.e, cls.n, cls.h, i)
                j = nz.viewpoint_jitter_meters
                de = round(float(rng.uniform(-j, j)), 3) if j else 0.0
                dn = round(float(rng.uniform(-j, j)), 3) if j else 0.0
                hj = nz.heading_jitter_degrees
                heading = round(center_h + (float(rng.uniform(-hj, hj)) if hj else 0.0), 3)
                pixels = render_view(cfg, part, cls, de, dn, heading, rng)
                image_id = f"{split[0]}_{cls}_{i:03d}"
                rel = f"images/{split}/{image_id}.png"
                Image.fromarray(pixels, "RGB").save(out_dir / rel, format="PNG")
                records.append(GeoRecord(image_id, round(center_e + de, 3),
                                         round(center_n + dn, 3), heading, split, rel))
    manifest = out_dir / "manifest.csv"
    write_manifest(records, manifest)
    return manifest, records


def split_validation(queries: Sequence[GeoRecord], fraction: float = 0.1,
                     seed: int = 0) -> Tuple[List[GeoRecord], List[GeoRecord]]:
    """Deterministically hold out ``fraction`` of the queries; returns (val, test)."""
    ids = sorted(r.image_id for r in queries)
    k = max(1, int(round(fraction * len(ids)))) if ids else 0
    chosen = set(np.random.default_rng(seed).permutation(len(ids))[:k].tolist())
    val_ids = {ids[i] for i in chosen}
    val = [r for r in queries if r.image_id in val_ids]
    test = [r for r in queries if r.image_id not in val_ids]
    return val, test


def load_images(records: Sequence[GeoRecord]) -> np.ndarray:
    """Stack images as float32 (B, 3, H, W) in [0, 1]; missing files are reported together."""
    missing = [r.image_id for r in records if not os.path.exists(r.path)]
    if missing:
        raise FileNotFoundError(f"missing image files for ids: {', '.join(missing)}")
    if not records:
        return np.zeros((0, 3, 0, 0), dtype=np.float32)
    arrs = [np.asarray(Image.open(r.path).convert("RGB"), dtype=np.float32) for r in records]
    return (np.stack(arrs) / 255.0).transpose(0, 3, 1, 2).copy()
