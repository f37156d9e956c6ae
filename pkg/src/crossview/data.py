"""Paired-view datasets: synthetic generation, disk ingestion, image transforms.

A dataset is three partitions of samples (train / query / gallery).  Each
class is one geographic location; all of its samples carry identical
coordinates.  Synthetic data emulates densely sampled aerial imagery: classes
are overlapping crops of a smooth random "world" laid out on a lat/lon grid,
so geographically adjacent classes genuinely look alike, and the two views of
a class are distinct deterministic transforms of the same underlying crop.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import cten
from .errors import ConfigError, ContractError, DataError, RangeError
from .tensor import Tensor

VIEW_DRONE = "drone"
VIEW_SATELLITE = "satellite"
VIEWS = (VIEW_DRONE, VIEW_SATELLITE)

SPLIT_TRAIN = "train"
SPLIT_QUERY = "query"
SPLIT_GALLERY = "gallery"
SPLITS = (SPLIT_TRAIN, SPLIT_QUERY, SPLIT_GALLERY)

METADATA_NAME = "metadata.csv"
_METADATA_COLUMNS = ["class_id", "view", "lat", "lon", "relpath"]


@dataclass(frozen=True)
class SampleMeta:
    """One image record: location class, view tag, coordinates, payload locator."""

    class_id: int
    view: str
    lat: float
    lon: float
    payload: str


@dataclass
class DatasetSplit:
    """Train/query/gallery partitions plus payload resolution."""

    train: list
    query: list
    gallery: list
    has_gps: bool = True
    root: str | None = None
    store: dict = field(default_factory=dict, repr=False)

    def payload(self, meta: SampleMeta) -> np.ndarray:
        if meta.payload in self.store:
            return self.store[meta.payload]
        if self.root is None:
            raise DataError(f"no payload source for {meta.payload}")
        return cten.read_tensor(os.path.join(self.root, meta.payload))

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    def classes(self, name: str) -> list:
        return sorted({m.class_id for m in self.split(name)})

    def coords(self) -> dict:
        out = {}
        for part in SPLITS:
            for m in self.split(part):
                out.setdefault(m.class_id, (m.lat, m.lon))
        return out


def _classes_with_view(metas, view):
    return {m.class_id for m in metas if m.view == view}


def validate_split(ds: DatasetSplit) -> None:
    """Raise DataError on any invariant violation (never a warning)."""
    seen_paths = set()
    for part in SPLITS:
        for m in ds.split(part):
            if m.view not in VIEWS:
                raise DataError(f"sample {m.payload}: unknown view {m.view!r}")
            if m.class_id < 0:
                raise DataError(f"sample {m.payload}: negative class id")
            if m.payload in seen_paths:
                raise DataError(f"duplicate relpath {m.payload}")
            seen_paths.add(m.payload)

    if ds.has_gps:
        coords = {}
        for part in SPLITS:
            for m in ds.split(part):
                if not (math.isfinite(m.lat) and math.isfinite(m.lon)):
                    raise DataError(f"sample {m.payload}: non-finite coordinates")
                prev = coords.setdefault(m.class_id, (m.lat, m.lon))
                if prev != (m.lat, m.lon):
                    raise DataError(
                        f"class {m.class_id}: inconsistent coordinates {prev} vs {(m.lat, m.lon)}"
                    )

    for cid in sorted({m.class_id for m in ds.train}):
        views = {m.view for m in ds.train if m.class_id == cid}
        if VIEW_DRONE not in views or VIEW_SATELLITE not in views:
            raise DataError(f"train class {cid} lacks a {VIEW_DRONE}/{VIEW_SATELLITE} pair")

    query_classes = {m.class_id for m in ds.query}
    gallery_classes = {m.class_id for m in ds.gallery}
    missing = query_classes - gallery_classes
    if missing:
        raise DataError(f"query classes absent from gallery: {sorted(missing)}")
    overlap = {m.class_id for m in ds.train} & query_classes
    if overlap:
        raise DataError(f"train and query class sets overlap: {sorted(overlap)}")

    eval_classes = query_classes | gallery_classes
    for cid in sorted(eval_classes):
        has_drone = cid in _classes_with_view(ds.query, VIEW_DRONE) or cid in _classes_with_view(
            ds.gallery, VIEW_DRONE
        )
        has_sat = cid in _classes_with_view(ds.gallery, VIEW_SATELLITE) or cid in _classes_with_view(
            ds.query, VIEW_SATELLITE
        )
        if cid in query_classes and not has_drone:
            raise DataError(f"eval class {cid} has no {VIEW_DRONE} sample")
        if cid in gallery_classes and not has_sat:
            raise DataError(f"eval class {cid} has no {VIEW_SATELLITE} sample")


# -- synthetic generation -----------------------------------------------------


def _box_blur(x: np.ndarray) -> np.ndarray:
    """3x3 mean filter with edge padding, per channel."""
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            out += p[:, di : di + x.shape[1], dj : dj + x.shape[2]]
    return out / 9.0


def _smooth_field(rng, c, hh, ww, cell=4):
    """Low-frequency random field: coarse noise upsampled then blurred."""
    ch = hh // cell + 2
    cw = ww // cell + 2
    coarse = rng.normal(size=(c, ch, cw))
    up = np.repeat(np.repeat(coarse, cell, axis=1), cell, axis=2)[:, :hh, :ww]
    sm = _box_blur(_box_blur(up))
    fine = 0.15 * rng.normal(size=(c, hh, ww))
    out = sm + fine
    out -= out.mean(axis=(1, 2), keepdims=True)
    out /= out.std(axis=(1, 2), keepdims=True) + 1e-9
    return out


def drone_view(latent: np.ndarray) -> np.ndarray:
    """Deterministic drone-style rendering of a class latent (soft focus)."""
    return _box_blur(latent) * 1.1


def satellite_view(latent: np.ndarray) -> np.ndarray:
    """Deterministic satellite-style rendering (band order and gain differ)."""
    return np.roll(latent, 1, axis=0) * 0.9


_VIEW_FNS = {VIEW_DRONE: drone_view, VIEW_SATELLITE: satellite_view}


def class_latent(world: np.ndarray, index: int, side: int, h: int, w: int, stride: int) -> np.ndarray:
    row, col = index // side, index % side
    return world[:, row * stride : row * stride + h, col * stride : col * stride + w]


def generate_synthetic(
    n_classes: int,
    grid_spacing_deg: float = 1e-4,
    c: int = 3,
    h: int = 16,
    w: int = 16,
    view_noise: float = 0.05,
    seed: int = 0,
    *,
    crop_stride_frac: float = 0.75,
) -> DatasetSplit:
    """Build a synthetic paired-view dataset with GPS metadata.

    ``n_classes`` training locations are laid out on one square grid and the
    same number of held-out locations on a second grid offset in latitude.
    Pure function of its arguments: a fixed seed reproduces payloads exactly.
    """
    if n_classes < 4:
        raise ConfigError(f"n_classes must be >= 4, got {n_classes}")
    if grid_spacing_deg <= 0:
        raise ConfigError(f"grid_spacing_deg must be positive, got {grid_spacing_deg}")
    if c <= 0 or h <= 0 or w <= 0:
        raise ConfigError(f"payload dims must be positive, got ({c},{h},{w})")

    side = math.ceil(math.sqrt(n_classes))
    stride = max(1, int(round(min(h, w) * crop_stride_frac)))
    world_h = (side - 1) * stride + h
    world_w = (side - 1) * stride + w
    seed_key = [int(v) for v in seed] if isinstance(seed, (list, tuple)) else [int(seed)]

    store = {}
    parts = {SPLIT_TRAIN: [], SPLIT_QUERY: [], SPLIT_GALLERY: []}
    for split_idx, region in enumerate((SPLIT_TRAIN, "eval")):
        world = _smooth_field(np.random.default_rng(seed_key + [100 + split_idx]), c, world_h, world_w)
        lat0 = split_idx * (side + 2) * grid_spacing_deg
        for i in range(n_classes):
            cid = split_idx * n_classes + i
            lat = lat0 + (i // side) * grid_spacing_deg
            lon = (i % side) * grid_spacing_deg
            latent = class_latent(world, i, side, h, w, stride)
            for view_idx, view in enumerate(VIEWS):
                if region == SPLIT_TRAIN:
                    split_name = SPLIT_TRAIN
                else:
                    split_name = SPLIT_QUERY if view == VIEW_DRONE else SPLIT_GALLERY
                rng = np.random.default_rng(seed_key + [split_idx, i, view_idx])
                payload = _VIEW_FNS[view](latent)
                if view_noise > 0:
                    payload = payload + view_noise * rng.normal(size=payload.shape)
                rel = f"{split_name}/{cid}/{view}_0.cten"
                store[rel] = np.ascontiguousarray(payload, dtype=np.float64)
                parts[split_name].append(SampleMeta(cid, view, lat, lon, rel))

    ds = DatasetSplit(train=parts[SPLIT_TRAIN], query=parts[SPLIT_QUERY], gallery=parts[SPLIT_GALLERY], store=store)
    validate_split(ds)
    return ds


# -- disk round trip -----------------------------------------------------------


def save_dataset(ds: DatasetSplit, root: str) -> None:
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, METADATA_NAME), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_METADATA_COLUMNS)
        for part in SPLITS:
            for m in ds.split(part):
                lat = "" if not ds.has_gps else repr(m.lat)
                lon = "" if not ds.has_gps else repr(m.lon)
                writer.writerow([m.class_id, m.view, lat, lon, m.payload])
                cten.write_tensor(os.path.join(root, m.payload), ds.payload(m))


def load_dataset(root: str) -> DatasetSplit:
    """Read and validate a dataset directory; invariant breaches raise DataError."""
    meta_path = os.path.join(root, METADATA_NAME)
    if not os.path.isfile(meta_path):
        raise DataError(f"missing {METADATA_NAME} under {root}")
    rows = []
    with open(meta_path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _METADATA_COLUMNS:
            raise DataError(f"{meta_path}: expected columns {_METADATA_COLUMNS}, got {reader.fieldnames}")
        rows.extend(reader)

    gps_flags = set()
    parts = {SPLIT_TRAIN: [], SPLIT_QUERY: [], SPLIT_GALLERY: []}
    for row in rows:
        rel = row["relpath"]
        split_name = rel.split("/", 1)[0]
        if split_name not in SPLITS:
            raise DataError(f"{rel}: relpath must start with one of {SPLITS}")
        if not os.path.isfile(os.path.join(root, rel)):
            raise DataError(f"{rel}: payload file missing")
        blank = row["lat"].strip() == "" and row["lon"].strip() == ""
        gps_flags.add(not blank)
        lat = math.nan if blank else float(row["lat"])
        lon = math.nan if blank else float(row["lon"])
        try:
            cid = int(row["class_id"])
        except ValueError as e:
            raise DataError(f"{rel}: bad class_id {row['class_id']!r}") from e
        parts[split_name].append(SampleMeta(cid, row["view"], lat, lon, rel))

    if len(gps_flags) > 1:
        raise DataError("mixed GPS presence: some rows have coordinates, some do not")
    has_gps = gps_flags == {True}
    ds = DatasetSplit(
        train=parts[SPLIT_TRAIN],
        query=parts[SPLIT_QUERY],
        gallery=parts[SPLIT_GALLERY],
        has_gps=has_gps,
        root=root,
    )
    validate_split(ds)
    return ds


def strip_gps(ds: DatasetSplit) -> DatasetSplit:
    """Copy of the dataset with coordinates removed (benchmark without GPS)."""

    def wipe(metas):
        return [replace(m, lat=math.nan, lon=math.nan) for m in metas]

    return DatasetSplit(
        train=wipe(ds.train),
        query=wipe(ds.query),
        gallery=wipe(ds.gallery),
        has_gps=False,
        root=ds.root,
        store=ds.store,
    )


# -- image transforms -----------------------------------------------------------


def _as_payload(x):
    if isinstance(x, Tensor):
        return x.data, True
    return np.asarray(x), False


def _wrap(arr, was_tensor):
    return Tensor(arr) if was_tensor else arr


def hflip(x):
    arr, wrapped = _as_payload(x)
    return _wrap(arr[..., ::-1].copy(), wrapped)


def shifted_crop(x, dy: int, dx: int, pad: int):
    """Zero-pad spatially by ``pad`` and crop back at offset (dy, dx).

    Offsets equal to ``pad`` reproduce the input exactly.
    """
    arr, wrapped = _as_payload(x)
    if not (0 <= dy <= 2 * pad and 0 <= dx <= 2 * pad):
        raise RangeError(f"offsets ({dy},{dx}) out of range for pad {pad}")
    c, hh, ww = arr.shape
    padded = np.pad(arr, ((0, 0), (pad, pad), (pad, pad)))
    return _wrap(padded[:, dy : dy + hh, dx : dx + ww].copy(), wrapped)


def augment(x, seed, pad: int = 2):
    """Training transform: random pad/crop shift then coin-flip mirror."""
    arr, wrapped = _as_payload(x)
    if arr.ndim != 3 or arr.shape[1] < 8 or arr.shape[2] < 8:
        raise ContractError(f"augment needs a (C,H,W) payload with H,W >= 8, got {arr.shape}")
    rng = np.random.default_rng(seed)
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    out = shifted_crop(arr, dy, dx, pad)
    if rng.random() < 0.5:
        out = hflip(out)
    return _wrap(out, wrapped)


def position_shift(x, k: int, mode: str):
    """Shift content right by ``k`` columns, refilling the left edge.

    ``black`` fills with zeros; ``flip`` mirrors the first ``k`` original
    columns.  Either way the rightmost ``k`` original columns fall off.
    """
    arr, wrapped = _as_payload(x)
    if arr.ndim != 3:
        raise ContractError(f"position_shift needs a (C,H,W) payload, got {arr.shape}")
    ww = arr.shape[-1]
    if not 0 <= k < ww:
        raise RangeError(f"shift {k} out of range for width {ww}")
    if mode not in ("black", "flip"):
        raise ConfigError(f"unknown shift mode {mode!r}")
    out = np.zeros_like(arr)
    out[..., k:] = arr[..., : ww - k]
    if mode == "flip" and k > 0:
        out[..., :k] = arr[..., k - 1 :: -1]
    return _wrap(out, wrapped)
