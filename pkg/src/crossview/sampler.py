"""Batch composition with a curriculum over three negative sources.

Each batch is one anchor class plus B-1 negatives drawn from three pools:
geographically nearest classes (GDS), classes whose gallery-view embeddings
are most similar to the anchor's (FSS), and uniform random classes (RS).
Before the initiation epoch batches are purely random; from then until the
late phase the split is 50/25/25 (GDS/FSS/RS) over the batch, and afterwards
25/50/25.  The embedding table behind FSS is rebuilt on a fixed epoch
interval from the current model snapshot.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import VIEW_SATELLITE, DatasetSplit
from .errors import ConfigError, ContractError, RangeError, StaleEmbeddingsError
from .tensor import Tensor, no_grad

TAG_ANCHOR = "anchor"
TAG_GDS = "GDS"
TAG_FSS = "FSS"
TAG_RS = "RS"

STRATEGY_MIXED = "mixed"
STRATEGY_RANDOM = "random"

AUDIT_COLUMNS = ["epoch", "batch", "slot", "class_id", "tag"]


@dataclass
class SamplerConfig:
    batch_classes: int = 32
    init_epoch: int = 20
    late_phase_epoch: int | None = 70  # None: resolved to the first LR milestone
    refresh_interval: int = 6
    early_ratio: tuple = (0.50, 0.25, 0.25)
    late_ratio: tuple = (0.25, 0.50, 0.25)
    strategy: str = STRATEGY_MIXED
    seed: int = 0

    def __post_init__(self):
        self.early_ratio = tuple(float(v) for v in self.early_ratio)
        self.late_ratio = tuple(float(v) for v in self.late_ratio)
        self.validate()

    def validate(self) -> None:
        if self.batch_classes < 2:
            raise ConfigError(f"batch_classes must be >= 2, got {self.batch_classes}")
        if self.init_epoch < 0 or (
            self.late_phase_epoch is not None and self.late_phase_epoch < self.init_epoch
        ):
            raise ConfigError(
                f"need 0 <= init_epoch <= late_phase_epoch, got {self.init_epoch}, {self.late_phase_epoch}"
            )
        if self.refresh_interval < 1:
            raise ConfigError(f"refresh_interval must be >= 1, got {self.refresh_interval}")
        for name, ratio in (("early_ratio", self.early_ratio), ("late_ratio", self.late_ratio)):
            if len(ratio) != 3 or any(v < 0 for v in ratio) or abs(sum(ratio) - 1.0) > 1e-9:
                raise ConfigError(f"{name} must be three non-negative values summing to 1, got {ratio}")
        if self.strategy not in (STRATEGY_MIXED, STRATEGY_RANDOM):
            raise ConfigError(f"unknown strategy {self.strategy!r}")


@dataclass
class EmbeddingTable:
    """One unit-norm row per class, from its gallery-view image; stamped by epoch."""

    class_ids: np.ndarray
    matrix: np.ndarray
    stamp: int

    def row(self, class_id: int) -> np.ndarray:
        idx = np.searchsorted(self.class_ids, class_id)
        if idx >= len(self.class_ids) or self.class_ids[idx] != class_id:
            raise ContractError(f"class {class_id} missing from embedding table")
        return self.matrix[idx]


@dataclass(frozen=True)
class PlanSlot:
    class_id: int
    tag: str


@dataclass
class BatchPlan:
    slots: list = field(default_factory=list)

    def class_ids(self) -> list:
        return [s.class_id for s in self.slots]

    def tag_counts(self) -> dict:
        counts = {TAG_ANCHOR: 0, TAG_GDS: 0, TAG_FSS: 0, TAG_RS: 0}
        for s in self.slots:
            counts[s.tag] += 1
        return counts


def phase_ratios(epoch: int, cfg: SamplerConfig) -> tuple:
    """(GDS, FSS, RS) fractions active at this epoch."""
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")
    if cfg.strategy == STRATEGY_RANDOM or epoch < cfg.init_epoch:
        return (0.0, 0.0, 1.0)
    if cfg.late_phase_epoch is None:
        raise ConfigError("late_phase_epoch was never resolved")
    if epoch < cfg.late_phase_epoch:
        return cfg.early_ratio
    return cfg.late_ratio


def _largest_remainder(raw, total: int):
    floors = [int(math.floor(v)) for v in raw]
    rem = total - sum(floors)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - floors[i]), i))
    for i in order[:rem]:
        floors[i] += 1
    return floors


def slot_quotas(epoch: int, cfg: SamplerConfig, has_gps: bool = True) -> tuple:
    """Integer (GDS, FSS, RS) negative-slot counts; the anchor fills one RS slot."""
    g, f, r = phase_ratios(epoch, cfg)
    if not has_gps:
        g, f = 0.0, f + g
    b = cfg.batch_classes
    gq, fq, rq = _largest_remainder([g * b, f * b, r * b], b)
    if rq > 0:
        rq -= 1
    elif gq >= fq and gq > 0:
        gq -= 1
    else:
        fq -= 1
    return gq, fq, rq


def nearest_geo(anchor_class: int, coords: dict, k: int):
    """The k classes closest to the anchor in (lat, lon) degrees, ties by id."""
    if anchor_class not in coords:
        raise ContractError(f"no coordinates for class {anchor_class}")
    others = [cid for cid in coords if cid != anchor_class]
    if k > len(others):
        raise RangeError(f"k={k} but only {len(others)} other classes exist")
    if k == 0:
        return []
    alat, alon = coords[anchor_class]
    ids = np.array(sorted(others))
    d2 = np.array([(coords[c][0] - alat) ** 2 + (coords[c][1] - alon) ** 2 for c in ids])
    order = np.lexsort((ids, d2))
    return [int(ids[i]) for i in order[:k]]


def nearest_feat(anchor_class: int, table: EmbeddingTable, k: int):
    """The k classes most cosine-similar to the anchor's row, ties by id."""
    if table is None or len(table.class_ids) == 0:
        raise ContractError("empty embedding table")
    others = table.class_ids != anchor_class
    ids = table.class_ids[others]
    if k > len(ids):
        raise RangeError(f"k={k} but only {len(ids)} other classes exist")
    if k == 0:
        return []
    sims = table.matrix[others] @ table.row(anchor_class)
    order = np.lexsort((ids, -sims))
    return [int(ids[i]) for i in order[:k]]


def refresh_similarity(model, ds: DatasetSplit, epoch: int) -> EmbeddingTable:
    """Re-embed every training class's satellite view with the current model."""
    by_class = {}
    for m in ds.train:
        if m.view == VIEW_SATELLITE and m.class_id not in by_class:
            by_class[m.class_id] = m
    ids = np.array(sorted(by_class))
    batch = np.stack([ds.payload(by_class[c]) for c in ids])
    with no_grad():
        emb = model.extract_embedding(Tensor(batch))
    return EmbeddingTable(class_ids=ids, matrix=emb.data.copy(), stamp=int(epoch))


def should_refresh(epoch: int, cfg: SamplerConfig) -> bool:
    if cfg.strategy == STRATEGY_RANDOM:
        return False
    return epoch >= cfg.init_epoch and (epoch - cfg.init_epoch) % cfg.refresh_interval == 0


def build_epoch_plan(epoch: int, ds: DatasetSplit, table, cfg: SamplerConfig):
    """One BatchPlan per training class, each anchored by that class.

    Deterministic in (seed, epoch, table stamp).  Negative slots follow the
    phase quota; ranked candidates already present in the batch are skipped
    in favor of the next-ranked one.
    """
    classes = ds.classes("train")
    n = len(classes)
    if cfg.batch_classes > n:
        raise ConfigError(f"batch of {cfg.batch_classes} classes exceeds {n} training classes")
    gq, fq, rq = slot_quotas(epoch, cfg, has_gps=ds.has_gps)
    if fq > 0:
        if table is None:
            raise StaleEmbeddingsError(f"epoch {epoch} needs feature similarities but no table exists")
        if epoch - table.stamp >= cfg.refresh_interval:
            raise StaleEmbeddingsError(
                f"table stamped {table.stamp} is stale at epoch {epoch} (interval {cfg.refresh_interval})"
            )
    coords = ds.coords() if ds.has_gps else None

    stamp = table.stamp if table is not None else -1
    rng = np.random.default_rng([cfg.seed, epoch, stamp + 1])
    anchors = [classes[i] for i in rng.permutation(n)]

    plans = []
    for anchor in anchors:
        used = {anchor}
        slots = [PlanSlot(anchor, TAG_ANCHOR)]
        if gq > 0:
            for cid in nearest_geo(anchor, coords, n - 1):
                if len(slots) > gq:
                    break
                if cid not in used:
                    used.add(cid)
                    slots.append(PlanSlot(cid, TAG_GDS))
        if fq > 0:
            want = gq + fq + 1
            for cid in nearest_feat(anchor, table, n - 1):
                if len(slots) >= want:
                    break
                if cid not in used:
                    used.add(cid)
                    slots.append(PlanSlot(cid, TAG_FSS))
        remaining = [c for c in classes if c not in used]
        for i in rng.permutation(len(remaining))[:rq]:
            slots.append(PlanSlot(remaining[i], TAG_RS))
        plans.append(BatchPlan(slots))
    return plans


def write_audit_csv(path, epoch: int, plans) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AUDIT_COLUMNS)
        for b, plan in enumerate(plans):
            for s, slot in enumerate(plan.slots):
                writer.writerow([epoch, b, s, slot.class_id, slot.tag])
