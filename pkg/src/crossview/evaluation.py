"""Retrieval engine, metric suite, and robustness sweep.

Queries and gallery items are matched by dot product on unit-norm
embeddings; because the embeddings are normalized this ranking coincides
with ascending Euclidean distance.  Metrics: Recall@K, recall within the
top 1% of the gallery, average precision, and a rank-weighted score that
discounts each retrieved item by the exponential of its spatial distance
to the query.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import VIEW_DRONE, VIEW_SATELLITE, DatasetSplit, position_shift
from .errors import ContractError, RangeError
from .tensor import Tensor, no_grad

SDM_SCALE = 5e3
METRICS_COLUMNS = [
    "split", "mode", "pad_k",
    "recall@1", "recall@5", "recall@10", "r@top1",
    "ap", "sdm@1", "sdm@3", "sdm@5",
]


@dataclass
class RankedRetrieval:
    """Gallery ranking for one query, best match first."""

    query_index: int
    query_class: int
    query_coord: tuple | None
    gallery_indices: np.ndarray
    gallery_classes: np.ndarray
    scores: np.ndarray
    gallery_coords: list | None


@dataclass
class MetricsReport:
    recall1: float
    recall5: float
    recall10: float
    r_top1: float | None
    ap: float
    sdm1: float
    sdm3: float
    sdm5: float
    n_queries: int

    def row(self, split: str, mode: str, pad_k: int) -> list:
        vals = [self.recall1, self.recall5, self.recall10, self.r_top1,
                self.ap, self.sdm1, self.sdm3, self.sdm5]
        return [split, mode, pad_k] + ["" if v is None else repr(float(v)) for v in vals]


def retrieve(
    query_emb,
    gallery_embs,
    *,
    gallery_classes=None,
    gallery_coords=None,
    query_class: int = -1,
    query_coord=None,
    query_index: int = 0,
) -> RankedRetrieval:
    """Sort the gallery by descending dot product; ties keep gallery order."""
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_embs, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ContractError(f"gallery must be a non-empty (G, D) matrix, got {g.shape}")
    if q.shape != (g.shape[1],):
        raise ContractError(f"query shape {q.shape} does not match gallery dim {g.shape[1]}")
    scores = g @ q
    order = np.argsort(-scores, kind="stable")
    classes = (
        np.asarray(gallery_classes)[order]
        if gallery_classes is not None
        else np.full(len(order), -1)
    )
    coords = [gallery_coords[i] for i in order] if gallery_coords is not None else None
    return RankedRetrieval(
        query_index=query_index,
        query_class=query_class,
        query_coord=tuple(query_coord) if query_coord is not None else None,
        gallery_indices=order,
        gallery_classes=classes,
        scores=scores[order],
        gallery_coords=coords,
    )


def recall_at_k(rr: RankedRetrieval, k: int) -> int:
    """1 iff a gallery item of the query's class appears in the top k."""
    if k < 1:
        raise RangeError(f"k must be >= 1, got {k}")
    if k > len(rr.gallery_classes):
        raise RangeError(f"k={k} exceeds gallery size {len(rr.gallery_classes)}")
    return int(np.any(rr.gallery_classes[:k] == rr.query_class))


def average_precision(rr: RankedRetrieval) -> float:
    """Mean precision at the rank of each same-class gallery item."""
    relevant = rr.gallery_classes == rr.query_class
    n_rel = int(relevant.sum())
    if n_rel == 0:
        raise ContractError(f"query class {rr.query_class} has no relevant gallery item")
    ranks = np.flatnonzero(relevant) + 1
    hits = np.arange(1, n_rel + 1)
    return float(np.mean(hits / ranks))


def sdm_at_k(rr: RankedRetrieval, k: int, s: float = SDM_SCALE) -> float:
    """Rank-weighted mean of exp(-s * distance) over the top k items."""
    if rr.query_coord is None or rr.gallery_coords is None:
        raise ContractError("spatial metric needs query and gallery coordinates")
    if k < 1:
        raise RangeError(f"k must be >= 1, got {k}")
    if k > len(rr.gallery_classes):
        raise RangeError(f"k={k} exceeds gallery size {len(rr.gallery_classes)}")
    qx, qy = rr.query_coord
    num = 0.0
    den = 0.0
    for i in range(1, k + 1):
        gx, gy = rr.gallery_coords[i - 1]
        d = math.sqrt((qx - gx) ** 2 + (qy - gy) ** 2)
        weight = k - i + 1
        num += weight * math.exp(-s * d)
        den += weight
    return num / den


def r_at_top1(rrs) -> float:
    """Recall within the top ceil(1%) of the gallery, averaged over queries."""
    if not rrs:
        raise ContractError("no retrievals")
    gallery_size = len(rrs[0].gallery_classes)
    if gallery_size < 100:
        raise RangeError(f"gallery of {gallery_size} is too small for a top-1% cutoff")
    k = math.ceil(0.01 * gallery_size)
    return float(np.mean([recall_at_k(rr, k) for rr in rrs]))


def aggregate(rrs) -> MetricsReport:
    if not rrs:
        raise ContractError("no retrievals to aggregate")
    gallery_size = len(rrs[0].gallery_classes)
    has_coords = rrs[0].query_coord is not None and rrs[0].gallery_coords is not None
    return MetricsReport(
        recall1=float(np.mean([recall_at_k(rr, 1) for rr in rrs])),
        recall5=float(np.mean([recall_at_k(rr, min(5, gallery_size)) for rr in rrs])),
        recall10=float(np.mean([recall_at_k(rr, min(10, gallery_size)) for rr in rrs])),
        r_top1=r_at_top1(rrs) if gallery_size >= 100 else None,
        ap=float(np.mean([average_precision(rr) for rr in rrs])),
        sdm1=float(np.mean([sdm_at_k(rr, 1) for rr in rrs])) if has_coords else math.nan,
        sdm3=float(np.mean([sdm_at_k(rr, min(3, gallery_size)) for rr in rrs])) if has_coords else math.nan,
        sdm5=float(np.mean([sdm_at_k(rr, min(5, gallery_size)) for rr in rrs])) if has_coords else math.nan,
        n_queries=len(rrs),
    )


def write_metrics_csv(path, rows) -> None:
    """rows: iterable of (split, mode, pad_k, MetricsReport)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for split, mode, pad_k, report in rows:
            writer.writerow(report.row(split, mode, pad_k))


# -- embedding and end-to-end evaluation ---------------------------------------


def eval_threads() -> int:
    raw = os.environ.get("CEUSP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def embed_batch(model, arrays: np.ndarray, threads: int | None = None) -> np.ndarray:
    """Unit-norm embeddings for a stack of payloads, optionally fanned out."""
    threads = eval_threads() if threads is None else max(1, threads)
    with no_grad():
        if threads == 1 or len(arrays) < 2 * threads:
            return model.extract_embedding(Tensor(arrays)).data.copy()
        chunks = np.array_split(np.arange(len(arrays)), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda idx: model.extract_embedding(Tensor(arrays[idx])).data, chunks))
        return np.concatenate(parts, axis=0)


def evaluate_split(model, ds: DatasetSplit, *, shift=None, threads: int | None = None):
    """Embed drone queries against the satellite gallery and score them.

    ``shift`` is an optional (k, mode) pair applied to every query payload
    before embedding.  Returns (MetricsReport, retrievals).
    """
    queries = [m for m in ds.query if m.view == VIEW_DRONE]
    gallery = [m for m in ds.gallery if m.view == VIEW_SATELLITE]
    if not queries or not gallery:
        raise ContractError("evaluation needs drone queries and a satellite gallery")

    g_arrays = np.stack([ds.payload(m) for m in gallery])
    q_payloads = [ds.payload(m) for m in queries]
    if shift is not None:
        k, mode = shift
        q_payloads = [position_shift(p, k, mode) for p in q_payloads]
    q_arrays = np.stack(q_payloads)

    g_embs = embed_batch(model, g_arrays, threads)
    q_embs = embed_batch(model, q_arrays, threads)

    g_classes = np.array([m.class_id for m in gallery])
    g_coords = [(m.lat, m.lon) for m in gallery] if ds.has_gps else None
    rrs = []
    for i, meta in enumerate(queries):
        rrs.append(
            retrieve(
                q_embs[i],
                g_embs,
                gallery_classes=g_classes,
                gallery_coords=g_coords,
                query_class=meta.class_id,
                query_coord=(meta.lat, meta.lon) if ds.has_gps else None,
                query_index=i,
            )
        )
    return aggregate(rrs), rrs


DEFAULT_SHIFT_KS = (0, 10, 20, 30, 40, 50, 60)
DEFAULT_SHIFT_MODES = ("black", "flip")


def robustness_sweep(model, ds: DatasetSplit, ks=DEFAULT_SHIFT_KS, modes=DEFAULT_SHIFT_MODES, threads=None):
    """Re-evaluate with every (mode, shift) perturbation of the query images.

    Returns (baseline_report, rows) where rows are (mode, k, report, ap_delta,
    sdm1_delta) with deltas taken against the k=0 column of that mode.
    """
    base, _ = evaluate_split(model, ds, threads=threads)
    rows = []
    for mode in modes:
        ap0 = None
        sdm0 = None
        for k in ks:
            report, _ = evaluate_split(model, ds, shift=(k, mode), threads=threads)
            if ap0 is None:
                ap0, sdm0 = report.ap, report.sdm1
            rows.append((mode, k, report, report.ap - ap0, report.sdm1 - sdm0))
    return base, rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "pad_k", "ap", "ap_delta", "sdm@1", "sdm1_delta"])
        for mode, k, report, ap_delta, sdm1_delta in rows:
            writer.writerow([mode, k, repr(report.ap), repr(ap_delta), repr(report.sdm1), repr(sdm1_delta)])


def export_attention(x, model) -> np.ndarray:
    """Channel-wise L2 magnitude of the fused attention output, (H', W')."""
    with no_grad():
        fmap = model.backbone_forward(x)
        fused, _ = model.rca_forward(fmap)
    data = fused.data
    return np.sqrt((data * data).sum(axis=-3))
