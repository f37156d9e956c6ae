"""The three supervision terms and their additive total.

Representation term: cross-entropy averaged over the five classifier streams.
Metric term: per-anchor hard-mining triplet over cosine distance on
unit-norm pooled features.  Mutual term: symmetric KL between the paired
drone/satellite class distributions, averaged over streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, RangeError
from .tensor import Tensor

KL_FLOOR = 1e-12
_MASK_OFFSET = 1e9


@dataclass(frozen=True)
class LossReport:
    l_rpt: float
    l_mtc: float
    l_kl: float
    total: float


def cross_entropy(logits_streams, labels) -> Tensor:
    """Mean over streams (and batch rows) of -log softmax at the true class."""
    if not logits_streams:
        raise ContractError("no logit streams")
    total = None
    for logits in logits_streams:
        logits = T.as_tensor(logits)
        if logits.ndim == 1:
            if not 0 <= int(labels) < logits.shape[0]:
                raise RangeError(f"label {labels} out of range for {logits.shape[0]} classes")
        picked = T.pick(T.log_softmax(logits, axis=-1), labels)
        term = T.neg(picked) if picked.ndim == 0 else T.tmean(T.neg(picked))
        total = term if total is None else total + term
    return total * (1.0 / len(logits_streams))


def hard_mining_triplet(embeddings: Tensor, labels, margin: float = 0.3, literal_max: bool = False) -> Tensor:
    """Batch-hard triplet on cosine distance d = 1 - <a, b>.

    Per anchor, the hardest positive is the same-class sample at maximum
    distance and the hardest negative the other-class sample at minimum
    distance; the hinge max(0, d_ap - d_an + margin) is averaged over
    anchors.  ``literal_max`` instead returns the single worst triplet.
    """
    embeddings = T.as_tensor(embeddings)
    if embeddings.ndim != 2:
        raise ContractError(f"embeddings must be (B, D), got {embeddings.shape}")
    labels = np.asarray(labels)
    b = embeddings.shape[0]
    if labels.shape != (b,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {b}")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    if not pos_mask.any(axis=1).all():
        lonely = sorted(set(labels[~pos_mask.any(axis=1)].tolist()))
        raise ContractError(f"classes without a positive in batch: {lonely}")
    neg_mask = ~same

    dist = 1.0 - T.matmul(embeddings, T.permute(embeddings, (1, 0)))
    # Constant offsets push masked-out entries beyond any real distance.
    hardest_pos = T.tmax(dist + Tensor(np.where(pos_mask, 0.0, -_MASK_OFFSET)), axis=1)
    hardest_neg = T.tmin(dist + Tensor(np.where(neg_mask, 0.0, _MASK_OFFSET)), axis=1)
    per_anchor = T.relu(hardest_pos - hardest_neg + margin)
    if literal_max:
        return T.tmax(per_anchor, axis=0)
    return T.tmean(per_anchor)


def _kl(p: Tensor, q: Tensor) -> Tensor:
    lp = T.log(T.clamp_min(p, KL_FLOOR))
    lq = T.log(T.clamp_min(q, KL_FLOOR))
    out = T.tsum(p * (lp - lq), axis=-1)
    return out if out.ndim == 0 else T.tmean(out)


def mutual_kl(logits_d, logits_s) -> Tensor:
    """Symmetric KL between paired view distributions, mean over streams."""
    if len(logits_d) != len(logits_s) or not logits_d:
        raise ContractError("mutual_kl needs equally many streams per view")
    total = None
    for ld, ls in zip(logits_d, logits_s):
        od = T.softmax(T.as_tensor(ld), axis=-1)
        os_ = T.softmax(T.as_tensor(ls), axis=-1)
        term = _kl(od, os_) + _kl(os_, od)
        total = term if total is None else total + term
    return total * (1.0 / len(logits_d))


def total_loss(l_rpt: Tensor, l_mtc: Tensor, l_kl: Tensor):
    """Unweighted sum of the three terms, plus a plain-float report."""
    total = l_rpt + l_mtc + l_kl
    report = LossReport(
        l_rpt=l_rpt.item(),
        l_mtc=l_mtc.item(),
        l_kl=l_kl.item(),
        total=l_rpt.item() + l_mtc.item() + l_kl.item(),
    )
    return total, report
