"""Training loop: curriculum batches, SGD with per-group learning rates,
milestone decay, checkpointing, and resumable run state.

Every source of randomness is derived from (seed, epoch, batch, slot), so a
run is a pure function of its configuration and resuming from a checkpoint
reproduces the uninterrupted trajectory bit-for-bit at 64-bit precision.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import cten
from . import data as D
from . import evaluation as E
from . import losses as L
from . import sampler as S
from . import tensor as T
from .config import TrainConfig, build_model_config
from .errors import CheckpointError, ConfigError, NumericError
from .model import CrossViewModel, l2_normalize
from .tensor import Tensor, backward

LOG_COLUMNS = ["epoch", "step", "l_rpt", "l_mtc", "l_kl", "total"]

_SEED_DATA = 11
_SEED_AUG = 5


def lr_at(epoch: int, base: float, milestones, decay: float) -> float:
    """Base rate decayed once per milestone already reached."""
    passed = sum(1 for m in milestones if epoch >= m)
    return base * decay**passed


class SGDMomentum:
    """Momentum SGD over named parameters with two learning-rate groups."""

    def __init__(self, params: dict, momentum: float, weight_decay: float):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = {name: np.zeros_like(t.data) for name, t in params.items()}

    @staticmethod
    def group_of(name: str) -> str:
        return "backbone" if name.startswith("backbone.") else "new"

    def step(self, params: dict, lr_backbone: float, lr_new: float) -> None:
        for name, t in params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            g = g + self.weight_decay * t.data
            v = self.velocities[name]
            v *= self.momentum
            v += g
            lr = lr_backbone if self.group_of(name) == "backbone" else lr_new
            t.data -= lr * v


@dataclass
class RunState:
    """Everything needed to resume: position, optimizer, best score, table."""

    epoch: int
    step: int
    best_metric: float
    seed: int
    table_stamp: int = -1


@dataclass
class TrainResult:
    out_dir: str
    final_checkpoint: str
    best_checkpoint: str
    metrics: E.MetricsReport
    refresh_epochs: list = field(default_factory=list)
    history: list = field(default_factory=list)  # (epoch, recall@1, sdm@1)
    metrics_path: str = ""
    log_path: str = ""


def build_dataset(cfg: TrainConfig) -> D.DatasetSplit:
    dc = cfg.data
    if dc.root:
        return D.load_dataset(dc.root)
    if not dc.synthetic:
        raise ConfigError("no data.root given and data.synthetic is off")
    return D.generate_synthetic(
        dc.n_classes,
        dc.grid_spacing_deg,
        dc.channels,
        dc.height,
        dc.width,
        dc.view_noise,
        seed=[cfg.seed, _SEED_DATA],
    )


def _train_pairs(ds: D.DatasetSplit) -> dict:
    """class id -> (drone meta, satellite meta), first of each by locator."""
    pairs = {}
    for cid in ds.classes("train"):
        metas = [m for m in ds.train if m.class_id == cid]
        drone = min((m for m in metas if m.view == D.VIEW_DRONE), key=lambda m: m.payload)
        sat = min((m for m in metas if m.view == D.VIEW_SATELLITE), key=lambda m: m.payload)
        pairs[cid] = (drone, sat)
    return pairs


def _assemble_batch(ds, pairs, plan, label_of, epoch, batch_idx, cfg):
    drones, sats, labels = [], [], []
    for si, slot in enumerate(plan.slots):
        drone_meta, sat_meta = pairs[slot.class_id]
        for vi, meta in enumerate((drone_meta, sat_meta)):
            arr = D.augment(
                ds.payload(meta),
                seed=[cfg.seed, _SEED_AUG, epoch, batch_idx, si, vi],
                pad=cfg.augment_pad,
            )
            (drones if vi == 0 else sats).append(arr)
        labels.append(label_of[slot.class_id])
    return np.stack(drones), np.stack(sats), np.array(labels)


def _train_step(model, xd, xs, labels, margin):
    out_d = model.forward(Tensor(xd))
    out_s = model.forward(Tensor(xs))

    l_rpt = (L.cross_entropy(out_d.logits, labels) + L.cross_entropy(out_s.logits, labels)) * 0.5

    pooled = T.concat([T.global_avg_pool(out_d.fused), T.global_avg_pool(out_s.fused)], axis=0)
    emb = l2_normalize(pooled)
    l_mtc = L.hard_mining_triplet(emb, np.concatenate([labels, labels]), margin=margin)

    l_kl = L.mutual_kl(out_d.logits, out_s.logits)
    return L.total_loss(l_rpt, l_mtc, l_kl)


def _dump_diagnostics(path, epoch, step, report, model):
    lines = [
        f"aborted at epoch {epoch} step {step}",
        f"l_rpt={report.l_rpt!r} l_mtc={report.l_mtc!r} l_kl={report.l_kl!r} total={report.total!r}",
    ]
    for name in sorted(model.params):
        t = model.params[name]
        gnorm = float(np.abs(t.grad).max()) if t.grad is not None else float("nan")
        lines.append(
            f"param {name} |data|max={float(np.abs(t.data).max())!r} "
            f"finite={bool(np.isfinite(t.data).all())} |grad|max={gnorm!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# -- run state persistence -------------------------------------------------------


def save_run_state(directory, state: RunState, optimizer: SGDMomentum, table) -> None:
    lines = [
        "version 1",
        f"epoch {state.epoch}",
        f"step {state.step}",
        f"best {state.best_metric!r}",
        f"seed {state.seed}",
        f"table_stamp {state.table_stamp}",
    ]
    for name in sorted(optimizer.velocities):
        rel = os.path.join("state", name + ".cten")
        cten.write_tensor(os.path.join(directory, rel), optimizer.velocities[name])
        lines.append(f"velocity {name} {rel}")
    if table is not None:
        cten.write_tensor(os.path.join(directory, "state", "table.cten"), table.matrix)
        lines.append("table_ids " + ",".join(str(int(c)) for c in table.class_ids))
    with open(os.path.join(directory, "runstate.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_run_state(directory, optimizer: SGDMomentum):
    path = os.path.join(directory, "runstate.txt")
    if not os.path.isfile(path):
        raise CheckpointError(f"missing runstate under {directory}")
    state = RunState(epoch=0, step=0, best_metric=-math.inf, seed=0)
    table_ids = None
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            parts = raw.split()
            if not parts:
                continue
            key = parts[0]
            if key == "epoch":
                state.epoch = int(parts[1])
            elif key == "step":
                state.step = int(parts[1])
            elif key == "best":
                state.best_metric = float(parts[1])
            elif key == "seed":
                state.seed = int(parts[1])
            elif key == "table_stamp":
                state.table_stamp = int(parts[1])
            elif key == "velocity":
                name, rel = parts[1], parts[2]
                if name not in optimizer.velocities:
                    raise CheckpointError(f"unknown velocity buffer {name}")
                optimizer.velocities[name] = cten.read_tensor(os.path.join(directory, rel))
            elif key == "table_ids":
                table_ids = np.array([int(v) for v in parts[1].split(",")])
    table = None
    if table_ids is not None:
        matrix = cten.read_tensor(os.path.join(directory, "state", "table.cten"))
        table = S.EmbeddingTable(class_ids=table_ids, matrix=matrix, stamp=state.table_stamp)
    return state, table


# -- the training loop -----------------------------------------------------------


def train(cfg: TrainConfig, ds: D.DatasetSplit | None = None, out_dir: str = "run", resume_from: str | None = None) -> TrainResult:
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    prev_dtype = T.default_dtype()
    T.set_default_dtype(np.float32 if cfg.precision == "f32" else np.float64)
    try:
        return _train_inner(cfg, ds, out_dir, resume_from)
    finally:
        T.set_default_dtype(prev_dtype)


def _train_inner(cfg, ds, out_dir, resume_from):
    if ds is None:
        ds = build_dataset(cfg)
    train_classes = ds.classes("train")
    label_of = {cid: i for i, cid in enumerate(train_classes)}
    pairs = _train_pairs(ds)
    sample_shape = ds.payload(ds.train[0]).shape

    mcfg = build_model_config(cfg, len(train_classes), sample_shape[1:], sample_shape[0])
    scfg = cfg.resolved_sampler()

    model = CrossViewModel.init(mcfg, seed=cfg.seed)
    optimizer = SGDMomentum(model.params, cfg.momentum, cfg.weight_decay)
    state = RunState(epoch=0, step=0, best_metric=-math.inf, seed=cfg.seed)
    table = None
    if resume_from is not None:
        model = CrossViewModel.load(resume_from, expected=mcfg)
        optimizer = SGDMomentum(model.params, cfg.momentum, cfg.weight_decay)
        state, table = load_run_state(resume_from, optimizer)

    final_dir = os.path.join(out_dir, "checkpoint_final")
    best_dir = os.path.join(out_dir, "checkpoint_best")
    log_path = os.path.join(out_dir, "train_log.csv")
    metrics_path = os.path.join(out_dir, "metrics.csv")

    refresh_epochs = []
    history = []
    log_rows = []
    for epoch in range(state.epoch, cfg.epochs):
        if S.should_refresh(epoch, scfg):
            table = S.refresh_similarity(model, ds, epoch)
            state.table_stamp = table.stamp
            refresh_epochs.append(epoch)
        plans = S.build_epoch_plan(epoch, ds, table, scfg)
        lr_b = lr_at(epoch, cfg.lr_backbone, cfg.lr_milestones, cfg.lr_decay)
        lr_n = lr_at(epoch, cfg.lr_new, cfg.lr_milestones, cfg.lr_decay)
        for b, plan in enumerate(plans):
            xd, xs, labels = _assemble_batch(ds, pairs, plan, label_of, epoch, b, cfg)
            model.zero_grad()
            total, report = _train_step(model, xd, xs, labels, cfg.margin)
            if not math.isfinite(report.total):
                diag = os.path.join(out_dir, "diagnostic.txt")
                _dump_diagnostics(diag, epoch, state.step, report, model)
                raise NumericError(f"non-finite loss at epoch {epoch} step {state.step}; state in {diag}")
            backward(total)
            optimizer.step(model.params, lr_b, lr_n)
            log_rows.append([epoch, state.step, report.l_rpt, report.l_mtc, report.l_kl, report.total])
            state.step += 1
        state.epoch = epoch + 1
        if (epoch + 1) % cfg.validate_every == 0 or epoch + 1 == cfg.epochs:
            report, _ = E.evaluate_split(model, ds)
            history.append((epoch, report.recall1, report.sdm1))
            score = report.sdm1 if math.isfinite(report.sdm1) else report.recall1
            if score > state.best_metric:
                state.best_metric = score
                model.save(best_dir)
                save_run_state(best_dir, state, optimizer, table)

    model.save(final_dir)
    save_run_state(final_dir, state, optimizer, table)

    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in log_rows:
            writer.writerow(row[:2] + [repr(v) for v in row[2:]])

    final_report, _ = E.evaluate_split(model, ds)
    E.write_metrics_csv(metrics_path, [("query", "none", 0, final_report)])

    return TrainResult(
        out_dir=out_dir,
        final_checkpoint=final_dir,
        best_checkpoint=best_dir,
        metrics=final_report,
        refresh_epochs=refresh_epochs,
        history=history,
        metrics_path=metrics_path,
        log_path=log_path,
    )


def evaluate_checkpoint(cfg: TrainConfig, checkpoint: str, ds: D.DatasetSplit | None = None, out_dir: str | None = None):
    """Load a checkpoint, score the query split, optionally write metrics.csv."""
    if ds is None:
        ds = build_dataset(cfg)
    sample_shape = ds.payload(ds.train[0]).shape
    mcfg = build_model_config(cfg, len(ds.classes("train")), sample_shape[1:], sample_shape[0])
    model = CrossViewModel.load(checkpoint, expected=mcfg)
    report, rrs = E.evaluate_split(model, ds)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        E.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), [("query", "none", 0, report)])
    return report, rrs, model
