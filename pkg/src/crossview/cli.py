"""Command-line surface: data generation, training, evaluation, audits.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checks, cten
from . import evaluation as E
from . import sampler as S
from .config import TrainConfig, desk_config, load_config
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    CrossViewError,
    DataError,
    DomainError,
    NormalizationError,
    NumericError,
    RangeError,
    ShapeError,
    StaleEmbeddingsError,
)
from .model import CrossViewModel
from .train import build_dataset, evaluate_checkpoint, train

GRADCHECK_TOL = 1e-5


class UsageError(CrossViewError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="crossview", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="run", help="output directory")

    p = sub.add_parser("gen-data", help="write a synthetic dataset to --out")
    common(p)

    p = sub.add_parser("train", help="train on the configured dataset")
    common(p)
    p.add_argument("--resume", help="checkpoint directory to resume from")

    p = sub.add_parser("eval", help="score a checkpoint on the query split")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    common(p)

    p = sub.add_parser("sample-audit", help="dump one epoch's batch plans as CSV")
    common(p)
    p.add_argument("--epoch", type=int, required=True)

    p = sub.add_parser("shift-sweep", help="position-shift robustness table")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("export-attn", help="write the fused attention magnitude map")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="CTEN payload to analyze")
    return parser


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_gen_data(args) -> int:
    from .data import save_dataset

    cfg = _load_cfg(args)
    cfg.data.root = None  # always generate, never echo back an input dir
    ds = build_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(ds, args.out)
    n = len(ds.classes("train")) + len(ds.classes("gallery"))
    print(f"wrote {n} classes under {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    result = train(cfg, out_dir=args.out, resume_from=args.resume)
    m = result.metrics
    print(
        f"final recall@1={m.recall1:.4f} sdm@1={m.sdm1:.4f} ap={m.ap:.4f} "
        f"(checkpoints in {result.out_dir})"
    )
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    report, _, _ = evaluate_checkpoint(cfg, args.checkpoint, out_dir=args.out)
    print(f"recall@1={report.recall1:.4f} sdm@1={report.sdm1:.4f} ap={report.ap:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    worst = checks.full_battery([seed])
    max_err = max(worst.values())
    print(f"max_rel_err={max_err:.3e}")
    if max_err >= GRADCHECK_TOL:
        bad = {k: v for k, v in worst.items() if v >= GRADCHECK_TOL}
        raise NumericError(f"gradient check failed: {bad}")
    return 0


def _cmd_sample_audit(args) -> int:
    cfg = _load_cfg(args)
    ds = build_dataset(cfg)
    scfg = cfg.resolved_sampler()
    table = None
    if S.slot_quotas(args.epoch, scfg, has_gps=ds.has_gps)[1] > 0:
        model_cfg_shape = ds.payload(ds.train[0]).shape
        from .config import build_model_config

        mcfg = build_model_config(cfg, len(ds.classes("train")), model_cfg_shape[1:], model_cfg_shape[0])
        model = CrossViewModel.init(mcfg, seed=cfg.seed)
        table = S.refresh_similarity(model, ds, args.epoch)
    plans = S.build_epoch_plan(args.epoch, ds, table, scfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"sample_audit_epoch{args.epoch}.csv")
    S.write_audit_csv(path, args.epoch, plans)
    counts = plans[0].tag_counts()
    print(
        f"epoch {args.epoch}: {len(plans)} batches, per-batch tags "
        f"GDS={counts[S.TAG_GDS]} FSS={counts[S.TAG_FSS]} RS={counts[S.TAG_RS]} "
        f"anchor={counts[S.TAG_ANCHOR]} -> {path}"
    )
    return 0


def _cmd_shift_sweep(args) -> int:
    cfg = _load_cfg(args)
    ds = build_dataset(cfg)
    _, _, model = evaluate_checkpoint(cfg, args.checkpoint, ds=ds)
    base, rows = E.robustness_sweep(model, ds)
    os.makedirs(args.out, exist_ok=True)
    E.write_metrics_csv(
        os.path.join(args.out, "metrics.csv"),
        [("query", "none", 0, base)] + [("query", mode, k, rep) for mode, k, rep, _, _ in rows],
    )
    sweep_path = os.path.join(args.out, "shift_sweep.csv")
    E.write_sweep_csv(sweep_path, rows)
    print(f"wrote {len(rows)} sweep rows to {sweep_path}")
    return 0


def _cmd_export_attn(args) -> int:
    model = CrossViewModel.load(args.checkpoint)
    payload = cten.read_tensor(args.input)
    attn = E.export_attention(payload, model)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "attention.cten")
    cten.write_tensor(path, np.asarray(attn))
    print(f"wrote {attn.shape} attention map to {path}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "sample-audit": _cmd_sample_audit,
    "shift-sweep": _cmd_shift_sweep,
    "export-attn": _cmd_export_attn,
}

_DATA_ERRORS = (
    ConfigError,
    DataError,
    ContractError,
    RangeError,
    ShapeError,
    StaleEmbeddingsError,
    CheckpointError,
)
_NUMERIC_ERRORS = (NumericError, DomainError, NormalizationError)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
