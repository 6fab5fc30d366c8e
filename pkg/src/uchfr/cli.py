"""Command-line front end for the full pipeline.

Subcommands mirror the pipeline stages: ``gen`` writes a synthetic dataset,
``pretrain`` runs the classification stage, ``train`` the joint
margin/discriminator stage from a pretrained checkpoint, ``eval`` scores a
trained checkpoint, ``ablate`` sweeps the loss/discriminator matrix or the
margin grid, and ``gradcheck`` runs the finite-difference suite.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every artifact embeds the run seed and the resolved config hash.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .backbone import load_network
from .checks import format_report, run_gradient_suite
from .config import ConfigError, load_config
from .data import generate_synth, load_dataset, save_dataset, split_by_class
from .evaluation import evaluate
from .training import (TrainingDiverged, pretrain, run_ablation,
                       save_training_checkpoint, train_hfr, write_ablation_csv)


class UsageExit(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        raise UsageExit(f"{self.prog}: error: {message}")


def build_parser() -> Parser:
    p = Parser(prog="uchfr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dual-modality dataset")
    gen.add_argument("--config", required=True, help="run config JSON")
    gen.add_argument("--out", required=True, help="dataset file to write (sidecar JSON beside it)")

    pre = sub.add_parser("pretrain", help="stage one: classification pretraining")
    pre.add_argument("--config", required=True)
    pre.add_argument("--data", required=True, help="dataset file from `gen`")
    pre.add_argument("--out", required=True, help="output directory")

    tr = sub.add_parser("train", help="stage two: margin + discriminator training")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--init-from", required=True, dest="init_from",
                    help="pretrained checkpoint from `pretrain`")
    tr.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="score a trained checkpoint on the held-out split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--config", help="optional config for the evaluation protocol")

    ab = sub.add_parser("ablate", help="train and score an ablation matrix")
    ab.add_argument("--config", required=True)
    ab.add_argument("--out", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--instances", type=int, default=10)
    return p


def _train_split(ds):
    n = ds.meta.get("train_classes")
    if n is None:
        return ds
    return split_by_class(ds, int(n))[0]


def _eval_split(ds):
    n = ds.meta.get("train_classes")
    if n is None:
        return ds
    return split_by_class(ds, int(n))[1]


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    ds = generate_synth(cfg.data.synth_config(cfg.seed))
    ds.meta.update({"train_classes": cfg.data.train_classes, "seed": cfg.seed,
                    "config_hash": cfg.config_hash})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    s = ds.summary()
    print(f"wrote {out} (+.json): {s['samples']} samples, {s['classes']} classes, "
          f"A={s['per_modality']['A']} B={s['per_modality']['B']}, "
          f"train_classes={cfg.data.train_classes}, hash={cfg.config_hash}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    ds = _train_split(load_dataset(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": cfg.seed, "config_hash": cfg.config_hash}
    net, log, state = pretrain(ds, cfg.backbone, cfg.sampler, cfg.optim.pretrain_variant(),
                               seed=cfg.seed, log_meta=meta)
    save_training_checkpoint(net, out / "pretrained.uchfr", state, meta=meta)
    log.write_csv(out / "pretrain_log.csv")
    print(f"wrote {out / 'pretrained.uchfr'} after {len(log.rows)} epochs "
          f"(final loss {log.rows[-1]['total']:.4f}, hash={cfg.config_hash})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = _train_split(load_dataset(args.data))
    pretrained, meta_in, _ = load_network(args.init_from)
    if pretrained.stage != ckpt.STAGE_PRETRAINED:
        raise UsageExit(f"--init-from checkpoint has stage {pretrained.stage!r}, "
                        "expected a pretrained checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": cfg.seed, "config_hash": cfg.config_hash}
    net, log, state = train_hfr(ds, pretrained, cfg.loss, cfg.sampler, cfg.optim,
                                seed=cfg.seed, embedding_dim=cfg.backbone.embedding_dim,
                                disc_hidden=cfg.disc_hidden, log_meta=meta)
    save_training_checkpoint(net, out / "hfr.uchfr", state, meta=meta)
    log.write_csv(out / "hfr_log.csv")
    print(f"wrote {out / 'hfr.uchfr'} after {len(log.rows)} epochs "
          f"(final loss {log.rows[-1]['total']:.4f}, hash={cfg.config_hash})")
    return 0


def cmd_eval(args) -> int:
    net, meta, _ = load_network(args.checkpoint)
    ds = _eval_split(load_dataset(args.data))
    protocol = load_config(args.config).eval if args.config else None
    report = evaluate(net, ds, protocol)
    report.meta.update({"checkpoint_seed": meta.get("seed"),
                        "config_hash": meta.get("config_hash")})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    for row in report.csv_rows():
        print(f"{row['mode']}: rank1={row['rank1']:.4f} "
              f"tpr@1%={row['tpr_far_1pct']} tpr@0.1%={row['tpr_far_0p1pct']}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    ds = generate_synth(cfg.data.synth_config(cfg.seed))
    train_ds, eval_ds = split_by_class(ds, cfg.data.train_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(train_ds, eval_ds, cfg.ablation, cfg.loss, cfg.backbone,
                        cfg.sampler, cfg.optim, cfg.eval, out,
                        embedding_dim=cfg.backbone.embedding_dim,
                        disc_hidden=cfg.disc_hidden)
    write_ablation_csv(rows, out / "ablation.csv")
    for row in rows:
        tag = row["error"] or f"rank1={row['rank1']}"
        print(f"{row['experiment']}: {tag}")
    print(f"wrote {out / 'ablation.csv'} (hash={cfg.config_hash})")
    return 0


def cmd_gradcheck(args) -> int:
    outcomes = run_gradient_suite(instances=args.instances, tol=args.tol)
    print(format_report(outcomes))
    return 0 if all(o.passed for o in outcomes) else 2


DISPATCH = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return DISPATCH[args.command](args)
    except UsageExit as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"uchfr: config error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"uchfr: training diverged: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ckpt.CheckpointError) as exc:
        print(f"uchfr: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
