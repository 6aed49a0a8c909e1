"""Command line front end.

Every failure path prints a single line `ERROR <kind>: <message>` to stderr
and exits nonzero, so scripts can grep for it. Output paths are resolved
against $SLUKIT_RUN_DIR when relative.
"""

from __future__ import annotations

import argparse
import dataclasses
import pathlib
import sys

from . import trainer
from .errors import SlukitError
from .synth import default_task_specs, write_synth_dataset
from .trainer import TrainConfig

_CONFIG_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _add_common(sp, transfer=False, multitask=False):
    sp.add_argument("--config", help="key = value config file; flags override it")
    sp.add_argument("--train-manifest")
    sp.add_argument("--valid-manifest")
    sp.add_argument("--metrics-out", help="metrics CSV path")
    sp.add_argument("--checkpoint-out", help="model checkpoint path")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--unit", choices=("char", "word"))
    sp.add_argument("--timing", action="store_const", const=True,
                    help="record real wall-clock seconds per epoch (off by default "
                         "so repeat runs are byte-identical)")
    for flag in ("--n-enc-layers", "--n-dec-layers", "--n-heads", "--d-k",
                 "--d-v", "--d-model", "--d-inner", "--max-positions"):
        sp.add_argument(flag, type=int)
    if multitask:
        sp.add_argument("--lambda", dest="lam", type=float,
                        help="recognition loss weight in [0, 1]")
    if transfer:
        sp.add_argument("--init-encoder", help="checkpoint whose encoder seeds this run")
        sp.add_argument("--policy", choices=("fix", "finetune"),
                        help="freeze or keep training the transferred encoder")


def _train_config(args) -> TrainConfig:
    overrides = {
        k: v for k, v in vars(args).items()
        if k in _CONFIG_FIELDS and v is not None
    }
    return trainer.load_train_config(getattr(args, "config", None), overrides)


def _report(rows, written):
    if rows:
        print(trainer.METRICS_HEADER)
        final_epoch = rows[-1].epoch
        for row in rows:
            if row.epoch == final_epoch:
                print(row.to_line())
    for kind, path in written.items():
        print(f"wrote {kind} {path}")
    return 0


def _run_pretrain_asr(args):
    return _report(*trainer.cmd_pretrain_asr(_train_config(args)))


def _run_train_slu(args):
    return _report(*trainer.cmd_train_slu(_train_config(args)))


def _run_train_mt(args):
    return _report(*trainer.cmd_train_multitask(_train_config(args)))


def _run_pretrain_textenc(args):
    return _report(*trainer.cmd_pretrain_textenc(_train_config(args)))


def _run_train_fusion(args):
    return _report(*trainer.cmd_train_fusion(_train_config(args)))


def _run_eval(args):
    row, rate = trainer.cmd_eval(
        args.checkpoint, args.manifest,
        metrics_out=args.metrics_out, token_match=args.token_match,
    )
    print(trainer.METRICS_HEADER)
    print(row.to_line())
    if rate is not None:
        print(f"token_exact_match={rate!r}")
    return 0


def _run_synth(args):
    spec_a, spec_b = default_task_specs(seed=args.task_seed, noise_level=args.noise)
    spec = spec_a if args.language == "A" else spec_b
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    manifest = write_synth_dataset(args.out, spec, args.count)
    print(manifest)
    return 0


def _run_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "slukit"
    import matplotlib.pyplot as plt

    fig, (ax_loss, ax_acc) = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
    saw_acc = False
    for path in args.metrics:
        rows = trainer.read_metrics(path)
        stem = pathlib.Path(path).stem
        for split in sorted({r.split for r in rows}):
            sel = [r for r in rows if r.split == split]
            xs = [r.epoch for r in sel]
            ax_loss.plot(xs, [r.total_loss for r in sel], label=f"{stem}/{split} total")
            if any(r.asr_loss is not None for r in sel):
                ax_loss.plot(
                    xs, [r.asr_loss for r in sel], linestyle="--",
                    label=f"{stem}/{split} asr",
                )
            if any(r.intent_accuracy is not None for r in sel):
                saw_acc = True
                ax_acc.plot(xs, [r.intent_accuracy for r in sel], label=f"{stem}/{split}")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=7)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("intent accuracy")
    if saw_acc:
        ax_acc.legend(fontsize=7)
    fig.tight_layout()
    out = trainer.resolve_out(args.out)
    fig.savefig(out, format="svg", metadata={"Date": None})
    print(f"wrote plot {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="slukit",
        description="Train and evaluate small speech understanding models.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain-asr", help="train the recognition objective only")
    _add_common(sp)
    sp.set_defaults(func=_run_pretrain_asr)

    sp = sub.add_parser("train-slu", help="train the intent objective")
    _add_common(sp, transfer=True)
    sp.set_defaults(func=_run_train_slu)

    sp = sub.add_parser("train-mt", help="train intent plus weighted recognition")
    _add_common(sp, transfer=True, multitask=True)
    sp.set_defaults(func=_run_train_mt)

    sp = sub.add_parser("pretrain-textenc", help="masked-token pretraining on transcripts")
    _add_common(sp)
    sp.add_argument("--mask-rate", type=float)
    sp.set_defaults(func=_run_pretrain_textenc)

    sp = sub.add_parser("train-fusion", help="multitask training with a frozen text encoder")
    _add_common(sp, transfer=True, multitask=True)
    sp.add_argument("--text-encoder", help="frozen text encoder checkpoint (required)")
    sp.set_defaults(func=_run_train_fusion)

    sp = sub.add_parser("eval", help="intent accuracy and losses of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--metrics-out")
    sp.add_argument("--token-match", action="store_true",
                    help="also report greedy transcription exact-match rate")
    sp.set_defaults(func=_run_eval)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.add_argument("--language", required=True, choices=("A", "B"))
    sp.add_argument("--count", required=True, type=int)
    sp.add_argument("--task-seed", type=int, default=0,
                    help="seed for the lexicon and grammar construction")
    sp.add_argument("--seed", type=int, default=None,
                    help="generation seed (defaults to one derived from --task-seed)")
    sp.add_argument("--noise", type=float, default=0.1)
    sp.set_defaults(func=_run_synth)

    sp = sub.add_parser("plot", help="render metrics CSVs to an SVG")
    sp.add_argument("--metrics", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_run_plot)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SlukitError as exc:
        msg = " ".join(str(exc).split())
        print(f"ERROR {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    except OSError as exc:
        msg = " ".join(str(exc).split())
        print(f"ERROR {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
