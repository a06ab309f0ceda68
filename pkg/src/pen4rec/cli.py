"""Command-line entry point: ``pen4rec {train,eval,predict,sweep-k,gen-synth,rerun}``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
Every command that writes a file also writes ``<file>.manifest.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataFormatError, EmptyDatasetError, SplitError, SyntheticSpec, gen_synthetic, load_sessions, preprocess, split_by_time, write_synthetic
from .evaluation import evaluate
from .model import FIRST_STAGE_RANGES, VARIANTS, VariantConfig, predict_proba
from .training import CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train

log = logging.getLogger("pen4rec")

SEED_ENV = "PEN4REC_SEED"
IMPL = "implementation default"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str]
    started: str
    finished: str = ""
    version: str = __version__
    argv: list[str] = field(default_factory=list)

    def write(self, artifact) -> Path:
        self.finished = _now()
        path = Path(str(artifact) + ".manifest.json")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------


def _bounded(kind, lo=None, hi=None, lo_open=False, hi_open=False):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}") from None
        if lo is not None and (value < lo or (lo_open and value == lo)):
            raise argparse.ArgumentTypeError(f"must be {'>' if lo_open else '>='} {lo}, got {text}")
        if hi is not None and (value > hi or (hi_open and value == hi)):
            raise argparse.ArgumentTypeError(f"must be {'<' if hi_open else '<='} {hi}, got {text}")
        return value

    parse.__name__ = kind.__name__
    return parse


pos_int = _bounded(int, 1)
nonneg_int = _bounded(int, 0)
nonneg_float = _bounded(float, 0.0)
unit_float = _bounded(float, 0.0, 1.0)
dropout_float = _bounded(float, 0.0, 1.0, hi_open=True)


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_data(p, required=True):
    p.add_argument("--data", required=required, help="click log with session_id, item_id, timestamp columns")
    p.add_argument("--format", choices=("csv", "tsv"), default="csv", help="input delimiter (default: csv)")


def _add_train_flags(p):
    _add_data(p)
    p.add_argument("--d", type=pos_int, default=100, help="latent dimension (default: 100)")
    p.add_argument("--variant", choices=VARIANTS, default="full", help="architecture variant (default: full)")
    p.add_argument("--ggnn-layers", type=nonneg_int, default=1, help=f"graph layers (default: 1; {IMPL})")
    p.add_argument("--first-stage-range", choices=FIRST_STAGE_RANGES, default="last_k",
                   help=f"positions summarised by the first stage (default: last_k; {IMPL})")
    p.add_argument("--epochs", type=nonneg_int, default=30, help=f"epoch budget (default: 30; {IMPL})")
    p.add_argument("--batch-size", type=pos_int, default=100, help="mini-batch size (default: 100)")
    p.add_argument("--lr", type=nonneg_float, default=1e-3, help=f"Adam step size (default: 1e-3; {IMPL})")
    p.add_argument("--lr-decay", type=_bounded(float, 0.0, lo_open=True), default=0.1,
                   help=f"learning-rate decay factor (default: 0.1; {IMPL})")
    p.add_argument("--lr-decay-every", type=pos_int, default=3, help=f"epochs between decays (default: 3; {IMPL})")
    p.add_argument("--l2", type=nonneg_float, default=1e-6, help="L2 penalty (default: 1e-6)")
    p.add_argument("--dropout", type=dropout_float, default=0.5, help="dropout rate in [0, 1) (default: 0.5)")
    p.add_argument("--patience", type=nonneg_int, default=5,
                   help=f"epochs without validation MRR gain before stopping, 0 disables (default: 5; {IMPL})")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV}, else 0)")
    p.add_argument("--min-item-count", type=pos_int, default=5, help="drop items clicked fewer times (default: 5)")
    p.add_argument("--max-len", type=pos_int, default=50, help=f"keep the last N clicks of a session (default: 50; {IMPL})")
    p.add_argument("--valid-span", type=nonneg_int, default=86400,
                   help=f"sessions ending within this many seconds of the last one validate; 0 validates on the training data (default: 86400; {IMPL})")
    p.add_argument("--cutoff", type=pos_int, default=20, help="ranking cutoff for validation metrics (default: 20)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pen4rec", description="Session-based next-item recommendation with preference evolution networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_train_flags(p)
    p.add_argument("--k", type=pos_int, default=3, help="window length of the first-stage query (default: 3)")
    p.add_argument("--out", required=True, help="checkpoint path; the epoch log goes to <out>.log.jsonl")

    p = sub.add_parser("eval", help="P@K and MRR@K of a checkpoint on every prefix of a dataset")
    p.add_argument("--model", required=True, help="checkpoint path")
    _add_data(p)
    p.add_argument("--cutoff", type=pos_int, default=20, help="ranking cutoff K (default: 20)")
    p.add_argument("--dump", help="write example_id, target, rank per example to this TSV file")
    p.add_argument("--drop-unknown", action="store_true", help="drop items missing from the model vocabulary instead of failing")
    p.add_argument("--min-item-count", type=pos_int, default=1, help="drop items clicked fewer times (default: 1)")

    p = sub.add_parser("predict", help="rank next items for one session")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--session", required=True, help="comma-separated item ids, oldest first")
    p.add_argument("--top", type=pos_int, default=20, help="number of items to print (default: 20)")

    p = sub.add_parser("sweep-k", help="train and evaluate once per window length k")
    _add_train_flags(p)
    p.add_argument("--k-min", type=pos_int, default=1, help="smallest k (default: 1)")
    p.add_argument("--k-max", type=pos_int, default=5, help="largest k (default: 5)")
    p.add_argument("--test-span", type=pos_int, default=86400,
                   help=f"sessions ending within this many seconds of the last one are the test set (default: 86400; {IMPL})")
    p.add_argument("--out", help="also write the table to this TSV file")

    p = sub.add_parser("gen-synth", help="write a synthetic click log with preference drift")
    d = SyntheticSpec()
    p.add_argument("--out", required=True, help="CSV path; cluster metadata goes to <out>.meta")
    p.add_argument("--n-sessions", type=pos_int, default=d.n_sessions, help=f"total sessions (default: {d.n_sessions})")
    p.add_argument("--n-test-sessions", type=nonneg_int, default=d.n_test_sessions,
                   help="how many of them are stamped one day later, for a time split (default: 0)")
    p.add_argument("--clusters", type=_bounded(int, 3), default=d.n_preference_clusters,
                   help=f"preference clusters (default: {d.n_preference_clusters})")
    p.add_argument("--items-per-cluster", type=pos_int, default=d.items_per_cluster,
                   help=f"items per cluster (default: {d.items_per_cluster})")
    p.add_argument("--drift-prob", type=unit_float, default=d.drift_probability,
                   help=f"per-transition drift probability (default: {d.drift_probability})")
    p.add_argument("--min-len", type=_bounded(int, 2, 50), default=d.min_session_len, help=f"(default: {d.min_session_len})")
    p.add_argument("--max-len", type=_bounded(int, 2, 50), default=d.max_session_len, help=f"(default: {d.max_session_len})")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV}, else 0)")

    p = sub.add_parser("rerun", help="repeat the command recorded in a manifest")
    p.add_argument("--manifest", required=True, help="a *.manifest.json file")
    p.add_argument("--out", help="write the artifact here instead of the recorded path")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_dataset(args, min_item_count, max_len=50):
    raw = load_sessions(args.data, args.format)
    return preprocess(raw, min_len=2, min_item_count=min_item_count, max_len=max_len)


def _train_config(args, k: int, seed: int) -> TrainConfig:
    model = VariantConfig(args.variant, k, args.d, args.ggnn_layers, args.dropout, args.first_stage_range)
    return TrainConfig(model=model, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lr_decay=args.lr_decay,
                       lr_decay_every=args.lr_decay_every, l2=args.l2, seed=seed, patience=args.patience, cutoff=args.cutoff)


def _fit(dataset, args, k, seed, on_epoch=None):
    if args.valid_span > 0:
        train_ds, valid_ds = split_by_time(dataset, args.valid_span)
    else:
        train_ds, valid_ds = dataset, None
    cfg = _train_config(args, k, seed)
    log.info("training %s k=%d on %d sessions, validating on %s", cfg.model.variant, k, len(train_ds),
             f"{len(valid_ds)} sessions" if valid_ds else "the training data")
    return train(train_ds, valid_ds, cfg, on_epoch=on_epoch)


def _resolved(args, drop=("command", "verbose")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in drop}


def _argv_from(args) -> list[str]:
    """Flags that reproduce ``args`` exactly, every default spelled out."""
    out = [args.command]
    for key, value in _resolved(args).items():
        if value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        out += [flag] if value is True else [flag, str(value)]
    return out


def cmd_train(args) -> int:
    started = _now()
    args.seed = resolve_seed(args.seed)
    dataset = _load_dataset(args, args.min_item_count, args.max_len)
    out = Path(args.out)
    log_path = Path(str(out) + ".log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        def emit(rec):
            line = rec.to_json()
            fh.write(line + "\n")
            fh.flush()
            print(line, flush=True)

        result = _fit(dataset, args, args.k, args.seed, emit)
    ck = result.checkpoint
    save_checkpoint(ck.params, ck.config, ck.vocab, out)
    RunManifest("train", _resolved(args), args.seed, {"data": str(args.data)},
                {"checkpoint": str(out), "log": str(log_path)}, started, argv=_argv_from(args)).write(out)
    return 0


def cmd_eval(args) -> int:
    started = _now()
    ck = load_checkpoint(args.model)
    dataset = _load_dataset(args, args.min_item_count, None)
    res = evaluate(ck, dataset, args.cutoff, drop_unknown=args.drop_unknown)
    print(res.report.to_json(ck.config.model.variant, ck.config.model.k))
    if args.dump:
        res.write_dump(args.dump)
        RunManifest("eval", _resolved(args), None, {"model": str(args.model), "data": str(args.data)},
                    {"dump": str(args.dump)}, started, argv=_argv_from(args)).write(args.dump)
    return 0


def cmd_predict(args) -> int:
    items = [s.strip() for s in args.session.split(",")]
    if not args.session.strip() or any(not s for s in items):
        raise UsageError("argument --session: expected a non-empty comma-separated list of item ids")
    ck = load_checkpoint(args.model)
    vocab = {item: i for i, item in enumerate(ck.vocab)}
    unknown = [s for s in items if s not in vocab]
    if unknown:
        raise KeyError(f"items not in the model vocabulary: {', '.join(unknown)}")
    seq = tuple(vocab[s] for s in items)
    probs = predict_proba([seq], ck.params, ck.config.model)[0]
    order = np.lexsort((np.arange(probs.size), -probs))[: args.top]
    for rank, i in enumerate(order, 1):
        print(f"{rank}\t{ck.vocab[i]}\t{float(probs[i])!r}")
    return 0


def cmd_sweep_k(args) -> int:
    if args.k_min > args.k_max:
        raise UsageError(f"argument --k-min: {args.k_min} exceeds --k-max {args.k_max}")
    started = _now()
    args.seed = resolve_seed(args.seed)
    dataset = _load_dataset(args, args.min_item_count, args.max_len)
    train_part, test = split_by_time(dataset, args.test_span)
    c = args.cutoff
    lines = [f"k\tp_at_{c}\tmrr_at_{c}"]
    print(lines[0], flush=True)
    for k in range(args.k_min, args.k_max + 1):
        ck = _fit(train_part, args, k, args.seed).checkpoint
        rep = evaluate(ck, test, c).report
        lines.append(f"{k}\t{rep.p_at_k!r}\t{rep.mrr_at_k!r}")
        print(lines[-1], flush=True)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        RunManifest("sweep-k", _resolved(args), args.seed, {"data": str(args.data)}, {"table": str(args.out)},
                    started, argv=_argv_from(args)).write(args.out)
    return 0


def cmd_gen_synth(args) -> int:
    started = _now()
    args.seed = resolve_seed(args.seed)
    spec = SyntheticSpec(
        n_items=args.clusters * args.items_per_cluster,
        n_sessions=args.n_sessions,
        n_preference_clusters=args.clusters,
        items_per_cluster=args.items_per_cluster,
        drift_probability=args.drift_prob,
        min_session_len=args.min_len,
        max_session_len=args.max_len,
        seed=args.seed,
        n_test_sessions=args.n_test_sessions,
    )
    try:
        spec.validate()
    except ValueError as err:
        raise UsageError(str(err)) from None
    data = gen_synthetic(spec)
    meta = write_synthetic(data, args.out)
    summary = {
        "n_sessions": len(data.dataset),
        "n_test_sessions": spec.n_test_sessions,
        "n_clicks": sum(map(len, data.dataset.sessions)),
        "n_items": spec.n_items,
        "n_drifts": sum(sum(f) for f in data.drift_flags),
        "out": str(args.out),
        "meta": str(meta),
    }
    print(json.dumps(summary))
    RunManifest("gen-synth", _resolved(args), args.seed, {}, {"data": str(args.out), "meta": str(meta)},
                started, argv=_argv_from(args)).write(args.out)
    return 0


def cmd_rerun(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        argv = list(manifest["argv"])
    except (OSError, ValueError, KeyError) as err:
        raise UsageError(f"argument --manifest: cannot read a manifest from {args.manifest}: {err}") from None
    if args.out:
        if "--out" in argv:
            argv[argv.index("--out") + 1] = args.out
        else:
            argv += ["--out", args.out]
    return main(argv)


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "sweep-k": cmd_sweep_k,
    "gen-synth": cmd_gen_synth,
    "rerun": cmd_rerun,
}

RUNTIME_ERRORS = (DataFormatError, EmptyDatasetError, SplitError, CheckpointError, TrainingDiverged, KeyError, OSError, ValueError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"pen4rec {args.command}: error: {err}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"pen4rec {args.command}: {type(err).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
