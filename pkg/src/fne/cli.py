"""Command-line entry point: ``fne generate-data | train | eval |
weights-curve | sweep``.

Exit codes: 0 success, 2 usage or validation error, 3 I/O error, 4
numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from fne import sampler
from fne.checkpoint import load_checkpoint, save_checkpoint
from fne.config import RunConfig, output_root
from fne.datagen import PairedDataset, generate, load_embeddings, save_embeddings
from fne.errors import (
    DegenerateEmbeddingError,
    FneError,
    FormatError,
    NonFiniteError,
    TrackerNotReady,
)
from fne.evaluation import DEFAULT_KS, evaluate, fn_sampling_rate
from fne.model import LOG_COLUMNS, TrainState, make_rngs, train_epoch

log = logging.getLogger("fne")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

SWEEP_AXES = {
    "prior_p": ("fne", "prior_p", float),
    "lambda": ("fne", "lam", float),
    "batch_size": ("train", "batch_size", int),
    "bank_capacity": ("train", "bank_capacity", int),
}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _flag(text: str) -> bool:
    if text.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
        raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")
    return text.lower() in ("1", "true", "yes", "on")


# (flag, section, field, type, help)
DATA_FLAGS = [
    ("--clusters", "n_clusters", int, "number of semantic clusters"),
    ("--items-per-cluster", "items_per_cluster", int, "images per cluster"),
    ("--captions", "captions_per_image", int, "captions per image"),
    ("--latent-dim", "latent_dim", int, None),
    ("--image-dim", "image_dim", int, None),
    ("--text-dim", "text_dim", int, None),
    ("--noise", "noise_sigma", float, "per-coordinate view noise"),
    ("--duplicate-rate", "duplicate_rate", float, "fraction of semantic duplicates"),
    ("--item-spread", "item_spread", float, None),
    ("--data-seed", "seed", int, "generator seed"),
]
TRAIN_FLAGS = [
    ("--margin", "margin", float, None),
    ("--lr", "learning_rate", float, "initial SGD learning rate"),
    ("--epochs", "epochs", int, None),
    ("--batch-size", "batch_size", int, None),
    ("--lr-decay-epochs", "lr_decay_epochs", _int_list, "comma-separated 0-based epochs"),
    ("--lr-decay-factor", "lr_decay_factor", float, None),
    ("--embed-dim", "embed_dim", int, None),
    ("--hidden-dim", "hidden_dim", int, "0 for a linear encoder"),
    ("--momentum", "momentum", float, None),
    ("--bank-capacity", "bank_capacity", int, None),
    ("--clear-banks", "clear_banks_each_epoch", _flag, "clear memory banks each epoch"),
    ("--min-ready-count", "min_ready_count", int, None),
    ("--reset-stats", "reset_stats_each_epoch", _flag, "start new statistics each epoch"),
    ("--stats-source", "stats_source", str, "pool or batch"),
]
FNE_FLAGS = [
    ("--mode", "mode", str, "fne, hardest, uniform or semi-hard"),
    ("--prior-p", "prior_p", float, "prior match probability"),
    ("--alpha", "alpha", float, "cut-down density"),
    ("--lambda", "lam", float, "posterior threshold for the cut-down branch"),
]


def _add_flags(p: argparse.ArgumentParser, table, section: str) -> None:
    for flag, name, typ, help_ in table:
        p.add_argument(flag, dest=f"{section}.{name}", type=typ, default=None, help=help_)


def _resolve(args, sections=("data", "train", "fne")) -> RunConfig:
    base = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {s: {} for s in ("data", "train", "fne")}
    for key, value in vars(args).items():
        if "." in key and value is not None:
            section, name = key.split(".", 1)
            over[section][name] = value
    if getattr(args, "seed", None) is not None:
        if "data" in sections and "seed" not in over["data"]:
            over["data"]["seed"] = args.seed
        over["train"]["seed"] = args.seed
    return base.with_overrides(**over)


def _read_dataset(path) -> PairedDataset:
    return load_embeddings(path)


def _dataset_for(cfg: RunConfig, data_path) -> PairedDataset:
    return _read_dataset(data_path) if data_path else generate(cfg.data)


def cmd_generate_data(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out) if args.out else output_root() / "data.fned"
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = generate(cfg.data, split=args.split)
    save_embeddings(ds, out)
    cfg.paths["data"] = str(out)
    cfg.write(out.with_suffix(out.suffix + ".yaml"))
    n_labels = len(np.unique(ds.cluster_of))
    print(f"wrote {out}: {ds.n_images} images x {ds.image_view.shape[1]}, "
          f"{ds.n_texts} texts x {ds.text_view.shape[1]}, {n_labels} cluster labels "
          f"(split={args.split}, seed={cfg.data.seed})")
    return EXIT_OK


def _write_log(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(LOG_COLUMNS)
        for r in rows:
            wr.writerow([repr(x) if isinstance(x, float) else x for x in r])


def run_training(cfg: RunConfig, dataset: PairedDataset):
    """Train for ``cfg.train.epochs``; returns state, step records and the
    false-negative rate over post-warm-up selections."""
    rngs = make_rngs(cfg.train.seed)
    state = TrainState.initial(dataset, cfg.train, rngs["init"])
    rows, ready_samples = [], []
    for _ in range(cfg.train.epochs):
        elog = train_epoch(state, dataset, cfg.train, cfg.fne, rngs)
        rows.extend(elog.steps)
        ready_samples.extend(s for s, ok in zip(elog.samples, elog.sample_ready) if ok)
    fn_rate = (fn_sampling_rate(ready_samples, dataset.cluster_of)
               if dataset.has_clusters and ready_samples else math.nan)
    return state, rows, fn_rate


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out) if args.out else output_root() / f"train-{cfg.fne.mode}-s{cfg.train.seed}"
    out.mkdir(parents=True, exist_ok=True)
    cfg.paths.update({"data": str(args.data or ""), "out": str(out)})
    cfg.write(out / "config.yaml")
    dataset = _dataset_for(cfg, args.data)
    try:
        state, rows, fn_rate = run_training(cfg, dataset)
    except BaseException:
        (out / "FAILED").write_text("training did not complete; outputs are partial\n")
        raise
    save_checkpoint(state, out / "checkpoint.fnec")
    _write_log(out / "train_log.csv", rows)
    last = rows[-1] if rows else None
    print(f"trained {cfg.train.epochs} epochs ({len(rows)} steps), mode={cfg.fne.mode}"
          + (f", final loss {last.loss:.4f}" if last else "")
          + (f", post-warm-up fn rate {fn_rate:.4f}" if not math.isnan(fn_rate) else ""))
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = _read_dataset(args.data)
    if (state.image_encoder.d_in, state.text_encoder.d_in) != (
        dataset.image_view.shape[1], dataset.text_view.shape[1]
    ):
        raise UsageError(
            f"checkpoint expects inputs {state.image_encoder.d_in}/{state.text_encoder.d_in}, "
            f"dataset has {dataset.image_view.shape[1]}/{dataset.text_view.shape[1]}"
        )
    report = evaluate(state.image_encoder, state.text_encoder, dataset, args.ks)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


def weights_curve(mu_pos, sigma_pos, mu_neg, sigma_neg, fne_cfg, s_pos=None, step=1e-3):
    """Rows of ``(s, posterior, weight, branch)`` for s from -1 to 1."""
    n = int(round(2.0 / step))
    s = np.linspace(-1.0, 1.0, n + 1)
    snap = sampler.TrackerSnapshot(mu_pos, sigma_pos, mu_neg, sigma_neg, True)
    ref = mu_pos if s_pos is None else s_pos
    post, weight, cut = sampler.fne_weights(s, np.full_like(s, ref), snap, fne_cfg)
    branch = np.where(cut, "cutdown", "posterior")
    return list(zip(s.tolist(), post.tolist(), weight.tolist(), branch.tolist()))


def cmd_weights_curve(args) -> int:
    cfg = _resolve(args, sections=())
    explicit = [args.mu_pos, args.sigma_pos, args.mu_neg, args.sigma_neg]
    if all(v is not None for v in explicit):
        params = explicit
    elif args.checkpoint:
        snap = load_checkpoint(args.checkpoint).tracker.snapshot()
        if not snap.ready:
            raise UsageError("checkpoint tracker has not finished warm-up")
        params = [snap.mu_pos, snap.sigma_pos, snap.mu_neg, snap.sigma_neg]
    else:
        raise UsageError("give --mu-pos/--sigma-pos/--mu-neg/--sigma-neg or --checkpoint")
    rows = weights_curve(*params, cfg.fne, s_pos=args.s_pos, step=args.step)
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["s", "posterior", "weight", "branch"])
        for s, p, w, b in rows:
            wr.writerow([f"{s:.3f}", repr(p), repr(w), b])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


SWEEP_COLUMNS = ["axis", "value", "seed", "mode", "r1_i2t", "r1_t2i", "r1_mean",
                 "r5_mean", "r10_mean", "fn_sample_rate", "final_loss"]


def _sweep_config(cfg: RunConfig, axis: str, value, seed: int) -> RunConfig:
    section, name, typ = SWEEP_AXES[axis]
    over = {"data": {}, "train": {"seed": seed}, "fne": {}}
    over[section][name] = typ(value)
    return cfg.with_overrides(**over)


def sweep_run(cfg: RunConfig, data_path, axis: str, value, seed: int) -> list:
    run_cfg = _sweep_config(cfg, axis, value, seed)
    dataset = _dataset_for(run_cfg, data_path)
    state, rows, fn_rate = run_training(run_cfg, dataset)
    rep = evaluate(state.image_encoder, state.text_encoder, dataset)
    return [axis, value, seed, run_cfg.fne.mode, rep.image_to_text[1], rep.text_to_image[1],
            rep.mean_recall(1), rep.mean_recall(5), rep.mean_recall(10), fn_rate,
            rows[-1].loss if rows else math.nan]


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {args.axis!r}; choose from {sorted(SWEEP_AXES)}")
    cfg = _resolve(args)
    typ = SWEEP_AXES[args.axis][2]
    try:
        values = [typ(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --values: {exc}") from exc
    seeds = args.seeds if args.seeds else [cfg.train.seed]
    jobs = [(v, s) for v in values for s in seeds]
    out = Path(args.out) if args.out else output_root() / f"sweep-{args.axis}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.paths.update({"data": str(args.data or ""), "out": str(out)})
    cfg.write(out.with_suffix(".yaml"))
    for v in values:
        _sweep_config(cfg, args.axis, v, seeds[0])  # fail fast on invalid values
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as ex:
            results = list(ex.map(sweep_run, *zip(*[(cfg, args.data, args.axis, v, s) for v, s in jobs])))
    else:
        results = [sweep_run(cfg, args.data, args.axis, v, s) for v, s in jobs]
    with open(out, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SWEEP_COLUMNS)
        for row in results:
            wr.writerow([repr(x) if isinstance(x, float) else x for x in row])
    for row in results:
        print(f"{args.axis}={row[1]!s:<10} seed={row[2]:<4} R@1 {100 * row[6]:6.2f}")
    print(f"wrote {len(results)} rows to {out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fne", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="write a synthetic FNED dataset")
    g.add_argument("--out")
    g.add_argument("--split", choices=("train", "test"), default="train")
    _common(g, data=True)

    t = sub.add_parser("train", help="train encoders and write checkpoint + log")
    t.add_argument("--data", help="FNED dataset; generated from the data settings if omitted")
    t.add_argument("--out", help="output directory")
    _common(t, data=True, train=True, fne=True)

    e = sub.add_parser("eval", help="Recall@K of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ks", type=_int_list, default=list(DEFAULT_KS))
    e.add_argument("--out", help="CSV report path")

    w = sub.add_parser("weights-curve", help="tabulate posterior and sampling weight over s")
    for name in ("mu-pos", "sigma-pos", "mu-neg", "sigma-neg", "s-pos"):
        w.add_argument(f"--{name}", type=float)
    w.add_argument("--checkpoint")
    w.add_argument("--step", type=float, default=1e-3)
    w.add_argument("--out")
    _common(w, fne=True)

    s = sub.add_parser("sweep", help="train+eval over one hyperparameter")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True)
    s.add_argument("--seeds", type=_int_list, help="training seeds per value")
    s.add_argument("--data")
    s.add_argument("--out", help="CSV path")
    s.add_argument("--parallel", type=int, default=1, help="worker processes")
    _common(s, data=True, train=True, fne=True)
    return p


def _common(p, data=False, train=False, fne=False):
    p.add_argument("--config", help="YAML config file (flags override it)")
    if data or train:
        p.add_argument("--seed", type=int, help="seed for data generation and training")
    if data:
        _add_flags(p, DATA_FLAGS, "data")
    if train:
        _add_flags(p, TRAIN_FLAGS, "train")
    if fne:
        _add_flags(p, FNE_FLAGS, "fne")


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "weights-curve": cmd_weights_curve,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fne: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"fne: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, DegenerateEmbeddingError, TrackerNotReady, ArithmeticError) as exc:
        print(f"fne: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"fne: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FneError as exc:
        print(f"fne: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
