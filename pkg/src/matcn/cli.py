"""``matcn`` command line: preprocess, synth, train, eval, gradcheck, rfs.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, read_config_file
from .preprocess import BBox, DataError, build_corpus, load_corpus, save_corpus
from .optim import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--field-name`` flag per RunConfig field, parsed later by the config layer."""
    parser.add_argument("--config", help="flat key=value config file")
    group = parser.add_argument_group("run config overrides")
    for name, kind in RunConfig.field_types().items():
        group.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, metavar=kind.__name__.upper())


def _run_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def _open_corpus(path) -> object:
    if not path:
        raise UsageError("no corpus given (use --corpus)")
    try:
        return load_corpus(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc


def _write_csv(rows, header, out) -> None:
    w = csv.writer(out)
    w.writerow(header)
    w.writerows(rows)


# ------------------------------------------------------------------ commands

def cmd_preprocess(args) -> int:
    cfg = _run_config(args)
    corpus, stats = build_corpus(args.raw_csv, cfg.bbox(), cfg.grid_side, cfg.tz_offset_hours, cfg.interval_seconds)
    save_corpus(corpus, args.out)
    _write_csv(stats.as_dict().items(), ["statistic", "value"], sys.stdout)
    return EXIT_OK


SYNTH_FLAGS = {"n_drivers": int, "days": int, "trips_per_day": int, "separability": float, "seed": int,
               "grid_side": float, "tz_offset_hours": float, "start_date": str}


def cmd_synth(args) -> int:
    from .config import parse_value
    from .synth import SynthCorpusSpec, gen_corpus

    values = read_config_file(args.config, section="synth") if args.config else {}
    values.update({k: v for k in SYNTH_FLAGS if (v := getattr(args, k)) is not None})
    bbox_keys = ("lat_min", "lat_max", "lon_min", "lon_max")
    unknown = set(values) - set(SYNTH_FLAGS) - set(bbox_keys)
    if unknown:
        raise ConfigError(f"unknown synth keys: {', '.join(sorted(unknown))}")
    kwargs = {k: parse_value(SYNTH_FLAGS[k], v, k) for k, v in values.items() if k in SYNTH_FLAGS}
    if any(k in values for k in bbox_keys):
        default = SynthCorpusSpec().bbox
        kwargs["bbox"] = BBox(*(parse_value(float, values.get(k, getattr(default, k)), k) for k in bbox_keys))
    try:
        spec = SynthCorpusSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    styles = gen_corpus(spec, args.out)
    rows = [[i, s.home_cell[0], s.home_cell[1], f"{s.speed_mean:.4f}", f"{s.active_hours[0]:.3f}",
             f"{s.trip_length_mean:.3f}", f"{s.turn_bias:.4f}"] for i, s in enumerate(styles)]
    _write_csv(rows, ["driver", "home_lat_cell", "home_lon_cell", "speed_mean", "active_start_h",
                      "trip_length_mean", "turn_bias"], sys.stdout)
    if args.corpus_out:
        corpus, stats = build_corpus(args.out, spec.bbox, spec.grid_side, spec.tz_offset_hours)
        save_corpus(corpus, args.corpus_out)
        print(f"# corpus: {stats.retained} trajectories, {stats.drivers} drivers -> {args.corpus_out}",
              file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_loss_curve, plot_score_histogram
    from .train import CHECKPOINT_NAME, LOG_COLUMNS, evaluate_checkpoint, train_model

    cfg = _run_config(args)
    corpus = _open_corpus(cfg.corpus)
    out = Path(cfg.out_dir)
    w = csv.writer(sys.stdout)
    w.writerow(LOG_COLUMNS)

    def progress(entry):
        w.writerow(entry.row())
        sys.stdout.flush()

    result = train_model(corpus, cfg, out, progress)
    plot_loss_curve(result.history, out / "loss_curve.svg")
    report, scores, pairs = evaluate_checkpoint(out / CHECKPOINT_NAME, corpus)
    plot_score_histogram(scores, [p.label for p in pairs], out / "test_scores.svg", report.threshold)
    _write_metrics(report, out / "metrics.json", result.split)
    print(f"# best epoch {result.best_epoch}; test {report.summary()}", file=sys.stderr)
    return EXIT_OK


def _write_metrics(report, path, split=None) -> None:
    doc = report.as_dict()
    if split is not None:
        doc["split"] = dataclasses.asdict(split)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_eval(args) -> int:
    from .checkpoint import CheckpointError
    from .train import evaluate_checkpoint

    corpus = _open_corpus(args.corpus)
    try:
        report, scores, pairs = evaluate_checkpoint(args.checkpoint, corpus, args.threshold, args.n_pairs)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"checkpoint does not fit this corpus: {exc}") from exc
    doc = json.dumps(report.as_dict(), indent=2, sort_keys=True)
    print(doc)
    if args.out:
        Path(args.out).write_text(doc + "\n")
    if args.histogram:
        from .plotting import plot_score_histogram
        plot_score_histogram(scores, [p.label for p in pairs], args.histogram, report.threshold)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import format_suite, timed_suite

    reports, seconds = timed_suite(seed=args.seed, tol=args.tol, model_entries=args.entries)
    print(format_suite(reports, seconds))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERIC


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def cmd_rfs(args) -> int:
    from .model import receptive_field

    rows = [[n, k, b, receptive_field(n, k, b)]
            for n in _int_list(args.n) for k in _int_list(args.k) for b in _int_list(args.b)]
    _write_csv(rows, ["N", "K", "B", "RFS"], sys.stdout)
    return EXIT_OK


# ------------------------------------------------------------------ entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matcn", description="Siamese MA-TCN driver verification toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw GPS CSV to a grid corpus")
    p.add_argument("raw_csv")
    p.add_argument("--out", required=True, help="corpus directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a synthetic raw GPS CSV")
    p.add_argument("--out", required=True, help="raw CSV path")
    p.add_argument("--config", help="config file; keys are read from its [synth] section")
    p.add_argument("--corpus-out", help="also preprocess into this corpus directory")
    for name, kind in SYNTH_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, metavar=kind.__name__.upper())
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train, checkpoint the best epoch, evaluate test drivers")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on held-out drivers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--histogram", help="SVG score histogram path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the model")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--entries", type=int, default=3, help="sampled entries per model tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("rfs", help="receptive-field table over N, K, B (lists like 1-4 or 2,3)")
    p.add_argument("--n", default="4")
    p.add_argument("--k", default="10")
    p.add_argument("--b", default="2")
    p.set_defaults(func=cmd_rfs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
