"""Driver-disjoint splits, the seeded training loop and pair evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .metrics import MetricsReport, compute_metrics
from .optim import AdamState, NumericalError, adam_step
from .preprocess import Corpus, DataError, ProfileNormalizer
from .siamese import (PairBatch, PairExample, PairSampler, SiameseConfig, collate, dissimilarity,
                      init_siamese, pair_loss)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "train_loss", "val_accuracy", "val_recall", "val_f1"]
CHECKPOINT_NAME = "best.ckpt"
LOG_NAME = "train_log.csv"


@dataclass
class DataSplit:
    train: list[str]
    val: list[str]
    test: list[str]


def split_drivers(drivers, test_fraction: float = 0.3, val_fraction: float = 0.15, seed: int = 0) -> DataSplit:
    """Seeded driver-id split; test drivers never appear in training.

    ``val_fraction`` is taken from the non-test drivers.  With it at 0 (or
    too few drivers) validation falls back to the training drivers.
    """
    drivers = sorted(drivers)
    if len(drivers) < 4:
        raise DataError(f"need at least 4 drivers to split, found {len(drivers)}")
    order = [drivers[i] for i in np.random.default_rng([seed, 31]).permutation(len(drivers))]
    n_test = min(max(2, int(round(test_fraction * len(drivers)))), len(drivers) - 2)
    test, rest = order[:n_test], order[n_test:]
    n_val = int(round(val_fraction * len(rest)))
    if n_val < 2 or len(rest) - n_val < 2:
        return DataSplit(sorted(rest), sorted(rest), sorted(test))
    return DataSplit(sorted(rest[n_val:]), sorted(rest[:n_val]), sorted(test))


def fit_normalizer(corpus: Corpus, drivers) -> ProfileNormalizer:
    wanted = set(drivers)
    rows = [v for (driver, _), v in sorted(corpus.profiles.items()) if driver in wanted]
    if not rows:
        raise DataError("no profiles for the training drivers")
    return ProfileNormalizer.fit(np.stack(rows))


def fit_vocab(cfg: RunConfig, corpus: Corpus) -> RunConfig:
    """Size the grid embedding tables from the corpus grid when it records one."""
    meta = corpus.meta or {}
    overrides = {k: int(meta[k]) for k in ("lat_vocab", "lon_vocab") if k in meta}
    cells = [t.seq for t in corpus.trips]
    need_lat = max(int(s.g_lat.max()) for s in cells) + 1
    need_lon = max(int(s.g_lon.max()) for s in cells) + 1
    overrides["lat_vocab"] = max(overrides.get("lat_vocab", cfg.lat_vocab), need_lat)
    overrides["lon_vocab"] = max(overrides.get("lon_vocab", cfg.lon_vocab), need_lon)
    return cfg.with_overrides(overrides)


def train_step(params: dict[str, Tensor], mcfg: SiameseConfig, batch: PairBatch,
               state: AdamState) -> tuple[dict[str, Tensor], float]:
    with Tape() as tape:
        loss = pair_loss(params, mcfg, batch)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite training loss {value} at optimizer step {state.step_count + 1}")
    grads = tape.backward(loss)
    named = {name: grads[t] for name, t in params.items() if t in grads}
    return adam_step(params, named, state), value


def score_pairs(params: dict[str, Tensor], mcfg: SiameseConfig, pairs: list[PairExample],
                batch_size: int = 64) -> np.ndarray:
    scores = [dissimilarity(params, mcfg, collate(pairs[i:i + batch_size]))
              for i in range(0, len(pairs), batch_size)]
    return np.concatenate(scores) if scores else np.zeros(0)


def evaluate_pairs(params, mcfg: SiameseConfig, pairs: list[PairExample], threshold: float = 0.5,
                   digest: str = "", batch_size: int = 64) -> tuple[MetricsReport, np.ndarray]:
    scores = score_pairs(params, mcfg, pairs, batch_size)
    labels = np.array([p.label for p in pairs])
    return compute_metrics(labels, scores, threshold, digest), scores


def eval_pairs_for(corpus: Corpus, drivers, n_pairs: int, seed, normalizer, ratio: float = 0.5):
    return PairSampler(corpus, drivers, ratio=ratio, seed=seed, normalizer=normalizer).balanced(n_pairs)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_recall: float
    val_f1: float

    def row(self) -> list[str]:
        return [str(self.epoch), repr(self.train_loss), repr(self.val_accuracy),
                repr(self.val_recall), repr(self.val_f1)]


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    normalizer: ProfileNormalizer
    config: RunConfig
    split: DataSplit
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = -1.0
    seconds: float = 0.0


def train_model(corpus: Corpus, cfg: RunConfig, out_dir=None, progress=None) -> TrainResult:
    """Seeded end-to-end training with early stopping on validation accuracy.

    Writes the CSV log and the best-validation checkpoint into ``out_dir``
    when given.  ``progress`` receives each EpochLog as it completes.
    """
    start = time.perf_counter()
    cfg = fit_vocab(cfg, corpus)
    mcfg = cfg.model_config()
    split = split_drivers(corpus.drivers, cfg.test_fraction, cfg.val_fraction, cfg.seed)
    normalizer = fit_normalizer(corpus, split.train)
    params = init_siamese(mcfg, np.random.default_rng(cfg.seed))
    sampler = PairSampler(corpus, split.train, ratio=cfg.same_ratio, seed=[cfg.seed, 1], normalizer=normalizer)
    val_pairs = eval_pairs_for(corpus, split.val, cfg.n_val_pairs, [cfg.seed, 2], normalizer, cfg.same_ratio)
    state = AdamState(lr=cfg.lr)
    result = TrainResult(params, normalizer, cfg, split)

    log_file = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / LOG_NAME, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
    try:
        stale = 0
        for epoch in range(1, cfg.max_epochs + 1):
            losses = []
            for _ in range(cfg.steps_per_epoch):
                params, value = train_step(params, mcfg, collate(sampler.take(cfg.batch_size)), state)
                losses.append(value)
            report, _ = evaluate_pairs(params, mcfg, val_pairs, cfg.threshold)
            entry = EpochLog(epoch, float(np.mean(losses)), report.accuracy, report.recall, report.f1)
            result.history.append(entry)
            if log_file is not None:
                writer.writerow(entry.row())
                log_file.flush()
            if progress is not None:
                progress(entry)
            if report.accuracy > result.best_val_accuracy:
                result.best_val_accuracy = report.accuracy
                result.best_epoch = epoch
                result.params = params
                stale = 0
                if out_dir is not None:
                    save_run(Path(out_dir) / CHECKPOINT_NAME, params, cfg, normalizer)
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop after epoch %d (best %d)", epoch, result.best_epoch)
                    break
    finally:
        if log_file is not None:
            log_file.close()
    result.seconds = time.perf_counter() - start
    return result


def save_run(path, params: dict[str, Tensor], cfg: RunConfig, normalizer: ProfileNormalizer) -> None:
    save_checkpoint(path, params, cfg.to_dict(),
                    {"normalizer.mean": normalizer.mean, "normalizer.std": normalizer.std})


def load_run(path) -> tuple[dict[str, Tensor], RunConfig, ProfileNormalizer]:
    params, config, buffers = load_checkpoint(path)
    cfg = RunConfig.from_dict(config)
    if "normalizer.mean" not in buffers or "normalizer.std" not in buffers:
        raise ValueError(f"{path}: checkpoint lacks profile normalizer buffers")
    expected = init_siamese(cfg.model_config(), np.random.default_rng(0))
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    bad_shape = [k for k in set(expected) & set(params) if expected[k].shape != params[k].shape]
    if missing or extra or bad_shape:
        raise ValueError(f"{path}: parameters do not match its config "
                         f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}, shape {bad_shape[:3]})")
    return params, cfg, ProfileNormalizer(buffers["normalizer.mean"], buffers["normalizer.std"])


def evaluate_checkpoint(path, corpus: Corpus, threshold: float | None = None,
                        n_pairs: int | None = None) -> tuple[MetricsReport, np.ndarray, list[PairExample]]:
    """Score the checkpoint's held-out test drivers on a seeded balanced pair set."""
    params, cfg, normalizer = load_run(path)
    split = split_drivers(corpus.drivers, cfg.test_fraction, cfg.val_fraction, cfg.seed)
    pairs = eval_pairs_for(corpus, split.test, n_pairs or cfg.n_test_pairs, [cfg.seed, 3], normalizer,
                           cfg.same_ratio)
    thr = cfg.threshold if threshold is None else threshold
    report, scores = evaluate_pairs(params, cfg.model_config(), pairs, thr, cfg.digest())
    return report, scores, pairs


def evaluate_result(result: TrainResult, corpus: Corpus, n_pairs: int | None = None) -> MetricsReport:
    cfg = result.config
    pairs = eval_pairs_for(corpus, result.split.test, n_pairs or cfg.n_test_pairs, [cfg.seed, 3],
                           result.normalizer, cfg.same_ratio)
    report, _ = evaluate_pairs(result.params, cfg.model_config(), pairs, cfg.threshold, cfg.digest())
    return report
