"""Twin-shared encoders, profile embedding, dissimilarity head and BCE objective."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import MaTcnConfig, xavier_uniform, forward_trip, init_params
from .preprocess import SEEKING, SERVING, Corpus, GridBatch, GridSequence, ProfileNormalizer, pad_and_mask
from .tensor import Tensor

SEEK_PREFIX = "seek."
SERVE_PREFIX = "serve."


@dataclass
class SiameseConfig(MaTcnConfig):
    profile_dim: int = 12
    head_hidden1: int = 128
    head_hidden2: int = 32

    @property
    def head_input(self) -> int:
        return 6 * self.d


def init_siamese(cfg: SiameseConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """One parameter store: seeking encoder, serving encoder, profile MLP, head.

    Both members of a pair read the same entries, which is the weight sharing.
    """
    params = {}
    params.update(init_params(cfg, rng, SEEK_PREFIX))
    params.update(init_params(cfg, rng, SERVE_PREFIX))
    d = cfg.d
    dense = [
        ("profile.w1", cfg.profile_dim, d), ("profile.w2", d, d),
        ("head.w1", cfg.head_input, cfg.head_hidden1), ("head.w2", cfg.head_hidden1, cfg.head_hidden2),
        ("head.w3", cfg.head_hidden2, 1),
    ]
    for name, n_in, n_out in dense:
        params[name] = Tensor(xavier_uniform(rng, (n_in, n_out), n_in, n_out), requires_grad=True, name=name)
        bias = name[:-2] + "b" + name[-1]
        params[bias] = Tensor(np.zeros(n_out), requires_grad=True, name=bias)
    return params


def profile_embed(p: dict[str, Tensor], profiles) -> Tensor:
    """(B, 12) normalized profile features to the (B, d) embedding d_emb."""
    profiles = T.as_tensor(profiles)
    if not np.all(np.isfinite(profiles.data)):
        raise ValueError("profile features must be finite")
    h = T.gelu(profiles @ p["profile.w1"] + p["profile.b1"])
    return h @ p["profile.w2"] + p["profile.b2"]


@dataclass
class TripRef:
    driver: str
    day: str
    seek: int
    serve: int


@dataclass
class DriverInput:
    seeking: GridSequence
    serving: GridSequence
    profile: np.ndarray
    ref: TripRef | None = None


@dataclass
class PairExample:
    a: DriverInput
    b: DriverInput
    label: int


@dataclass
class PairBatch:
    """B pairs; sequence batches hold side a in rows [0, B) and side b in [B, 2B)."""
    seeking: GridBatch
    serving: GridBatch
    profiles: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def collate(pairs: list[PairExample]) -> PairBatch:
    sides = [p.a for p in pairs] + [p.b for p in pairs]
    return PairBatch(
        seeking=pad_and_mask([s.seeking for s in sides]),
        serving=pad_and_mask([s.serving for s in sides]),
        profiles=np.stack([s.profile for s in sides]),
        labels=np.array([p.label for p in pairs], dtype=np.float64),
    )


def dissimilarity_logits(p: dict[str, Tensor], cfg: SiameseConfig, batch: PairBatch) -> Tensor:
    """Pre-sigmoid dissimilarity for each pair, shape (B,)."""
    n = len(batch)
    d_emb = profile_embed(p, batch.profiles)
    trip_seek = forward_trip(p, cfg, batch.seeking, d_emb, SEEK_PREFIX)
    trip_serve = forward_trip(p, cfg, batch.serving, d_emb, SERVE_PREFIX)
    feats = T.concat([trip_seek[:n], trip_serve[:n], d_emb[:n],
                      trip_seek[n:], trip_serve[n:], d_emb[n:]], axis=1)
    h = T.gelu(feats @ p["head.w1"] + p["head.b1"])
    h = T.gelu(h @ p["head.w2"] + p["head.b2"])
    return T.reshape(h @ p["head.w3"] + p["head.b3"], (n,))


def dissimilarity(p: dict[str, Tensor], cfg: SiameseConfig, batch: PairBatch) -> np.ndarray:
    """Scores in (0, 1); higher means more likely two different drivers."""
    return T.sigmoid(dissimilarity_logits(p, cfg, batch)).data.copy()


def bce_loss(score, y) -> np.ndarray:
    """Binary cross-entropy on probabilities, straight from its definition."""
    score = np.asarray(score, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(score) + (1.0 - y) * np.log(1.0 - score))


def bce_with_logits(logits: Tensor, y) -> Tensor:
    """Mean BCE of sigmoid(logits) against y, evaluated as softplus(z) - y z."""
    z = logits.data
    y = np.asarray(y, dtype=np.float64)
    if y.shape != z.shape:
        raise T.ShapeError(f"labels {y.shape} do not match logits {z.shape}")
    per = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - y * z
    n = z.size

    def grad_fn(g):
        return (g * (T._FORWARD["sigmoid"](z) - y) / n,)

    return T.record("bce_with_logits", np.asarray(T.seq_sum(per.reshape(-1), 0) / n), (logits,), grad_fn)


def pair_loss(p: dict[str, Tensor], cfg: SiameseConfig, batch: PairBatch) -> Tensor:
    return bce_with_logits(dissimilarity_logits(p, cfg, batch), batch.labels)


def classify(score: float, threshold: float = 0.5) -> str:
    """Scores below the threshold mean the same driver; the boundary counts as different."""
    return "same" if score < threshold else "different"


# ------------------------------------------------------------------ pairs

class PairSampler:
    """Seeded stream of labelled pairs drawn from a subset of drivers and days.

    Each side is one seeking and one serving trip of a single driver-day,
    with that day's profile.  Same-driver pairs take two different days when
    the driver has them, otherwise disjoint trips of one day.
    """

    def __init__(self, corpus: Corpus, drivers=None, days=None, ratio: float = 0.5, seed: int = 0,
                 normalizer: ProfileNormalizer | None = None):
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"same-driver ratio must be in [0, 1], got {ratio}")
        self.corpus = corpus
        self.ratio = ratio
        self.rng = np.random.default_rng(seed)
        self.normalizer = normalizer
        self.skipped = 0
        wanted = set(corpus.drivers if drivers is None else drivers)
        allowed_days = None if days is None else set(days)
        index = corpus.index()
        self.days: dict[str, list[tuple[str, list[int], list[int]]]] = {}
        for driver in sorted(wanted & set(index)):
            usable = [(day, kinds[SEEKING], kinds[SERVING]) for day, kinds in sorted(index[driver].items())
                      if kinds[SEEKING] and kinds[SERVING] and (allowed_days is None or day in allowed_days)]
            if usable:
                self.days[driver] = usable
        self.drivers = sorted(self.days)
        if len(self.drivers) < 2:
            raise ValueError(f"need at least two drivers with usable trips, found {len(self.drivers)}")

    def _side(self, driver: str, day_slot, exclude: TripRef | None = None) -> DriverInput:
        day, seeks, serves = day_slot
        if exclude is not None:
            seeks = [i for i in seeks if i != exclude.seek]
            serves = [i for i in serves if i != exclude.serve]
        i = int(seeks[self.rng.integers(len(seeks))])
        j = int(serves[self.rng.integers(len(serves))])
        raw = self.corpus.profiles[(driver, day)]
        prof = self.normalizer.transform(raw) if self.normalizer is not None else np.asarray(raw, dtype=np.float64)
        return DriverInput(self.corpus.trips[i].seq, self.corpus.trips[j].seq, prof, TripRef(driver, day, i, j))

    def _same(self) -> PairExample | None:
        driver = self.drivers[self.rng.integers(len(self.drivers))]
        slots = self.days[driver]
        if len(slots) >= 2:
            i, j = self.rng.choice(len(slots), size=2, replace=False)
            return PairExample(self._side(driver, slots[i]), self._side(driver, slots[j]), 0)
        day, seeks, serves = slots[0]
        if len(seeks) < 2 or len(serves) < 2:
            self.skipped += 1
            return None
        a = self._side(driver, slots[0])
        return PairExample(a, self._side(driver, slots[0], exclude=a.ref), 0)

    def _different(self) -> PairExample:
        i, j = self.rng.choice(len(self.drivers), size=2, replace=False)
        da, db = self.drivers[i], self.drivers[j]
        sa = self.days[da][self.rng.integers(len(self.days[da]))]
        sb = self.days[db][self.rng.integers(len(self.days[db]))]
        return PairExample(self._side(da, sa), self._side(db, sb), 1)

    def _draw(self, same: bool) -> PairExample:
        if not same:
            return self._different()
        for _ in range(1000):
            pair = self._same()
            if pair is not None:
                return pair
        raise ValueError("no driver can form a same-driver pair")

    def __iter__(self):
        while True:
            yield self._draw(self.rng.random() < self.ratio)

    def take(self, n: int) -> list[PairExample]:
        return [self._draw(self.rng.random() < self.ratio) for _ in range(n)]

    def balanced(self, n: int) -> list[PairExample]:
        """Exactly round(n * ratio) same-driver pairs, shuffled."""
        n_same = int(round(n * self.ratio))
        flags = np.array([True] * n_same + [False] * (n - n_same))
        self.rng.shuffle(flags)
        return [self._draw(bool(f)) for f in flags]


def make_pairs(corpus: Corpus, n: int, ratio: float = 0.5, seed: int = 0, drivers=None, days=None,
               normalizer: ProfileNormalizer | None = None) -> list[PairExample]:
    return PairSampler(corpus, drivers, days, ratio, seed, normalizer).take(n)


def write_manifest(pairs: list[PairExample], path) -> None:
    """One CSV line per pair: both sides' driver, day, trip indices, then the label."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a_driver", "a_day", "a_seek", "a_serve", "b_driver", "b_day", "b_seek", "b_serve", "label"])
        for p in pairs:
            w.writerow([p.a.ref.driver, p.a.ref.day, p.a.ref.seek, p.a.ref.serve,
                        p.b.ref.driver, p.b.ref.day, p.b.ref.seek, p.b.ref.serve, p.label])
