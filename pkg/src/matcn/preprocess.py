"""Raw GPS logs to padded grid sequences and per-driver profile features.

Pipeline: ``ingest_csv`` -> ``segment_by_status`` -> ``filter_trajectories``
-> ``compute_velocity`` -> ``to_grid``; batches are built with
``pad_and_mask``.  ``build_corpus`` runs the whole chain.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import seq_sum

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371000.0
SECONDS_PER_DAY = 86400
N_PROFILE_FEATURES = 12
PROFILE_FEATURE_NAMES = (
    "seeking_trips_per_day",
    "serving_trips_per_day",
    "mean_speed",
    "std_speed",
    "mean_trip_duration_s",
    "mean_trip_points",
    "mean_trip_length_m",
    "distinct_cells",
    "activity_00_06",
    "activity_06_12",
    "activity_12_18",
    "activity_18_24",
)
SEEKING, SERVING = "seeking", "serving"
CSV_COLUMNS = ("driver_id", "timestamp", "lat", "lon", "status")

# Tolerance (in cell widths) absorbing float error in floor((x - x0) / s).
_GRID_EPS = 1e-9


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not (-90 <= self.lat_min < self.lat_max <= 90):
            raise ValueError(f"bad latitude range [{self.lat_min}, {self.lat_max}]")
        if not (-180 <= self.lon_min < self.lon_max <= 180):
            raise ValueError(f"bad longitude range [{self.lon_min}, {self.lon_max}]")

    def contains(self, lat, lon):
        """Half-open box test: the max edges belong to the outside."""
        return (lat >= self.lat_min) & (lat < self.lat_max) & (lon >= self.lon_min) & (lon < self.lon_max)

    @property
    def origin(self) -> tuple[float, float]:
        return self.lat_min, self.lon_min

    def grid_shape(self, side: float) -> tuple[int, int]:
        n_lat = math.ceil((self.lat_max - self.lat_min) / side - _GRID_EPS)
        n_lon = math.ceil((self.lon_max - self.lon_min) / side - _GRID_EPS)
        return n_lat, n_lon


@dataclass(frozen=True)
class RawGpsPoint:
    driver_id: str
    timestamp: float
    lat: float
    lon: float
    status: bool


@dataclass
class Trajectory:
    driver_id: str
    day: str
    kind: str
    lat: np.ndarray
    lon: np.ndarray
    t: np.ndarray
    v: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class GridSequence:
    g_lat: np.ndarray
    g_lon: np.ndarray
    interval: np.ndarray
    velocity: np.ndarray
    mask: np.ndarray
    original_length: int

    def __len__(self) -> int:
        return len(self.g_lat)

    @classmethod
    def from_cells(cls, cells) -> "GridSequence":
        arr = np.asarray(cells, dtype=np.float64).reshape(-1, 4)
        n = len(arr)
        return cls(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2].astype(np.int64),
                   arr[:, 3].copy(), np.ones(n, dtype=bool), n)

    def cells(self) -> list[list]:
        m = self.original_length
        return [[int(a), int(b), int(c), float(v)] for a, b, c, v in
                zip(self.g_lat[:m], self.g_lon[:m], self.interval[:m], self.velocity[:m])]


@dataclass
class GridBatch:
    """Sequences padded to the longest member; every array is (B, L)."""
    g_lat: np.ndarray
    g_lon: np.ndarray
    interval: np.ndarray
    velocity: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return self.g_lat.shape[0]

    @property
    def max_len(self) -> int:
        return self.g_lat.shape[1]


@dataclass
class IngestStats:
    rows: int = 0
    malformed: int = 0
    out_of_area: int = 0
    duplicates: int = 0
    kept: int = 0


# ------------------------------------------------------------------ helpers

def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in metres; works elementwise on arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


def local_day(timestamp: float, tz_offset_hours: float = 0.0) -> str:
    local = timestamp + tz_offset_hours * 3600.0
    return (dt.date(1970, 1, 1) + dt.timedelta(days=math.floor(local / SECONDS_PER_DAY))).isoformat()


def seconds_of_day(t, tz_offset_hours: float = 0.0):
    return np.mod(np.asarray(t, dtype=np.float64) + tz_offset_hours * 3600.0, SECONDS_PER_DAY)


# --------------------------------------------------------------- pipeline

def ingest_csv(path, bbox: BBox, grid_side_deg: float = 0.01) -> tuple[dict[str, list[RawGpsPoint]], IngestStats]:
    """Read a raw log, drop out-of-area points and return per-driver sorted lists.

    Malformed rows are skipped and counted.  Points sharing a timestamp
    within one driver keep the first one seen in file order.
    """
    if grid_side_deg <= 0:
        raise ValueError(f"grid side must be positive, got {grid_side_deg}")
    stats = IngestStats()
    by_driver: dict[str, list[RawGpsPoint]] = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(CSV_COLUMNS) <= set(reader.fieldnames):
            raise DataError(f"{path}: header must contain {','.join(CSV_COLUMNS)}")
        for row in reader:
            stats.rows += 1
            try:
                status = row["status"].strip()
                if status not in ("0", "1"):
                    raise ValueError(status)
                pt = RawGpsPoint(row["driver_id"].strip(), float(row["timestamp"]), float(row["lat"]),
                                 float(row["lon"]), status == "1")
                if not (pt.driver_id and math.isfinite(pt.timestamp) and -90 <= pt.lat <= 90
                        and -180 <= pt.lon <= 180):
                    raise ValueError(row)
            except (ValueError, TypeError, AttributeError):
                stats.malformed += 1
                continue
            if not bbox.contains(pt.lat, pt.lon):
                stats.out_of_area += 1
                continue
            by_driver[pt.driver_id].append(pt)
    if stats.malformed:
        log.warning("%s: skipped %d malformed rows", path, stats.malformed)

    result = {}
    for driver in sorted(by_driver):
        pts = sorted(by_driver[driver], key=lambda p: p.timestamp)
        unique = []
        for p in pts:
            if unique and unique[-1].timestamp == p.timestamp:
                stats.duplicates += 1
                continue
            unique.append(p)
        result[driver] = unique
        stats.kept += len(unique)
    if not result:
        raise DataError(f"{path}: no GPS points left inside the investigated area")
    return result, stats


def segment_by_status(points: list[RawGpsPoint], tz_offset_hours: float = 0.0) -> list[Trajectory]:
    """Split a time-sorted point list into maximal runs of constant status."""
    trajs = []
    start = 0
    for i in range(1, len(points) + 1):
        if i == len(points) or points[i].status != points[start].status:
            run = points[start:i]
            trajs.append(Trajectory(
                driver_id=run[0].driver_id,
                day=local_day(run[0].timestamp, tz_offset_hours),
                kind=SERVING if run[0].status else SEEKING,
                lat=np.array([p.lat for p in run]),
                lon=np.array([p.lon for p in run]),
                t=np.array([p.timestamp for p in run]),
                v=np.zeros(len(run)),
            ))
            start = i
    return trajs


def filter_trajectories(trajs: list[Trajectory], min_len: int = 10, max_len: int = 300,
                        min_per_kind: int = 5) -> list[Trajectory]:
    """Keep lengths in [min_len, max_len], then drop thin driver-days.

    A driver-day survives only with at least ``min_per_kind`` trajectories
    of both kinds.
    """
    kept = [t for t in trajs if min_len <= len(t) <= max_len]
    counts: dict[tuple[str, str], dict[str, int]] = defaultdict(lambda: {SEEKING: 0, SERVING: 0})
    for t in kept:
        counts[(t.driver_id, t.day)][t.kind] += 1
    return [t for t in kept
            if min(counts[(t.driver_id, t.day)].values()) >= min_per_kind]


def compute_velocity(traj: Trajectory) -> Trajectory:
    """Average speed (m/s) from each point to the next; the last copies its predecessor."""
    n = len(traj)
    v = np.zeros(n)
    if n >= 2:
        dist = haversine_m(traj.lat[:-1], traj.lon[:-1], traj.lat[1:], traj.lon[1:])
        dt_s = np.diff(traj.t)
        with np.errstate(divide="ignore", invalid="ignore"):
            v[:-1] = np.where(dt_s > 0, dist / np.where(dt_s > 0, dt_s, 1.0), 0.0)
        v[-1] = v[-2]
    return Trajectory(traj.driver_id, traj.day, traj.kind, traj.lat, traj.lon, traj.t, v)


def grid_index(values, origin: float, side: float) -> np.ndarray:
    return np.floor((np.asarray(values, dtype=np.float64) - origin) / side + _GRID_EPS).astype(np.int64)


def time_interval(t, interval_len: float = 300.0, tz_offset_hours: float = 0.0) -> np.ndarray:
    """1-based index of the ``interval_len``-second slot of the local day."""
    return (np.floor(seconds_of_day(t, tz_offset_hours) / interval_len) + 1).astype(np.int64)


def to_grid(traj: Trajectory, origin: tuple[float, float], side: float = 0.01,
            interval_len: float = 300.0, tz_offset_hours: float = 0.0) -> GridSequence:
    n = len(traj)
    return GridSequence(
        g_lat=grid_index(traj.lat, origin[0], side),
        g_lon=grid_index(traj.lon, origin[1], side),
        interval=time_interval(traj.t, interval_len, tz_offset_hours),
        velocity=np.asarray(traj.v, dtype=np.float64).copy(),
        mask=np.ones(n, dtype=bool),
        original_length=n,
    )


def pad_and_mask(seqs: list[GridSequence], length: int | None = None) -> GridBatch:
    """Pad to the longest sequence (or ``length``) with (0, 0, interval 1, v 0) cells."""
    if not seqs:
        raise ValueError("pad_and_mask needs at least one sequence")
    lengths = np.array([s.original_length for s in seqs], dtype=np.int64)
    max_len = int(lengths.max()) if length is None else int(length)
    if max_len < lengths.max():
        raise ValueError(f"pad length {max_len} is shorter than a sequence of {lengths.max()}")
    b = len(seqs)
    g_lat = np.zeros((b, max_len), dtype=np.int64)
    g_lon = np.zeros((b, max_len), dtype=np.int64)
    interval = np.ones((b, max_len), dtype=np.int64)
    velocity = np.zeros((b, max_len))
    mask = np.zeros((b, max_len), dtype=bool)
    for i, s in enumerate(seqs):
        m = s.original_length
        g_lat[i, :m] = s.g_lat[:m]
        g_lon[i, :m] = s.g_lon[:m]
        interval[i, :m] = s.interval[:m]
        velocity[i, :m] = s.velocity[:m]
        mask[i, :m] = True
    return GridBatch(g_lat, g_lon, interval, velocity, mask, lengths)


def masked_mean(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return seq_sum(np.where(mask, values, 0.0), -1) / mask.sum(axis=-1)


def extract_profile_features(trajs: list[Trajectory], origin: tuple[float, float],
                             side: float = 0.01, tz_offset_hours: float = 0.0) -> np.ndarray:
    """Twelve summary statistics of one driver over one period (see PROFILE_FEATURE_NAMES)."""
    if not trajs:
        raise DataError("cannot build profile features from zero trajectories")
    n_days = len({t.day for t in trajs})
    n_seek = sum(t.kind == SEEKING for t in trajs)
    n_serve = len(trajs) - n_seek
    speeds = np.concatenate([t.v for t in trajs])
    durations = [t.t[-1] - t.t[0] for t in trajs]
    lengths = [float(np.sum(haversine_m(t.lat[:-1], t.lon[:-1], t.lat[1:], t.lon[1:]))) for t in trajs]
    cells = set()
    for t in trajs:
        cells.update(zip(grid_index(t.lat, origin[0], side).tolist(), grid_index(t.lon, origin[1], side).tolist()))
    hours = np.concatenate([seconds_of_day(t.t, tz_offset_hours) for t in trajs]) / 3600.0
    segments = np.bincount(np.minimum((hours // 6).astype(int), 3), minlength=4) / len(hours)
    feats = np.array([
        n_seek / n_days,
        n_serve / n_days,
        speeds.mean(),
        speeds.std(),
        float(np.mean(durations)),
        float(np.mean([len(t) for t in trajs])),
        float(np.mean(lengths)),
        float(len(cells)),
        *segments,
    ])
    if not np.all(np.isfinite(feats)):
        raise DataError("profile features are not finite")
    return feats


@dataclass
class ProfileNormalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "ProfileNormalizer":
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, N_PROFILE_FEATURES)
        std = rows.std(axis=0)
        return cls(rows.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.std


# ------------------------------------------------------------------ corpus

@dataclass
class TripRecord:
    driver: str
    day: str
    kind: str
    seq: GridSequence


@dataclass
class Corpus:
    """Preprocessed trajectories plus raw profile features keyed by (driver, day)."""
    trips: list[TripRecord]
    profiles: dict[tuple[str, str], np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def drivers(self) -> list[str]:
        return sorted({t.driver for t in self.trips})

    def index(self) -> dict[str, dict[str, dict[str, list[int]]]]:
        """driver -> day -> kind -> trip indices."""
        idx: dict = defaultdict(lambda: defaultdict(lambda: {SEEKING: [], SERVING: []}))
        for i, t in enumerate(self.trips):
            idx[t.driver][t.day][t.kind].append(i)
        return idx


@dataclass
class PipelineStats:
    ingest: IngestStats
    segmented: int = 0
    retained: int = 0
    drivers: int = 0
    driver_days: int = 0

    def as_dict(self) -> dict:
        return {**{f"ingest_{k}": v for k, v in vars(self.ingest).items()},
                "segmented": self.segmented, "retained": self.retained,
                "drivers": self.drivers, "driver_days": self.driver_days}


def build_corpus(csv_path, bbox: BBox, side: float = 0.01, tz_offset_hours: float = 0.0,
                 interval_len: float = 300.0) -> tuple[Corpus, PipelineStats]:
    points, ingest = ingest_csv(csv_path, bbox, side)
    stats = PipelineStats(ingest)
    trips: list[TripRecord] = []
    per_period: dict[tuple[str, str], list[Trajectory]] = defaultdict(list)
    for driver, pts in points.items():
        segs = segment_by_status(pts, tz_offset_hours)
        stats.segmented += len(segs)
        for traj in filter_trajectories(segs):
            traj = compute_velocity(traj)
            per_period[(driver, traj.day)].append(traj)
            trips.append(TripRecord(driver, traj.day, traj.kind,
                                    to_grid(traj, bbox.origin, side, interval_len, tz_offset_hours)))
    if not trips:
        raise DataError(f"{csv_path}: no trajectories survive filtering")
    trips.sort(key=lambda r: (r.driver, r.day))
    profiles = {key: extract_profile_features(ts, bbox.origin, side, tz_offset_hours)
                for key, ts in sorted(per_period.items())}
    stats.retained = len(trips)
    stats.drivers = len({t.driver for t in trips})
    stats.driver_days = len(profiles)
    n_lat, n_lon = bbox.grid_shape(side)
    meta = {"bbox": [bbox.lat_min, bbox.lat_max, bbox.lon_min, bbox.lon_max], "grid_side": side,
            "tz_offset_hours": tz_offset_hours, "lat_vocab": n_lat, "lon_vocab": n_lon,
            "stats": stats.as_dict()}
    return Corpus(trips, profiles, meta), stats


TRIPS_FILE = "trajectories.jsonl"
PROFILES_FILE = "profiles.jsonl"
META_FILE = "meta.json"


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / TRIPS_FILE, "w") as fh:
        for r in corpus.trips:
            fh.write(json.dumps({"driver": r.driver, "day": r.day, "kind": r.kind,
                                 "cells": r.seq.cells()}, separators=(",", ":")) + "\n")
    with open(out / PROFILES_FILE, "w") as fh:
        for (driver, period), feats in corpus.profiles.items():
            fh.write(json.dumps({"driver": driver, "period": period, "features": [float(x) for x in feats]},
                                separators=(",", ":")) + "\n")
    with open(out / META_FILE, "w") as fh:
        json.dump(corpus.meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_corpus(corpus_dir) -> Corpus:
    src = Path(corpus_dir)
    try:
        trips = []
        with open(src / TRIPS_FILE) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    trips.append(TripRecord(rec["driver"], rec["day"], rec["kind"],
                                            GridSequence.from_cells(rec["cells"])))
        profiles = {}
        with open(src / PROFILES_FILE) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    profiles[(rec["driver"], rec["period"])] = np.array(rec["features"], dtype=np.float64)
        meta = json.loads((src / META_FILE).read_text()) if (src / META_FILE).exists() else {}
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read corpus at {src}: {exc}") from exc
    if not trips:
        raise DataError(f"corpus at {src} is empty")
    return Corpus(trips, profiles, meta)
