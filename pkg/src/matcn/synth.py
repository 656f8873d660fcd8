"""Synthetic multi-driver GPS logs with tunable style separability.

Each driver roams around a home cell with its own speed, hours of activity,
trip length and turning habit.  ``separability`` blends every driver's
style between a shared base (0) and a well-separated extreme (1).
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .preprocess import SEEKING, SERVING, BBox, Trajectory

SAMPLE_PERIOD_S = 40.0
METERS_PER_DEG = 6371000.0 * math.pi / 180.0
ACTIVE_WINDOW_H = 10.0
SPEED_STD = 0.4
HEADING_NOISE = 0.3


@dataclass(frozen=True)
class DriverStyle:
    home_cell: tuple[int, int]
    roaming_radius: int
    speed_mean: float
    speed_std: float
    active_hours: tuple[float, float]
    trip_length_mean: float
    turn_bias: float
    seed: int

    def __post_init__(self):
        if self.speed_mean <= 0:
            raise ValueError("speed_mean must be positive")
        if not 10 <= self.trip_length_mean <= 300:
            raise ValueError("trip_length_mean must lie in [10, 300]")
        if self.roaming_radius < 1:
            raise ValueError("roaming_radius must be >= 1")


@dataclass
class SynthCorpusSpec:
    n_drivers: int = 20
    days: int = 5
    trips_per_day: int = 5
    separability: float = 1.0
    bbox: BBox = field(default_factory=lambda: BBox(22.40, 22.80, 113.80, 114.30))
    seed: int = 0
    grid_side: float = 0.01
    tz_offset_hours: float = 0.0
    start_date: str = "2016-07-04"

    def __post_init__(self):
        if self.n_drivers < 2:
            raise ValueError("need at least two drivers")
        if self.trips_per_day < 5:
            raise ValueError("trips_per_day must be >= 5 so every driver-day survives filtering")
        if self.days < 1:
            raise ValueError("days must be >= 1")
        if not 0.0 <= self.separability <= 1.0:
            raise ValueError("separability must lie in [0, 1]")


def _base_style(spec: SynthCorpusSpec) -> DriverStyle:
    n_lat, n_lon = spec.bbox.grid_shape(spec.grid_side)
    return DriverStyle(home_cell=(n_lat // 2, n_lon // 2), roaming_radius=2, speed_mean=9.0,
                       speed_std=SPEED_STD, active_hours=(7.0, 7.0 + ACTIVE_WINDOW_H), trip_length_mean=24.0,
                       turn_bias=0.0, seed=spec.seed)


def _home_slots(n_lat: int, n_lon: int, radius: int) -> list[tuple[int, int]]:
    spacing = 2 * radius + 3
    margin = radius + 1
    return [(i, j) for i in range(margin, n_lat - margin, spacing) for j in range(margin, n_lon - margin, spacing)]


def sample_styles(spec: SynthCorpusSpec) -> list[DriverStyle]:
    """Per-driver styles, interpolated between the shared base and distinct extremes.

    At separability 1 home cells sit on a lattice whose spacing exceeds twice
    the roaming radius, and speed means are spaced three standard deviations
    apart.
    """
    rng = np.random.default_rng([spec.seed, 7919])
    base = _base_style(spec)
    n = spec.n_drivers
    n_lat, n_lon = spec.bbox.grid_shape(spec.grid_side)
    slots = _home_slots(n_lat, n_lon, base.roaming_radius)
    if len(slots) < n:
        raise ValueError(f"bounding box only fits {len(slots)} separated home cells for {n} drivers")
    homes = [slots[i] for i in rng.permutation(len(slots))[:n]]
    speed_rank = rng.permutation(n)
    starts = rng.uniform(0.0, 24.0 - ACTIVE_WINDOW_H, n)
    lengths = rng.uniform(14.0, 40.0, n)
    turns = rng.uniform(-0.6, 0.6, n)

    s = spec.separability
    styles = []
    for i in range(n):
        lo = base.active_hours[0] + s * (starts[i] - base.active_hours[0])
        styles.append(replace(
            base,
            home_cell=(int(round(base.home_cell[0] + s * (homes[i][0] - base.home_cell[0]))),
                       int(round(base.home_cell[1] + s * (homes[i][1] - base.home_cell[1])))),
            speed_mean=base.speed_mean + s * (3.0 + 3.0 * SPEED_STD * speed_rank[i] - base.speed_mean),
            active_hours=(lo, lo + ACTIVE_WINDOW_H),
            trip_length_mean=base.trip_length_mean + s * (lengths[i] - base.trip_length_mean),
            turn_bias=s * turns[i],
        ))
    return styles


def _trip_length(style: DriverStyle, rng: np.random.Generator) -> int:
    extra = rng.geometric(1.0 / (style.trip_length_mean - 9.0)) if style.trip_length_mean > 10 else 1
    return int(np.clip(9 + extra, 10, 300))


def gen_trajectory(style: DriverStyle, kind: str, day: str, start_time: float, bbox: BBox,
                   grid_side: float = 0.01, rng: np.random.Generator | None = None,
                   n_points: int | None = None, start: tuple[float, float] | None = None) -> Trajectory:
    """Biased random walk sampled every 40 s around the style's home cell.

    ``start_time`` is an epoch timestamp.  Headings drift by ``turn_bias``
    per step and are pulled home once the walk leaves the roaming radius.
    """
    if kind not in (SEEKING, SERVING):
        raise ValueError(f"kind must be {SEEKING!r} or {SERVING!r}")
    if rng is None:
        rng = np.random.default_rng([style.seed, int(start_time), kind == SERVING])
    n = _trip_length(style, rng) if n_points is None else int(np.clip(n_points, 10, 300))
    home_lat = bbox.lat_min + (style.home_cell[0] + 0.5) * grid_side
    home_lon = bbox.lon_min + (style.home_cell[1] + 0.5) * grid_side
    radius_deg = style.roaming_radius * grid_side
    if start is None:
        r = radius_deg * math.sqrt(rng.random())
        a = rng.uniform(0, 2 * math.pi)
        start = (home_lat + r * math.cos(a), home_lon + r * math.sin(a))
    lat_hi = bbox.lat_max - 1e-5
    lon_hi = bbox.lon_max - 1e-5

    lat = np.empty(n)
    lon = np.empty(n)
    lat[0] = min(max(start[0], bbox.lat_min), lat_hi)
    lon[0] = min(max(start[1], bbox.lon_min), lon_hi)
    heading = rng.uniform(0, 2 * math.pi)
    for i in range(1, n):
        speed = max(0.0, rng.normal(style.speed_mean, style.speed_std)) if style.speed_std > 0 else style.speed_mean
        dy = home_lat - lat[i - 1]
        dx = (home_lon - lon[i - 1]) * math.cos(math.radians(lat[i - 1]))
        if math.hypot(dy, dx) > radius_deg:
            heading = math.atan2(dx, dy) + rng.normal(0.0, HEADING_NOISE)
        else:
            heading += style.turn_bias + rng.normal(0.0, HEADING_NOISE)
        step = speed * SAMPLE_PERIOD_S / METERS_PER_DEG
        lat[i] = min(max(lat[i - 1] + step * math.cos(heading), bbox.lat_min), lat_hi)
        lon[i] = min(max(lon[i - 1] + step * math.sin(heading) / math.cos(math.radians(lat[i - 1])),
                         bbox.lon_min), lon_hi)
    t = start_time + SAMPLE_PERIOD_S * np.arange(n)
    return Trajectory(driver_id="", day=day, kind=kind, lat=lat, lon=lon, t=t, v=np.zeros(n))


def _midnight(spec: SynthCorpusSpec, day_index: int) -> tuple[str, float]:
    date = dt.date.fromisoformat(spec.start_date) + dt.timedelta(days=day_index)
    epoch = (date - dt.date(1970, 1, 1)).days * 86400.0 - spec.tz_offset_hours * 3600.0
    return date.isoformat(), epoch


def gen_driver_day(style: DriverStyle, spec: SynthCorpusSpec, day_index: int,
                   rng: np.random.Generator) -> list[Trajectory]:
    """Alternating seeking/serving trips that all start and end within one local day."""
    day, midnight = _midnight(spec, day_index)
    kinds = [SEEKING, SERVING] * spec.trips_per_day
    lengths = [_trip_length(style, rng) for _ in kinds]
    gaps = rng.integers(1, 16, len(kinds)) * SAMPLE_PERIOD_S
    span = sum(n - 1 for n in lengths) * SAMPLE_PERIOD_S + gaps[1:].sum()
    begin = style.active_hours[0] * 3600.0 + rng.uniform(0.0, 1800.0)
    begin = min(begin, 86400.0 - 1.0 - span)
    if begin < 0:
        raise ValueError("a driver-day does not fit in 24 hours; lower trip_length_mean")
    t0 = midnight + math.floor(begin)
    trips = []
    pos = None
    for k, (kind, n) in enumerate(zip(kinds, lengths)):
        if k:
            t0 += gaps[k]
        tr = gen_trajectory(style, kind, day, t0, spec.bbox, spec.grid_side, rng, n_points=n, start=pos)
        trips.append(tr)
        pos = (tr.lat[-1], tr.lon[-1])
        t0 = tr.t[-1]
    return trips


def driver_id(i: int) -> str:
    return f"driver{i:03d}"


def gen_corpus(spec: SynthCorpusSpec, path) -> list[DriverStyle]:
    """Write the raw CSV log for the whole synthetic fleet and return the styles used."""
    styles = sample_styles(spec)
    with open(path, "w", newline="") as fh:
        fh.write("driver_id,timestamp,lat,lon,status\n")
        for i, style in enumerate(styles):
            rng = np.random.default_rng([spec.seed, i, 104729])
            did = driver_id(i)
            for day_index in range(spec.days):
                for tr in gen_driver_day(style, spec, day_index, rng):
                    status = 1 if tr.kind == SERVING else 0
                    for la, lo, ts in zip(tr.lat, tr.lon, tr.t):
                        fh.write(f"{did},{int(ts)},{la:.6f},{lo:.6f},{status}\n")
    return styles
