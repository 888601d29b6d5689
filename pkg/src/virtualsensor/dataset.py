"""Sensor dataset handling: schema, CSV ingestion, standardization, time
encoding, autoregressive gap filling, and road proximity.

The feature layout is fixed: 2 satellite columns, 9 meteorological columns,
6 cyclical time columns, 1 static distance-to-road column, and 1
autoregressive previous-NO2 column (19 columns total). Targets are hourly
NO2 concentrations in ug/m3 and are never standardized.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateFeatureError, ParseError, SchemaError

EARTH_RADIUS_M = 6_371_000.0

# readings.csv columns after (timestamp, sensor_id, no2_ugm3), in order.
READING_FEATURE_COLUMNS = (
    "sat_no2_molm2",
    "aerosol_idx",
    "wind_speed_ms",
    "wind_gust_ms",
    "wind_dir_deg",
    "vpd_kpa",
    "temp_c",
    "pressure_pa",
    "rel_humidity_pct",
    "dewpoint_c",
    "cloud_cover_pct",
)

READINGS_HEADER = ("timestamp", "sensor_id", "no2_ugm3") + READING_FEATURE_COLUMNS
LOCATIONS_HEADER = ("sensor_id", "lat", "lon", "dist_road_m")


@dataclass(frozen=True)
class SensorLocation:
    """A monitored site: WGS84 coordinates plus the static road-proximity covariate."""

    id: str
    lat: float
    lon: float
    dist_road: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise SchemaError(f"sensor {self.id!r}: lat {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise SchemaError(f"sensor {self.id!r}: lon {self.lon} outside [-180, 180]")
        if self.dist_road < 0:
            raise SchemaError(f"sensor {self.id!r}: dist_road {self.dist_road} is negative")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature columns as (name, unit, group) triples.

    Groups: satellite, meteorological, time, static, autoregressive.
    """

    columns: tuple[tuple[str, str, str], ...]

    def __post_init__(self):
        counts = {}
        for _, _, group in self.columns:
            counts[group] = counts.get(group, 0) + 1
        expected = {
            "satellite": 2,
            "meteorological": 9,
            "time": 6,
            "static": 1,
            "autoregressive": 1,
        }
        if counts != expected:
            raise SchemaError(f"bad feature group counts: {counts} (expected {expected})")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _, _ in self.columns)

    @property
    def width(self) -> int:
        return len(self.columns)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def prev_no2_index(self) -> int:
        return self.index("prev_no2")


def default_schema() -> FeatureSchema:
    sat = (("sat_no2", "mol/m2", "satellite"), ("aerosol_idx", "1", "satellite"))
    met = (
        ("wind_speed", "m/s", "meteorological"),
        ("wind_gust", "m/s", "meteorological"),
        ("wind_dir", "deg", "meteorological"),
        ("vpd", "kPa", "meteorological"),
        ("temp", "degC", "meteorological"),
        ("pressure", "Pa", "meteorological"),
        ("rel_humidity", "%", "meteorological"),
        ("dewpoint", "degC", "meteorological"),
        ("cloud_cover", "%", "meteorological"),
    )
    time_cols = tuple(
        (name, "1", "time")
        for name in ("hour_sin", "hour_cos", "dow_sin", "dow_cos", "week_sin", "week_cos")
    )
    static = (("dist_road", "m", "static"),)
    ar = (("prev_no2", "ug/m3", "autoregressive"),)
    return FeatureSchema(sat + met + time_cols + static + ar)


@dataclass(frozen=True)
class StandardizationStats:
    """Per-feature mean and standard deviation in original units."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise SchemaError("stats mean/std shape mismatch")
        if np.any(self.std <= 0):
            raise SchemaError("standardization std must be positive")

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def inverse(self, features: np.ndarray) -> np.ndarray:
        return features * self.std + self.mean

    def transform_column(self, index: int, value):
        return (value - self.mean[index]) / self.std[index]

    def inverse_column(self, index: int, value):
        return value * self.std[index] + self.mean[index]


@dataclass(frozen=True)
class HourlyFrame:
    """Per-hour snapshot over all sensors."""

    timestamp: datetime
    features: np.ndarray  # [n_sensors, n_features]
    target_no2: np.ndarray  # [n_sensors]
    present: np.ndarray  # [n_sensors] bool


@dataclass(frozen=True)
class Dataset:
    """Immutable hourly dataset over a fixed sensor set.

    The timeline is dense: frame t is `start + t hours`, and gaps appear as
    all-false rows of `present`, never as skipped timestamps. Feature entries
    may be NaN where a sensor was absent.
    """

    locations: tuple[SensorLocation, ...]
    schema: FeatureSchema
    start: datetime
    features: np.ndarray  # [T, n, d]
    targets: np.ndarray  # [T, n]
    present: np.ndarray  # [T, n] bool
    stats: StandardizationStats | None = None

    def __post_init__(self):
        T, n, d = self.features.shape
        if self.targets.shape != (T, n) or self.present.shape != (T, n):
            raise SchemaError("dataset array shapes disagree")
        if d != self.schema.width:
            raise SchemaError(f"feature width {d} != schema width {self.schema.width}")
        ids = [loc.id for loc in self.locations]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate sensor ids")
        if len(ids) != n:
            raise SchemaError("location count does not match feature columns")

    @property
    def n_sensors(self) -> int:
        return len(self.locations)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def timestamp(self, t: int) -> datetime:
        return self.start + timedelta(hours=int(t))

    @property
    def timestamps(self) -> list[datetime]:
        return [self.timestamp(t) for t in range(self.n_frames)]

    @property
    def frames(self) -> list[HourlyFrame]:
        return [
            HourlyFrame(self.timestamp(t), self.features[t], self.targets[t], self.present[t])
            for t in range(self.n_frames)
        ]

    def sensor_index(self, sensor_id: str) -> int:
        for i, loc in enumerate(self.locations):
            if loc.id == sensor_id:
                return i
        raise SchemaError(f"unknown sensor id {sensor_id!r}")


def encode_time(ts: datetime) -> np.ndarray:
    """Cyclical encoding: (sin, cos) for hour-of-day, day-of-week, week-of-year."""
    hour_phase = 2.0 * math.pi * ts.hour / 24.0
    dow_phase = 2.0 * math.pi * ts.weekday() / 7.0
    week_phase = 2.0 * math.pi * (ts.isocalendar()[1] - 1) / 52.0
    return np.array(
        [
            math.sin(hour_phase),
            math.cos(hour_phase),
            math.sin(dow_phase),
            math.cos(dow_phase),
            math.sin(week_phase),
            math.cos(week_phase),
        ]
    )


def parse_hour_timestamp(text: str, line_no: int) -> datetime:
    try:
        ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ParseError(f"readings line {line_no}: bad timestamp {text!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    ts = ts.astimezone(timezone.utc)
    if ts.minute or ts.second or ts.microsecond:
        raise ParseError(f"readings line {line_no}: timestamp {text!r} not hour-aligned")
    return ts


def load_locations(path) -> tuple[SensorLocation, ...]:
    locations = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(LOCATIONS_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"{path}: locations header missing columns {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            try:
                locations.append(
                    SensorLocation(
                        id=row["sensor_id"],
                        lat=float(row["lat"]),
                        lon=float(row["lon"]),
                        dist_road=float(row["dist_road_m"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path} line {line_no}: malformed row") from exc
    if not locations:
        raise ParseError(f"{path}: no sensors")
    return tuple(locations)


def load_dataset(locations_path, readings_path) -> Dataset:
    """Read the locations/readings CSV pair into a dense-timeline Dataset.

    Absent (sensor, hour) rows become present=False entries with NaN
    satellite/meteorological features; time and static columns are always
    populated.
    """
    locations = load_locations(locations_path)
    schema = default_schema()
    index_of = {loc.id: i for i, loc in enumerate(locations)}

    rows = []  # (timestamp, sensor index, no2, feature values)
    seen = set()
    with open(readings_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(READINGS_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"{readings_path}: readings header missing columns {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            ts = parse_hour_timestamp(row["timestamp"], line_no)
            sensor_id = row["sensor_id"]
            if sensor_id not in index_of:
                raise SchemaError(
                    f"readings line {line_no}: unknown sensor_id {sensor_id!r}"
                )
            key = (ts, sensor_id)
            if key in seen:
                raise ParseError(
                    f"readings line {line_no}: duplicate reading for {sensor_id} at {ts.isoformat()}"
                )
            seen.add(key)
            try:
                no2 = float(row["no2_ugm3"])
                values = [float(row[c]) for c in READING_FEATURE_COLUMNS]
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{readings_path} line {line_no}: malformed row") from exc
            rows.append((ts, index_of[sensor_id], no2, values))

    if not rows:
        raise ParseError(f"{readings_path}: no readings")

    start = min(r[0] for r in rows)
    end = max(r[0] for r in rows)
    n_hours = int((end - start).total_seconds() // 3600) + 1
    n = len(locations)
    d = schema.width

    features = np.full((n_hours, n, d), np.nan)
    targets = np.full((n_hours, n), np.nan)
    present = np.zeros((n_hours, n), dtype=bool)

    time_lo = schema.index("hour_sin")
    for t in range(n_hours):
        features[t, :, time_lo : time_lo + 6] = encode_time(start + timedelta(hours=t))
    dist_col = schema.index("dist_road")
    features[:, :, dist_col] = [loc.dist_road for loc in locations]

    for ts, s, no2, values in rows:
        t = int((ts - start).total_seconds() // 3600)
        features[t, s, : len(values)] = values
        targets[t, s] = no2
        present[t, s] = True

    return Dataset(
        locations=locations,
        schema=schema,
        start=start,
        features=features,
        targets=targets,
        present=present,
    )


def write_locations_csv(locations: Sequence[SensorLocation], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOCATIONS_HEADER)
        for loc in locations:
            writer.writerow([loc.id, repr(loc.lat), repr(loc.lon), repr(loc.dist_road)])


def write_readings_csv(ds: Dataset, path) -> None:
    """Write present readings in the canonical format; absent pairs are skipped."""
    n_csv = len(READING_FEATURE_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(READINGS_HEADER)
        for t in range(ds.n_frames):
            ts = ds.timestamp(t).strftime("%Y-%m-%dT%H:00:00Z")
            for s in range(ds.n_sensors):
                if not ds.present[t, s]:
                    continue
                row = [ts, ds.locations[s].id, repr(float(ds.targets[t, s]))]
                row += [repr(float(v)) for v in ds.features[t, s, :n_csv]]
                writer.writerow(row)


def standardize(ds: Dataset) -> tuple[Dataset, StandardizationStats]:
    """Standardize every feature column to mean 0, std 1 over present entries.

    Targets are left in physical units. Zero-variance columns get std 1 so
    the inverse transform stays total. Population std is used.
    """
    if ds.stats is not None:
        raise SchemaError("dataset is already standardized")
    d = ds.schema.width
    mean = np.empty(d)
    std = np.empty(d)
    mask = ds.present
    for j in range(d):
        col = ds.features[:, :, j][mask]
        col = col[np.isfinite(col)]
        if col.size < 2:
            raise DegenerateFeatureError(
                f"feature {ds.schema.names[j]!r} has {col.size} present observations (< 2)"
            )
        mean[j] = col.mean()
        s = col.std()
        std[j] = s if s > 0 else 1.0
    stats = StandardizationStats(mean=mean, std=std)
    out = replace(ds, features=stats.transform(ds.features), stats=stats)
    return out, stats


def apply_standardization(ds: Dataset, stats: StandardizationStats) -> Dataset:
    """Standardize with externally supplied stats (e.g. transfer-source stats)."""
    if ds.stats is not None:
        raise SchemaError("dataset is already standardized")
    return replace(ds, features=stats.transform(ds.features), stats=stats)


def unstandardize(ds: Dataset) -> Dataset:
    if ds.stats is None:
        raise SchemaError("dataset carries no standardization stats")
    return replace(ds, features=ds.stats.inverse(ds.features), stats=None)


def fill_prev_no2(ds: Dataset) -> Dataset:
    """Populate the autoregressive column with the previous hour's NO2.

    When a sensor was absent at t-1, the most recent past observation at the
    same hour-of-day is used; sensors with no prior same-hour observation get
    the dataset-wide mean. Frame 0 gets the dataset-wide mean (no prior hour).
    """
    if ds.stats is not None:
        raise SchemaError("fill_prev_no2 expects an unstandardized dataset")
    observed = ds.targets[ds.present]
    observed = observed[np.isfinite(observed)]
    fallback_mean = float(observed.mean()) if observed.size else 0.0

    T, n = ds.targets.shape
    ar_col = ds.schema.prev_no2_index
    features = ds.features.copy()
    features[0, :, ar_col] = fallback_mean
    # last_by_hour[h, s]: most recent observed NO2 at hour-of-day h, strictly
    # before the frame currently being consulted.
    last_by_hour = np.full((24, n), np.nan)
    for t in range(1, T):
        h = ds.timestamp(t - 1).hour
        prev = np.where(ds.present[t - 1], ds.targets[t - 1], last_by_hour[h])
        prev = np.where(np.isfinite(prev), prev, fallback_mean)
        features[t, :, ar_col] = prev
        last_by_hour[h] = np.where(ds.present[t - 1], ds.targets[t - 1], last_by_hour[h])
    return replace(ds, features=features)


def _local_plane(origin_lat: float, origin_lon: float, lat: float, lon: float):
    # Equirectangular projection around the query point; good to well under
    # 1% at the few-km scales dist-to-road operates on.
    x = math.radians(lon - origin_lon) * math.cos(math.radians(origin_lat)) * EARTH_RADIUS_M
    y = math.radians(lat - origin_lat) * EARTH_RADIUS_M
    return x, y


def _point_segment_distance(px, py, ax, ay, bx, by) -> float:
    vx, vy = bx - ax, by - ay
    wx, wy = px - ax, py - ay
    seg_len2 = vx * vx + vy * vy
    if seg_len2 == 0.0:
        return math.hypot(wx, wy)
    u = max(0.0, min(1.0, (wx * vx + wy * vy) / seg_len2))
    return math.hypot(px - (ax + u * vx), py - (ay + u * vy))


def distance_to_road(loc: SensorLocation, roads: Iterable[Sequence[tuple[float, float]]]) -> float:
    """Minimum distance in meters from a sensor to any road polyline."""
    roads = list(roads)
    if not roads:
        raise SchemaError("empty road list")
    px, py = 0.0, 0.0
    best = math.inf
    for polyline in roads:
        if len(polyline) < 2:
            raise SchemaError("road polyline needs at least 2 vertices")
        pts = [_local_plane(loc.lat, loc.lon, lat, lon) for lat, lon in polyline]
        for (ax, ay), (bx, by) in zip(pts, pts[1:]):
            best = min(best, _point_segment_distance(px, py, ax, ay, bx, by))
    return best
