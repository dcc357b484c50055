"""CSV parsing, cleaning, windowing, splitting, and normalization for GPS traces."""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import IO, Iterable, Optional, Sequence, Union

import numpy as np

from . import geo
from .domain import Block, FeatureTuple, GpsRecord, LabeledTuple, ScalerParams

Record = GpsRecord
LabeledRecord = tuple  # (GpsRecord, int)

# Accepted header spellings, normalized to lower case without separators.
_COLUMN_ALIASES = {
    "latitude": "latitude", "lat": "latitude",
    "longitude": "longitude", "lon": "longitude", "lng": "longitude",
    "speed": "speed",
    "unitid": "unit_id", "unit": "unit_id",
    "time": "time", "timestamp": "time", "datetime": "time",
    "isstop": "is_stop",
}
_REQUIRED = ("latitude", "longitude", "speed", "unit_id", "time")
_TIME_FORMATS = ("%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M.%S")


@dataclass(frozen=True)
class CleaningReport:
    """Row accounting for a parse or clean pass."""

    rows_read: int
    rows_kept: int
    removed_zero_speed_moving: int = 0
    removed_duplicates: int = 0
    removed_malformed: int = 0

    def __post_init__(self) -> None:
        removed = (self.removed_zero_speed_moving + self.removed_duplicates
                   + self.removed_malformed)
        if self.rows_read != self.rows_kept + removed:
            raise ValueError("cleaning report does not balance: "
                             f"{self.rows_read} read != {self.rows_kept} kept "
                             f"+ {removed} removed")

    def to_text(self) -> str:
        return "".join(f"{name}={getattr(self, name)}\n" for name in (
            "rows_read", "rows_kept", "removed_zero_speed_moving",
            "removed_duplicates", "removed_malformed"))


@dataclass(frozen=True)
class WindowConfig:
    """Windowing parameters: block length k, stride, and gap tolerance."""

    k: int = 10
    stride: Optional[int] = None  # defaults to k (non-overlapping)
    max_gap: float = 120.0  # seconds

    def __post_init__(self) -> None:
        if self.k < 3:
            raise ValueError(f"k must be >= 3, got {self.k}")
        if self.stride is None:
            object.__setattr__(self, "stride", self.k)
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not self.max_gap > 0:
            raise ValueError(f"max_gap must be positive, got {self.max_gap}")


@dataclass(frozen=True)
class SplitRatios:
    """Train/validation/test fractions."""

    train: float = 0.6
    validation: float = 0.2
    test: float = 0.2

    def __post_init__(self) -> None:
        for name in ("train", "validation", "test"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} ratio must be in (0,1), got {value}")
        total = self.train + self.validation + self.test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {total}")


def _parse_timestamp(text: str) -> datetime:
    # Collapse duplicated whitespace (the raw exports contain double spaces).
    text = " ".join(text.split())
    for fmt in _TIME_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparseable time: {text!r}")


def _open_text(source: Union[IO, str, Path]) -> IO:
    if isinstance(source, (str, Path)):
        return open(source, encoding="utf-8", newline="")
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8"))
    if hasattr(source, "read"):
        probe = source.read(0)
        if isinstance(probe, bytes):
            return io.TextIOWrapper(source, encoding="utf-8", newline="")
        return source
    raise TypeError(f"expected a path, stream or bytes, "
                    f"got {type(source).__name__}")


def _normalize_header(fieldnames: Sequence[str]) -> dict:
    mapping = {}
    for raw in fieldnames or ():
        key = "".join(ch for ch in raw.strip().lower() if ch.isalnum())
        canonical = _COLUMN_ALIASES.get(key)
        if canonical is not None and canonical not in mapping:
            mapping[canonical] = raw
    missing = [name for name in _REQUIRED if name not in mapping]
    if missing:
        raise ValueError(f"missing required column: {', '.join(missing)}")
    return mapping


def _parse(source, want_flags: bool):
    stream = _open_text(source)
    owns_stream = stream is not source
    reader = csv.DictReader(stream)
    mapping = _normalize_header(reader.fieldnames)
    has_flags = want_flags and "is_stop" in mapping
    records = []
    flags = []
    rows_read = 0
    malformed = 0
    for row in reader:
        rows_read += 1
        try:
            record = GpsRecord(
                latitude=float(row[mapping["latitude"]]),
                longitude=float(row[mapping["longitude"]]),
                speed=float(row[mapping["speed"]]),
                unit_id=row[mapping["unit_id"]].strip(),
                timestamp=_parse_timestamp(row[mapping["time"]]),
            )
            if has_flags:
                flag = int(row[mapping["is_stop"]])
                if flag not in (0, 1):
                    raise ValueError(f"bad is_stop flag: {flag}")
            else:
                flag = 0
        except (ValueError, TypeError, KeyError):
            malformed += 1
            continue
        records.append(record)
        flags.append(flag)
    if owns_stream:
        stream.close()
    report = CleaningReport(rows_read=rows_read, rows_kept=len(records),
                            removed_malformed=malformed)
    return records, flags if has_flags else None, report


def parse_csv(source) -> tuple:
    """Parse a GPS CSV stream into records, counting malformed rows.

    The header is matched case-insensitively and order-insensitively;
    both `HH:MM:SS` and `HH:MM.SS` time-of-day spellings are accepted.
    Returns (records, CleaningReport).
    """
    records, _, report = _parse(source, want_flags=False)
    return records, report


def parse_labeled_csv(source) -> tuple:
    """Like parse_csv but also reads an `is_stop` column when present.

    Returns ((record, flag) pairs, CleaningReport). Rows without the column
    default to flag 0.
    """
    records, flags, report = _parse(source, want_flags=True)
    if flags is None:
        flags = [0] * len(records)
    return list(zip(records, flags)), report


def _sorted_by_unit_time(records: Sequence[GpsRecord]) -> list:
    key = lambda r: (r.unit_id, r.timestamp)
    for prev, cur in zip(records, records[1:]):
        if key(prev) > key(cur):
            return sorted(records, key=key)
    return list(records)


def clean(records: Sequence[GpsRecord], jitter_epsilon_m: float = 5.0) -> tuple:
    """Drop duplicate and zero-speed-while-moving records.

    Two rules, checked against the previous *kept* record of the same unit
    (which makes the pass idempotent):
      - an exact repeat of (latitude, longitude, speed) is a duplicate;
      - a record with speed 0 whose position moved more than
        `jitter_epsilon_m` meters is tracker noise.
    Returns (kept records, CleaningReport).
    """
    ordered = _sorted_by_unit_time(records)
    kept = []
    prev_by_unit: dict = {}
    duplicates = 0
    zero_speed = 0
    for record in ordered:
        prev = prev_by_unit.get(record.unit_id)
        if prev is not None:
            if (record.latitude == prev.latitude
                    and record.longitude == prev.longitude
                    and record.speed == prev.speed):
                duplicates += 1
                continue
            if record.speed == 0.0 and geo.distance_m(
                    prev.latitude, prev.longitude,
                    record.latitude, record.longitude) > jitter_epsilon_m:
                zero_speed += 1
                continue
        kept.append(record)
        prev_by_unit[record.unit_id] = record
    report = CleaningReport(rows_read=len(ordered), rows_kept=len(kept),
                            removed_zero_speed_moving=zero_speed,
                            removed_duplicates=duplicates)
    return kept, report


def _feature_columns(items: Iterable) -> tuple:
    lats, lons, sps = [], [], []
    for item in items:
        if isinstance(item, GpsRecord):
            lats.append(item.latitude)
            lons.append(item.longitude)
            sps.append(item.speed)
        elif isinstance(item, FeatureTuple):
            lats.append(item.lat)
            lons.append(item.lon)
            sps.append(item.sp)
        else:
            raise TypeError(f"cannot extract features from {type(item).__name__}")
    return np.asarray(lats), np.asarray(lons), np.asarray(sps)


def fit_scaler(records: Iterable) -> ScalerParams:
    """Per-feature min/max over the given training records (or tuples)."""
    lats, lons, sps = _feature_columns(records)
    if lats.size < 2:
        raise ValueError("degenerate scaler: need at least 2 records")
    values = {}
    for name, column in (("lat", lats), ("lon", lons), ("sp", sps)):
        lo, hi = float(np.min(column)), float(np.max(column))
        if hi <= lo:
            raise ValueError(f"degenerate scaler: {name} is constant at {lo!r}")
        values[f"{name}_min"], values[f"{name}_max"] = lo, hi
    return ScalerParams(**values)


def apply_scaler(tup: FeatureTuple, params: ScalerParams,
                 direction: str = "forward") -> FeatureTuple:
    """Min-max normalize (forward) or denormalize (inverse) one tuple."""
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    out = []
    for value, (lo, hi) in zip((tup.lat, tup.lon, tup.sp), params.bounds()):
        span = hi - lo
        out.append((value - lo) / span if direction == "forward"
                   else value * span + lo)
    return FeatureTuple(*out)


def scale_block(block: Block, params: ScalerParams,
                direction: str = "forward") -> Block:
    """Apply the scaler to every tuple of a block, label included."""
    features = tuple(apply_scaler(t, params, direction) for t in block.features)
    if isinstance(block.label, LabeledTuple):
        label = LabeledTuple(apply_scaler(block.label.tuple, params, direction),
                             block.label.is_stop)
    else:
        label = apply_scaler(block.label, params, direction)
    return Block(features=features, label=label, unit_id=block.unit_id,
                 start_time=block.start_time, end_time=block.end_time)


def window(records: Sequence, cfg: WindowConfig) -> list:
    """Cut per-unit record streams into fixed-length blocks.

    `records` holds GpsRecords, or (GpsRecord, is_stop) pairs when labels
    were injected; in the latter case block labels become LabeledTuples.
    Window starts step by `cfg.stride` within each unit's stream; a window
    is emitted only when all k records share the unit and consecutive
    timestamps increase by at most `cfg.max_gap` seconds.
    """
    pairs = []
    for item in records:
        if isinstance(item, GpsRecord):
            pairs.append((item, None))
        else:
            record, flag = item
            pairs.append((record, int(flag)))
    pairs.sort(key=lambda p: (p[0].unit_id, p[0].timestamp))

    by_unit: dict = {}
    for pair in pairs:
        by_unit.setdefault(pair[0].unit_id, []).append(pair)

    blocks = []
    k = cfg.k
    for unit_id in sorted(by_unit):
        stream = by_unit[unit_id]
        for start in range(0, len(stream) - k + 1, cfg.stride):
            chunk = stream[start:start + k]
            ok = True
            for (a, _), (b, _) in zip(chunk, chunk[1:]):
                gap = (b.timestamp - a.timestamp).total_seconds()
                if gap <= 0 or gap > cfg.max_gap:
                    ok = False
                    break
            if not ok:
                continue
            features = tuple(FeatureTuple.from_record(r) for r, _ in chunk[:-1])
            last, flag = chunk[-1]
            label = (FeatureTuple.from_record(last) if flag is None
                     else LabeledTuple(FeatureTuple.from_record(last), flag))
            blocks.append(Block(features=features, label=label, unit_id=unit_id,
                                start_time=chunk[0][0].timestamp,
                                end_time=last.timestamp))
    return blocks


def split(blocks: Sequence[Block], ratios: SplitRatios, seed: int) -> tuple:
    """Seeded shuffle then partition; floor rounding, remainder to train."""
    n = len(blocks)
    if n < 5:
        raise ValueError(f"need at least 5 blocks to split, got {n}")
    shuffled = list(blocks)
    random.Random(seed).shuffle(shuffled)
    n_train = math.floor(n * ratios.train)
    n_val = math.floor(n * ratios.validation)
    n_test = math.floor(n * ratios.test)
    n_train += n - (n_train + n_val + n_test)
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:n_train + n_val + n_test]
    return train, val, test


def inject_stop_labels(records: Sequence[GpsRecord], stops,
                       radius_m: float = 25.0) -> list:
    """Flag each record that lies within `radius_m` of any known stop."""
    if not stops:
        raise ValueError("stops must be non-empty")
    if not records:
        return []
    stop_lat = np.asarray([s.latitude for s in stops])
    stop_lon = np.asarray([s.longitude for s in stops])
    rec_lat = np.asarray([r.latitude for r in records])
    rec_lon = np.asarray([r.longitude for r in records])
    # Same equirectangular formula as geo.distance_m, broadcast over pairs.
    mean_lat = np.radians((rec_lat[:, None] + stop_lat[None, :]) / 2.0)
    dy = (stop_lat[None, :] - rec_lat[:, None]) * geo.METERS_PER_DEGREE
    dx = ((stop_lon[None, :] - rec_lon[:, None]) * geo.METERS_PER_DEGREE
          * np.cos(mean_lat))
    within = (np.hypot(dx, dy) <= radius_m).any(axis=1)
    return [(record, int(flag)) for record, flag in zip(records, within)]


def write_records_csv(stream: IO, records: Sequence, include_flags: bool = False) -> None:
    """Write records (or (record, flag) pairs) in the ingest CSV schema.

    Floats are written with repr so a parse round-trip is exact.
    """
    writer = csv.writer(stream, lineterminator="\n")
    header = ["latitude", "longitude", "speed", "unit_id", "time"]
    if include_flags:
        header.append("is_stop")
    writer.writerow(header)
    for item in records:
        if isinstance(item, GpsRecord):
            record, flag = item, None
        else:
            record, flag = item
        row = [repr(record.latitude), repr(record.longitude), repr(record.speed),
               record.unit_id, record.timestamp.strftime("%Y-%m-%d %H:%M:%S")]
        if include_flags:
            row.append(str(0 if flag is None else int(flag)))
        writer.writerow(row)
