"""Trajectory and case-registry ingest; dwell segments and day bucketing."""

from __future__ import annotations
import datetime as _dt
import io
import logging
from pathlib import Path
from typing import Any, BinaryIO, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import IngestError
from .models import (
    CONFIRMED, LABELS, NORMAL,
    CaseEntry, CaseRegistry, DayClock, DwellSegment,
    TrajectoryBatch, TrajectoryRecord,
)

log = logging.getLogger(__name__)

TRAJECTORY_COLUMNS: Tuple[str, ...] = (
    "user_id", "district_id", "lac_id", "cell_id", "lat", "lng", "timestamp",
)
REGISTRY_COLUMNS: Tuple[str, ...] = ("user_id", "label", "confirmed_date", "recovery_days")

Source = Union[str, Path, bytes, BinaryIO, io.StringIO]


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, (str, Path)):
        try:
            return Path(source).read_bytes()
        except OSError as exc:
            raise IngestError(f"cannot read {source}: {exc}") from exc
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    data = source.read()
    return data.encode("utf-8") if isinstance(data, str) else data


def _check_header(data: bytes, columns: Sequence[str], what: str) -> List[str]:
    first = data.split(b"\n", 1)[0].decode("utf-8-sig").strip()
    found = [c.strip() for c in first.split(",")] if first else []
    if found != list(columns):
        raise IngestError(f"{what}: missing or unexpected header {first!r}; expected {','.join(columns)}")
    return found


def _count_data_lines(data: bytes) -> int:
    return sum(1 for line in data.splitlines()[1:] if line.strip())


def _read_frame(data: bytes, columns: Sequence[str]) -> pd.DataFrame:
    frame = pd.read_csv(
        io.BytesIO(data),
        dtype=str,
        keep_default_na=False,
        on_bad_lines="skip",
        skip_blank_lines=True,
        encoding="utf-8-sig",
    )
    return frame.reindex(columns=list(columns)).fillna("")


def _exact_floats(values: Iterable[str], count: int) -> np.ndarray:
    # Python's float() is correctly rounded, so repr() output round-trips.
    return np.fromiter((float(v) for v in values), dtype=np.float64, count=count)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def _row_mask(frame: pd.DataFrame) -> Tuple[pd.Series, pd.Series]:
    """Rows passing the trajectory checks, and the numeric timestamps."""
    lat = pd.to_numeric(frame["lat"], errors="coerce")
    lng = pd.to_numeric(frame["lng"], errors="coerce")
    ts = pd.to_numeric(frame["timestamp"], errors="coerce")
    ok = (
        lat.between(-90.0, 90.0)
        & lng.between(-180.0, 180.0)
        & ts.notna()
        & np.isfinite(ts)
        & (ts >= 0)
        & (ts == np.floor(ts))
    )
    for name in ("user_id", "district_id", "lac_id", "cell_id"):
        ok &= frame[name].astype(str).str.len() > 0
    return ok, ts


def validate_records(records: Sequence[TrajectoryRecord]) -> None:
    """Apply the file-row checks to records built elsewhere.

    Raises:
        IngestError: any record would have been rejected by `parse_trajectories`.
    """
    if not records:
        return
    ok, _ = _row_mask(trajectories_frame(records))
    bad = np.flatnonzero(~ok.to_numpy(dtype=bool))
    if bad.size:
        first = records[int(bad[0])]
        raise IngestError(f"{bad.size} invalid trajectory records; first is user {first.user_id!r} "
                          f"at {first.timestamp} ({first.lat}, {first.lng})")


def records_from_items(items: Any) -> List[TrajectoryRecord]:
    """Trajectory records from JSON objects, checked like file rows."""
    if not isinstance(items, list):
        raise IngestError("records must be a list of objects")
    records: List[TrajectoryRecord] = []
    for i, item in enumerate(items):
        if not isinstance(item, Mapping):
            raise IngestError(f"record {i} is not an object")
        try:
            timestamp = float(item["timestamp"])
            if not timestamp.is_integer():
                raise ValueError(f"timestamp {item['timestamp']!r} is not a whole second")
            records.append(TrajectoryRecord(
                user_id=str(item.get("user_id", "anonymous")),
                district_id=str(item["district_id"]),
                lac_id=str(item["lac_id"]),
                cell_id=str(item["cell_id"]),
                lat=float(item["lat"]),
                lng=float(item["lng"]),
                timestamp=int(timestamp),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"record {i}: invalid or missing field {exc}") from exc
    validate_records(records)
    return records


def parse_trajectories(
    source: Source,
    columns: Sequence[str] = TRAJECTORY_COLUMNS,
) -> TrajectoryBatch:
    """Parse header-bearing comma-separated trajectory rows.

    Rows with out-of-range coordinates, a non-integer or negative timestamp,
    an empty identifier or the wrong number of fields are rejected and
    counted. Accepted records come back sorted by user, then timestamp.

    Raises:
        IngestError: the header is missing or does not match `columns`.
    """
    data = _read_bytes(source)
    _check_header(data, columns, "trajectories")
    rows_read = _count_data_lines(data)
    frame = _read_frame(data, columns)
    ok, ts = _row_mask(frame)

    good = frame.loc[ok, ["user_id", "district_id", "lac_id", "cell_id"]].copy()
    n = len(good)
    good["lat"] = _exact_floats(frame.loc[ok, "lat"], n)
    good["lng"] = _exact_floats(frame.loc[ok, "lng"], n)
    good["timestamp"] = ts[ok].astype(np.int64).to_numpy()
    good["cell_key"] = good["district_id"] + "|" + good["lac_id"] + "|" + good["cell_id"]
    good = good.sort_values(["user_id", "timestamp", "cell_key"], kind="mergesort")

    records = [
        TrajectoryRecord(u, d, l, c, float(la), float(ln), int(t))
        for u, d, l, c, la, ln, t in zip(
            good["user_id"].tolist(), good["district_id"].tolist(), good["lac_id"].tolist(),
            good["cell_id"].tolist(), good["lat"].tolist(), good["lng"].tolist(),
            good["timestamp"].tolist(),
        )
    ]
    rejected = rows_read - n
    batch = TrajectoryBatch(records=records, rows_read=rows_read, rejected=rejected)
    log.info(f"Parsed {n} trajectory records for {good['user_id'].nunique()} users")
    if rejected:
        log.warning(f"Rejected {rejected} malformed trajectory rows")
    return batch


def trajectories_frame(records: Iterable[TrajectoryRecord]) -> pd.DataFrame:
    rows = [
        (r.user_id, r.district_id, r.lac_id, r.cell_id, r.lat, r.lng, r.timestamp)
        for r in records
    ]
    return pd.DataFrame(rows, columns=list(TRAJECTORY_COLUMNS))


def write_trajectories(records: Union[Iterable[TrajectoryRecord], pd.DataFrame], dest: Union[str, Path, io.StringIO]) -> None:
    frame = records if isinstance(records, pd.DataFrame) else trajectories_frame(records)
    frame.to_csv(dest, index=False, columns=list(TRAJECTORY_COLUMNS), lineterminator="\n")


def cell_table(records: Iterable[TrajectoryRecord]) -> Dict[str, Tuple[float, float]]:
    """cell_key -> (lat, lng), first coordinates seen, keys sorted."""
    cells: Dict[str, Tuple[float, float]] = {}
    for rec in records:
        key = rec.cell_key
        if key not in cells:
            cells[key] = (rec.lat, rec.lng)
    return {k: cells[k] for k in sorted(cells)}


# ---------------------------------------------------------------------------
# Case registry
# ---------------------------------------------------------------------------

def parse_registry(source: Source, clock: DayClock) -> CaseRegistry:
    """Parse "user_id,label,confirmed_date,recovery_days" rows.

    The recovery_days column may be omitted from the header entirely.
    """
    data = _read_bytes(source)
    try:
        _check_header(data, REGISTRY_COLUMNS, "registry")
    except IngestError:
        _check_header(data, REGISTRY_COLUMNS[:3], "registry")
    rows_read = _count_data_lines(data)
    frame = _read_frame(data, REGISTRY_COLUMNS)

    registry = CaseRegistry()
    for user_id, label, date_text, recovery_text in frame.itertuples(index=False, name=None):
        entry = _registry_entry(user_id.strip(), label.strip().lower(), date_text.strip(),
                                recovery_text.strip(), clock)
        if entry is None or entry.user_id in registry.entries:
            continue
        registry.add(entry)

    registry.rejected = rows_read - len(registry)
    log.info(f"Parsed registry: {len(registry.confirmed())} confirmed, {len(registry.normals())} normal")
    if registry.rejected:
        log.warning(f"Rejected {registry.rejected} malformed or duplicate registry rows")
    return registry


def _registry_entry(user_id: str, label: str, date_text: str, recovery_text: str,
                    clock: DayClock) -> Optional[CaseEntry]:
    if not user_id or label not in LABELS:
        return None
    recovery: Optional[int] = None
    if recovery_text:
        try:
            recovery = int(recovery_text)
        except ValueError:
            return None
        if recovery <= 0:
            return None
    if label == NORMAL:
        if date_text:
            return None
        return CaseEntry(user_id, NORMAL, None, recovery)
    try:
        day = clock.day_of_date(_dt.date.fromisoformat(date_text))
    except ValueError:
        return None
    return CaseEntry(user_id, CONFIRMED, day, recovery)


def write_registry(registry: CaseRegistry, dest: Union[str, Path, io.StringIO], clock: DayClock) -> None:
    rows = [
        (
            e.user_id,
            e.label,
            clock.date_of(e.confirmed_day).isoformat() if e.confirmed_day is not None else "",
            "" if e.recovery_days is None else str(e.recovery_days),
        )
        for e in registry
    ]
    frame = pd.DataFrame(rows, columns=list(REGISTRY_COLUMNS))
    frame.to_csv(dest, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# Dwell segments
# ---------------------------------------------------------------------------

def build_dwell_segments(
    records: Sequence[TrajectoryRecord],
    window_end: Optional[int] = None,
    terminal_dwell_s: int = 3600,
) -> List[DwellSegment]:
    """Turn one user's records into time-ordered, non-overlapping stays.

    Record i covers [t_i, t_{i+1}); the last record covers
    min(terminal_dwell_s, window_end - t_last). Consecutive stays in the
    same cell merge and zero-length stays are dropped.
    """
    if not records:
        return []
    ordered = sorted(records, key=lambda r: (r.timestamp, r.cell_key))
    user_id = ordered[0].user_id
    n = len(ordered)
    segments: List[DwellSegment] = []
    current: Optional[list] = None  # [cell_key, lat, lng, start, end]

    for idx, rec in enumerate(ordered):
        if idx + 1 < n:
            end = ordered[idx + 1].timestamp
        else:
            end = rec.timestamp + terminal_dwell_s
            if window_end is not None:
                end = min(end, window_end)
        if end <= rec.timestamp:
            continue
        key = rec.cell_key
        if current is not None and current[0] == key and current[4] == rec.timestamp:
            current[4] = end
            continue
        if current is not None:
            segments.append(DwellSegment(user_id, *current))
        current = [key, rec.lat, rec.lng, rec.timestamp, end]

    if current is not None:
        segments.append(DwellSegment(user_id, *current))
    return segments


def corpus_window_end(batch: TrajectoryBatch, clock: DayClock) -> Optional[int]:
    """End of the local day holding the latest observation."""
    if not batch.records:
        return None
    latest = max(r.timestamp for r in batch.records)
    return clock.day_start(clock.day_of(latest) + 1)


def segments_by_user(
    batch: TrajectoryBatch,
    clock: DayClock,
    terminal_dwell_s: int = 3600,
    window_end: Optional[int] = None,
) -> Dict[str, List[DwellSegment]]:
    if window_end is None:
        window_end = corpus_window_end(batch, clock)
    return {
        user_id: build_dwell_segments(records, window_end, terminal_dwell_s)
        for user_id, records in batch.by_user().items()
    }


def split_at_midnight(segments: Iterable[DwellSegment], clock: DayClock) -> List[DwellSegment]:
    """Split stays at local-day boundaries so every piece lies in one day."""
    pieces: List[DwellSegment] = []
    for seg in segments:
        start = seg.start
        while start < seg.end:
            boundary = clock.day_start(clock.day_of(start) + 1)
            stop = min(boundary, seg.end)
            pieces.append(DwellSegment(seg.user_id, seg.cell_key, seg.lat, seg.lng, start, stop))
            start = stop
    return pieces
