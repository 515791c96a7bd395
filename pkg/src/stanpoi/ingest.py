"""Check-in parsing, per-user splitting and fixed-length padding.

Users and locations are re-indexed densely from 1 in order of first
appearance; index 0 is the padding id.  Each user with ``m`` check-ins
yields ``m - 3`` training prefixes, one validation and one test example.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from . import tensor

log = logging.getLogger(__name__)

MIN_CHECKINS = 5
DEFAULT_FORMAT = "user,location,lat,lon,time"
# layout of the public TSMC2014 Foursquare dumps (NYC / TKY)
TSMC_FORMAT = "user,location,_,_,lat,lon,_,time"
_FIELD_ALIASES = {"venue": "location", "poi": "location", "latitude": "lat", "longitude": "lon", "timestamp": "time"}
_REQUIRED = ("user", "location", "lat", "lon", "time")


@dataclass(frozen=True)
class CheckIn:
    user_id: int
    location_id: int
    timestamp: int
    gps: tuple[float, float]


@dataclass
class TrajectorySequence:
    """One padded input sequence plus its label.

    Arrays have length ``n``; slots at and beyond ``valid_len`` are zero.
    """

    user_id: int
    locations: np.ndarray
    timestamps: np.ndarray
    gps: np.ndarray
    valid_len: int
    label_location: int = 0
    label_time: int = 0

    @property
    def n(self) -> int:
        return len(self.locations)


@dataclass
class DatasetStats:
    num_users: int
    num_locations: int
    num_checkins: int
    location_gps: dict[int, tuple[float, float]] = field(repr=False)
    skipped_lines: int = 0
    gps_conflicts: int = 0

    def summary(self) -> dict:
        return {
            "num_users": self.num_users,
            "num_locations": self.num_locations,
            "num_checkins": self.num_checkins,
            "skipped_lines": self.skipped_lines,
            "gps_conflicts": self.gps_conflicts,
        }


class IngestError(ValueError):
    pass


def parse_format(descriptor: str) -> list[str]:
    fields = [_FIELD_ALIASES.get(f.strip().lower(), f.strip().lower()) for f in descriptor.split(",")]
    for name in _REQUIRED:
        if fields.count(name) != 1:
            raise IngestError(f"format {descriptor!r} must name {name!r} exactly once")
    return fields


def parse_timestamp(text: str) -> int:
    """Epoch seconds from an integer, an ISO-8601 string, or the TSMC layout.

    Strings without an offset are taken as UTC.
    """
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        dt = datetime.strptime(text, "%a %b %d %H:%M:%S %z %Y")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_checkins(
    source: TextIO | Iterable[str] | str | Path,
    format: str = DEFAULT_FORMAT,
    delimiter: str = "\t",
) -> tuple[dict[int, list[CheckIn]], DatasetStats, list[str], list[str]]:
    """Read raw check-in lines.

    Returns per-user check-in lists sorted by time (stable), dataset stats,
    and the raw user and location keys, where key ``i`` maps to id ``i + 1``.
    """
    fields = parse_format(format)
    pos = {name: fields.index(name) for name in _REQUIRED}
    width = len(fields)
    if isinstance(source, (str, Path)):
        try:
            fh: Iterable[str] = open(source, encoding="utf-8", errors="replace")
        except OSError as exc:
            raise IngestError(f"cannot read {source}: {exc}") from exc
    else:
        fh = source

    users: dict[str, int] = {}
    locs: dict[str, int] = {}
    gps: dict[int, tuple[float, float]] = {}
    per_user: dict[int, list[CheckIn]] = {}
    skipped = conflicts = total = 0
    try:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(delimiter)
            if len(parts) < width:
                skipped += 1
                continue
            try:
                lat = float(parts[pos["lat"]])
                lon = float(parts[pos["lon"]])
                ts = parse_timestamp(parts[pos["time"]])
            except ValueError:
                skipped += 1
                continue
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                skipped += 1
                continue
            ukey, lkey = parts[pos["user"]].strip(), parts[pos["location"]].strip()
            if not ukey or not lkey:
                skipped += 1
                continue
            uid = users.setdefault(ukey, len(users) + 1)
            lid = locs.setdefault(lkey, len(locs) + 1)
            if lid not in gps:
                gps[lid] = (lat, lon)
            elif gps[lid] != (lat, lon):
                conflicts += 1
            per_user.setdefault(uid, []).append(CheckIn(uid, lid, ts, gps[lid]))
            total += 1
    finally:
        if isinstance(source, (str, Path)):
            fh.close()

    if total == 0:
        raise IngestError("no valid records")
    if conflicts:
        log.warning("%d check-ins gave a different GPS for a known location; kept the first", conflicts)
    if skipped:
        log.info("skipped %d malformed lines", skipped)
    for lst in per_user.values():
        lst.sort(key=lambda c: c.timestamp)
    stats = DatasetStats(len(users), len(locs), total, gps, skipped, conflicts)
    return per_user, stats, list(users), list(locs)


def pad_truncate(checkins: list[CheckIn], n: int, user_id: int | None = None) -> TrajectorySequence:
    """Keep the most recent ``n`` check-ins and zero-pad on the right."""
    if n < 1:
        raise ValueError("n must be >= 1")
    kept = checkins[-n:] if len(checkins) > n else checkins
    m = len(kept)
    locations = np.zeros(n, dtype=np.int64)
    timestamps = np.zeros(n, dtype=np.int64)
    gps = np.zeros((n, 2), dtype=np.float64)
    for i, c in enumerate(kept):
        locations[i] = c.location_id
        timestamps[i] = c.timestamp
        gps[i] = c.gps
    if user_id is None:
        user_id = kept[0].user_id if kept else 0
    return TrajectorySequence(user_id, locations, timestamps, gps, m)


def _labelled(checkins: list[CheckIn], prefix: int, n: int) -> TrajectorySequence:
    seq = pad_truncate(checkins[:prefix], n, checkins[0].user_id)
    seq.label_location = checkins[prefix].location_id
    seq.label_time = checkins[prefix].timestamp
    return seq


def split_user(trajectory: list[CheckIn], n: int):
    """Train prefixes ``1..m-3``, validation prefix ``m-2``, test prefix ``m-1``.

    Returns ``None`` for users with fewer than five check-ins.
    """
    m = len(trajectory)
    if m < MIN_CHECKINS:
        return None
    train = [_labelled(trajectory, k, n) for k in range(1, m - 2)]
    return train, _labelled(trajectory, m - 2, n), _labelled(trajectory, m - 1, n)


# -- compact dataset ----------------------------------------------------------------


@dataclass
class Dataset:
    """All users' trajectories plus the split, stored as prefix lengths.

    Example ``(u, k)`` feeds the first ``k`` check-ins of user ``u`` and
    labels it with check-in ``k`` (0-based).
    """

    stats: DatasetStats
    user_keys: list[str]
    location_keys: list[str]
    location_gps: np.ndarray
    traj_locations: list[np.ndarray]
    traj_times: list[np.ndarray]
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    dropped_users: int = 0

    @property
    def num_locations(self) -> int:
        return len(self.location_keys)

    @property
    def num_users(self) -> int:
        return len(self.user_keys)

    def sequence(self, user: int, prefix: int, n: int) -> TrajectorySequence:
        locs = self.traj_locations[user][:prefix][-n:]
        times = self.traj_times[user][:prefix][-n:]
        m = len(locs)
        seq = TrajectorySequence(
            user,
            np.pad(locs, (0, n - m)),
            np.pad(times, (0, n - m)),
            np.pad(self.location_gps[locs], ((0, n - m), (0, 0))),
            m,
        )
        seq.label_location = int(self.traj_locations[user][prefix])
        seq.label_time = int(self.traj_times[user][prefix])
        return seq

    def sequences(self, split: str, n: int) -> list[TrajectorySequence]:
        return [self.sequence(int(u), int(k), n) for u, k in getattr(self, split)]

    def candidates(self) -> dict[int, tuple[float, float]]:
        return {i: tuple(self.location_gps[i]) for i in range(1, self.num_locations + 1)}


def build_dataset(
    per_user: dict[int, list[CheckIn]],
    stats: DatasetStats,
    user_keys: list[str],
    location_keys: list[str],
) -> Dataset:
    gps = np.zeros((len(location_keys) + 1, 2))
    for lid, (lat, lon) in stats.location_gps.items():
        gps[lid] = (lat, lon)
    traj_locs = [np.zeros(0, dtype=np.int64)]
    traj_times = [np.zeros(0, dtype=np.int64)]
    train, val, test = [], [], []
    dropped = 0
    for uid in range(1, len(user_keys) + 1):
        checkins = per_user.get(uid, [])
        traj_locs.append(np.array([c.location_id for c in checkins], dtype=np.int64))
        traj_times.append(np.array([c.timestamp for c in checkins], dtype=np.int64))
        m = len(checkins)
        if m < MIN_CHECKINS:
            dropped += 1
            continue
        train.extend((uid, k) for k in range(1, m - 2))
        val.append((uid, m - 2))
        test.append((uid, m - 1))
    if dropped:
        log.info("dropped %d users with fewer than %d check-ins", dropped, MIN_CHECKINS)
    as_arr = lambda rows: np.array(rows, dtype=np.int64).reshape(-1, 2)
    return Dataset(
        stats, list(user_keys), list(location_keys), gps, traj_locs, traj_times,
        as_arr(train), as_arr(val), as_arr(test), dropped,
    )


def load_raw(path, format: str = DEFAULT_FORMAT, delimiter: str = "\t") -> Dataset:
    per_user, stats, ukeys, lkeys = parse_checkins(path, format, delimiter)
    return build_dataset(per_user, stats, ukeys, lkeys)


def from_text(text: str, format: str = DEFAULT_FORMAT, delimiter: str = "\t") -> Dataset:
    per_user, stats, ukeys, lkeys = parse_checkins(io.StringIO(text), format, delimiter)
    return build_dataset(per_user, stats, ukeys, lkeys)


_DS_MAGIC = b"STANDSET"
_DS_VERSION = 1


def save_dataset(ds: Dataset, path) -> None:
    """Binary container: magic, version, JSON header, then named arrays."""
    offsets = np.cumsum([0] + [len(t) for t in ds.traj_locations])
    header = {
        "stats": ds.stats.summary(),
        "dropped_users": ds.dropped_users,
        "user_keys": ds.user_keys,
        "location_keys": ds.location_keys,
    }
    arrays = {
        "location_gps": ds.location_gps,
        "traj_offsets": offsets,
        "traj_locations": np.concatenate(ds.traj_locations),
        "traj_times": np.concatenate(ds.traj_times),
        "train": ds.train,
        "val": ds.val,
        "test": ds.test,
    }
    raw = json.dumps(header).encode("utf-8")
    # timestamps up to 2**53 survive the float64 container exactly
    blob = _DS_MAGIC + struct.pack("<IQ", _DS_VERSION, len(raw)) + raw + tensor.dump_arrays(arrays)
    Path(path).write_bytes(blob)


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != _DS_MAGIC:
        raise IngestError(f"{path}: not a dataset file")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != _DS_VERSION:
        raise IngestError(f"{path}: unsupported dataset version {version}")
    start = 20
    header = json.loads(buf[start : start + hlen].decode("utf-8"))
    arrays = tensor.parse_arrays(buf[start + hlen :], str(path))
    offsets = arrays["traj_offsets"].astype(np.int64)
    locs = arrays["traj_locations"].astype(np.int64)
    times = arrays["traj_times"].astype(np.int64)
    traj_locs = [locs[a:b] for a, b in zip(offsets[:-1], offsets[1:])]
    traj_times = [times[a:b] for a, b in zip(offsets[:-1], offsets[1:])]
    gps_arr = arrays["location_gps"]
    s = header["stats"]
    stats = DatasetStats(
        s["num_users"], s["num_locations"], s["num_checkins"],
        {i: (float(gps_arr[i, 0]), float(gps_arr[i, 1])) for i in range(1, len(gps_arr))},
        s["skipped_lines"], s["gps_conflicts"],
    )
    as_pairs = lambda a: a.astype(np.int64).reshape(-1, 2)
    return Dataset(
        stats, header["user_keys"], header["location_keys"], gps_arr, traj_locs, traj_times,
        as_pairs(arrays["train"]), as_pairs(arrays["val"]), as_pairs(arrays["test"]),
        header["dropped_users"],
    )
