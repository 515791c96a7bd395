"""Explicit spatiotemporal interval matrices between check-ins.

Times are hours, distances hectometers (100 m), both kept as continuous
reals.  Entries that touch a padded slot are zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

EARTH_RADIUS_KM = 6371.0088
HOURS_PER_WEEK = 168
# 1970-01-01 was a Thursday; shift so Monday 00:00 UTC is slot 0
_EPOCH_WEEK_OFFSET_H = 72


@dataclass
class RelationMatrices:
    delta_t: np.ndarray
    delta_s: np.ndarray
    valid_len: int


@dataclass
class CandidateRelation:
    n_t: np.ndarray
    n_s: np.ndarray
    valid_len: int


@dataclass(frozen=True)
class IntervalBounds:
    t_min: float
    t_max: float
    s_min: float
    s_max: float

    def __post_init__(self):
        if not (0 <= self.t_min <= self.t_max and 0 <= self.s_min <= self.s_max):
            raise ValueError(f"inconsistent interval bounds {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.t_min, self.t_max, self.s_min, self.s_max])

    @classmethod
    def from_array(cls, arr) -> IntervalBounds:
        t0, t1, s0, s1 = (float(v) for v in np.asarray(arr).reshape(4))
        return cls(t0, t1, s0, s1)

    def merge(self, other: IntervalBounds) -> IntervalBounds:
        return IntervalBounds(
            min(self.t_min, other.t_min),
            max(self.t_max, other.t_max),
            min(self.s_min, other.s_min),
            max(self.s_max, other.s_max),
        )


def haversine(a, b) -> np.ndarray | float:
    """Great-circle distance in hectometers between ``(lat, lon)`` points.

    Accepts single pairs or broadcastable arrays whose last axis is
    ``(lat, lon)`` in degrees.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lat1, lon1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lat2, lon2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    # clip guards asin against h creeping past 1 at antipodes
    d = 2.0 * EARTH_RADIUS_KM * 10.0 * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def hour_of_week(timestamp) -> np.ndarray | int:
    """Slot in ``[0, 168)`` counted from Monday 00:00 UTC."""
    ts = np.asarray(timestamp)
    slot = (np.floor_divide(ts.astype(np.int64), 3600) + _EPOCH_WEEK_OFFSET_H) % HOURS_PER_WEEK
    return int(slot) if slot.ndim == 0 else slot


def _valid_mask(valid_len, n: int) -> np.ndarray:
    return np.arange(n) < np.asarray(valid_len)[..., None]


def pairwise_relation(times, gps, valid_len) -> tuple[np.ndarray, np.ndarray]:
    """Batched interval matrices: ``times (..., n)`` seconds, ``gps (..., n, 2)``."""
    times = np.asarray(times, dtype=np.float64)
    gps = np.asarray(gps, dtype=np.float64)
    valid = _valid_mask(valid_len, times.shape[-1])
    pair = valid[..., :, None] & valid[..., None, :]
    dt = np.abs(times[..., :, None] - times[..., None, :]) / 3600.0
    ds = haversine(gps[..., :, None, :], gps[..., None, :, :])
    return np.where(pair, dt, 0.0), np.where(pair, ds, 0.0)


def candidate_intervals(target_time, times, cand_gps, gps, valid_len) -> tuple[np.ndarray, np.ndarray]:
    """Batched candidate matrices.

    Returns ``n_t`` with a singleton candidate axis ``(..., 1, n)`` since it
    does not depend on the candidate, and ``n_s`` of shape ``(..., L, n)``.
    """
    times = np.asarray(times, dtype=np.float64)
    valid = _valid_mask(valid_len, times.shape[-1])
    tt = np.asarray(target_time, dtype=np.float64)[..., None]
    n_t = np.where(valid, np.abs(tt - times) / 3600.0, 0.0)[..., None, :]
    gps = np.asarray(gps, dtype=np.float64)
    cand_gps = np.asarray(cand_gps, dtype=np.float64)
    n_s = haversine(cand_gps[..., :, None, :], gps[..., None, :, :])
    return n_t, np.where(valid[..., None, :], n_s, 0.0)


def trajectory_relation(seq) -> RelationMatrices:
    dt, ds = pairwise_relation(seq.timestamps, seq.gps, seq.valid_len)
    return RelationMatrices(dt, ds, int(seq.valid_len))


def candidate_relation(candidates: Mapping[int, tuple[float, float]], seq, target_time) -> CandidateRelation:
    """Intervals between every candidate (ordered by id) and each check-in."""
    ids = sorted(candidates)
    if ids != list(range(1, len(ids) + 1)):
        missing = sorted(set(range(1, max(ids, default=0) + 1)) - set(ids))
        raise KeyError(f"candidate ids must be 1..L without gaps; missing {missing[:5]}")
    cand_gps = np.array([candidates[i] for i in ids], dtype=np.float64)
    n_t, n_s = candidate_intervals(target_time, seq.timestamps, cand_gps, seq.gps, seq.valid_len)
    n_t = np.broadcast_to(n_t, n_s.shape).copy()
    return CandidateRelation(n_t, n_s, int(seq.valid_len))


def interval_bounds(sequences: Iterable) -> IntervalBounds:
    """Global min/max of Δt and Δs over the valid region of every sequence."""
    bounds = None
    for seq in sequences:
        if seq.valid_len < 2:
            continue
        rel = trajectory_relation(seq)
        m = seq.valid_len
        t = rel.delta_t[:m, :m]
        s = rel.delta_s[:m, :m]
        b = IntervalBounds(float(t.min()), float(t.max()), float(s.min()), float(s.max()))
        bounds = b if bounds is None else bounds.merge(b)
    if bounds is None:
        raise ValueError("no sequence with two valid check-ins; interval bounds undefined")
    return bounds


def windowed_bounds(times: list[np.ndarray], gps: list[np.ndarray], n: int) -> IntervalBounds:
    """Same result as :func:`interval_bounds` over every training prefix.

    ``times[u]``/``gps[u]`` hold the check-ins a user's training prefixes
    draw from.  Truncated prefixes only pair check-ins fewer than ``n``
    apart, so scanning those offsets covers every matrix without building it.
    """
    t_max, s_max, seen = 0.0, 0.0, False
    for t, g in zip(times, gps):
        m = len(t)
        if m < 2:
            continue
        seen = True
        for k in range(1, min(n, m)):
            t_max = max(t_max, float(np.max(np.abs(t[k:] - t[:-k]))) / 3600.0)
            s_max = max(s_max, float(np.max(haversine(g[k:], g[:-k]))))
    if not seen:
        raise ValueError("no sequence with two valid check-ins; interval bounds undefined")
    # diagonal entries are zero, so the minima are always zero
    return IntervalBounds(0.0, t_max, 0.0, s_max)
