"""Synthetic check-ins with a planted weekly routine and its exact oracle.

Every user repeats one week::

    Mon 08h home    Tue 10h work    Thu 10h work    Fri 19h fixed restaurant near work
    Sat 11h mall    Sat 19h random restaurant near that mall    Sun 22h home

Any visit is replaced, with probability ``noise_rate``, by a location drawn
uniformly from the whole vocabulary.  The work and mall districts sit far
apart, so the Friday and Saturday restaurants are linked by time and
routine rather than by proximity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import NamedTuple, Sequence

import numpy as np

from .relation import haversine, hour_of_week

WEEK_S = 7 * 24 * 3600
# (hour-of-week slot, visit kind), Monday 00:00 = slot 0
TEMPLATE: tuple[tuple[int, str], ...] = (
    (8, "home"),
    (34, "work"),
    (82, "work"),
    (115, "friday_dinner"),
    (131, "mall"),
    (139, "saturday_dinner"),
    (166, "home"),
)
SLOT_KIND = dict(TEMPLATE)
FRIDAY_DINNER_SLOT = 115
SATURDAY_DINNER_SLOT = 139

_KM_PER_DEG_LAT = 111.195


@dataclass
class SynthConfig:
    num_users: int = 50
    weeks: int = 40
    num_homes: int = 9
    num_works: int = 3
    num_malls: int = 3
    restaurants_per_work: int = 2
    restaurants_per_mall: int = 3
    district_separation_km: float = 20.0
    district_spread_km: float = 3.0
    restaurant_jitter_hm: float = 6.0
    p_friday_fixed: float = 1.0
    p_saturday_near_mall: float = 1.0
    noise_rate: float = 0.1
    end_on_saturday_dinner: bool = True
    start: str = "2012-04-02"
    seed: int = 0
    origin: tuple[float, float] = field(default=(40.75, -73.99))

    def __post_init__(self):
        for name in ("p_friday_fixed", "p_saturday_near_mall", "noise_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.num_users < 1 or self.weeks < 1:
            raise ValueError("need at least one user and one week")
        if min(self.num_homes, self.num_works, self.num_malls) < 1:
            raise ValueError("need at least one home, work place and mall")
        if self.restaurants_per_work < 1 or self.restaurants_per_mall < 1:
            raise ValueError("every anchor needs at least one restaurant")
        self.origin = tuple(float(v) for v in self.origin)
        start = datetime.fromisoformat(self.start).replace(tzinfo=timezone.utc)
        if start.weekday() != 0:
            raise ValueError("start must be a Monday")

    @property
    def num_locations(self) -> int:
        return (self.num_homes + self.num_works * (1 + self.restaurants_per_work)
                + self.num_malls * (1 + self.restaurants_per_mall))

    @property
    def start_epoch(self) -> int:
        return int(datetime.fromisoformat(self.start).replace(tzinfo=timezone.utc).timestamp())

    def visits_per_user(self) -> int:
        full = len(TEMPLATE) * self.weeks
        if self.end_on_saturday_dinner:
            full -= sum(1 for slot, _ in TEMPLATE if slot > SATURDAY_DINNER_SLOT)
        return full

    def to_dict(self) -> dict:
        d = asdict(self)
        d["origin"] = list(self.origin)
        return d


class SynthRecord(NamedTuple):
    user: str
    location: str
    lat: float
    lon: float
    timestamp: int


@dataclass
class UserRoutine:
    home: str
    work: str
    friday_restaurant: str
    mall: str


@dataclass
class SynthWorld:
    locations: dict[str, tuple[float, float]]
    work_restaurants: dict[str, list[str]]
    mall_restaurants: dict[str, list[str]]
    users: dict[str, UserRoutine]

    @property
    def location_keys(self) -> list[str]:
        return list(self.locations)

    @property
    def restaurants(self) -> list[str]:
        return [r for rs in self.work_restaurants.values() for r in rs] + [
            r for rs in self.mall_restaurants.values() for r in rs
        ]


def _offset(origin, north_km: float, east_km: float) -> tuple[float, float]:
    lat = origin[0] + north_km / _KM_PER_DEG_LAT
    lon = origin[1] + east_km / (_KM_PER_DEG_LAT * np.cos(np.radians(origin[0])))
    return (round(float(lat), 6), round(float(lon), 6))


def build_world(config: SynthConfig, rng: np.random.Generator) -> SynthWorld:
    """Place anchors and restaurants; the mall district lies due south of work."""
    spread = config.district_spread_km
    scatter = lambda: rng.uniform(-spread, spread, size=2)
    residential = _offset(config.origin, 0.0, -config.district_separation_km / 2)
    business = config.origin
    shopping = _offset(config.origin, -config.district_separation_km, 0.0)
    jitter_km = config.restaurant_jitter_hm / 10.0

    locations: dict[str, tuple[float, float]] = {}
    for h in range(config.num_homes):
        locations[f"home-{h}"] = _offset(residential, *scatter())
    work_rest: dict[str, list[str]] = {}
    for w in range(config.num_works):
        key = f"work-{w}"
        locations[key] = _offset(business, *scatter())
        work_rest[key] = []
        for r in range(config.restaurants_per_work):
            rkey = f"restaurant-w{w}-{r}"
            locations[rkey] = _offset(locations[key], *rng.uniform(-jitter_km, jitter_km, size=2))
            work_rest[key].append(rkey)
    mall_rest: dict[str, list[str]] = {}
    for m in range(config.num_malls):
        key = f"mall-{m}"
        locations[key] = _offset(shopping, *scatter())
        mall_rest[key] = []
        for r in range(config.restaurants_per_mall):
            rkey = f"restaurant-m{m}-{r}"
            locations[rkey] = _offset(locations[key], *rng.uniform(-jitter_km, jitter_km, size=2))
            mall_rest[key].append(rkey)

    near_work = np.array([locations[r] for rs in work_rest.values() for r in rs])
    near_mall = np.array([locations[r] for rs in mall_rest.values() for r in rs])
    gap_hm = haversine(near_work[:, None, :], near_mall[None, :, :]).min()
    if gap_hm < 100.0:
        raise ValueError(f"restaurant clusters only {gap_hm / 10:.1f} km apart; need >= 10 km")

    homes = [k for k in locations if k.startswith("home-")]
    users: dict[str, UserRoutine] = {}
    for u in range(config.num_users):
        work = f"work-{rng.integers(config.num_works)}"
        users[f"user-{u}"] = UserRoutine(
            home=homes[rng.integers(len(homes))],
            work=work,
            friday_restaurant=work_rest[work][rng.integers(len(work_rest[work]))],
            mall=f"mall-{rng.integers(config.num_malls)}",
        )
    return SynthWorld(locations, work_rest, mall_rest, users)


def _spawn(config: SynthConfig) -> tuple[np.random.Generator, list[np.random.Generator]]:
    world_ss, users_ss = np.random.SeedSequence(config.seed).spawn(2)
    return np.random.default_rng(world_ss), [np.random.default_rng(s) for s in users_ss.spawn(config.num_users)]


def world_for(config: SynthConfig) -> SynthWorld:
    return build_world(config, _spawn(config)[0])


def _template_visit(kind: str, routine: UserRoutine, world: SynthWorld, config: SynthConfig,
                    rng: np.random.Generator) -> str:
    if kind == "home":
        return routine.home
    if kind == "work":
        return routine.work
    if kind == "mall":
        return routine.mall
    if kind == "friday_dinner":
        if rng.random() < config.p_friday_fixed:
            return routine.friday_restaurant
        options = world.work_restaurants[routine.work]
        return options[rng.integers(len(options))]
    if kind == "saturday_dinner":
        options = world.mall_restaurants[routine.mall]
        if rng.random() >= config.p_saturday_near_mall:
            options = world.restaurants
        return options[rng.integers(len(options))]
    raise ValueError(f"unknown visit kind {kind!r}")


def generate_records(config: SynthConfig) -> tuple[list[SynthRecord], SynthWorld]:
    world_rng, user_rngs = _spawn(config)
    world = build_world(config, world_rng)
    keys = world.location_keys
    t0 = config.start_epoch
    records: list[SynthRecord] = []
    for (user, routine), rng in zip(world.users.items(), user_rngs):
        for week in range(config.weeks):
            for slot, kind in TEMPLATE:
                if config.end_on_saturday_dinner and week == config.weeks - 1 and slot > SATURDAY_DINNER_SLOT:
                    break
                loc = _template_visit(kind, routine, world, config, rng)
                if rng.random() < config.noise_rate:
                    loc = keys[rng.integers(len(keys))]
                ts = t0 + week * WEEK_S + slot * 3600 + int(rng.integers(0, 3600))
                lat, lon = world.locations[loc]
                records.append(SynthRecord(user, loc, lat, lon, ts))
    return records, world


def generate(config: SynthConfig, delimiter: str = "\t") -> str:
    """Raw check-in text in the default ingest layout (user, location, lat, lon, time)."""
    records, _ = generate_records(config)
    return "".join(
        delimiter.join((r.user, r.location, f"{r.lat:.6f}", f"{r.lon:.6f}", str(r.timestamp))) + "\n"
        for r in records
    )


@dataclass
class OracleAnswer:
    probs: dict[str, float]

    def vector(self, location_keys: Sequence[str]) -> np.ndarray:
        """Probabilities ordered like ``location_keys`` (dataset vocabulary order)."""
        return np.array([self.probs.get(k, 0.0) for k in location_keys])

    def bayes_recall(self, k: int) -> float:
        """Probability that the true next location is among the ``k`` likeliest."""
        return float(np.sort(np.fromiter(self.probs.values(), dtype=float))[::-1][:k].sum())


def template_distribution(kind: str | None, routine: UserRoutine, world: SynthWorld,
                          config: SynthConfig) -> dict[str, float]:
    keys = world.location_keys
    if kind is None:
        return {k: 1.0 / len(keys) for k in keys}
    if kind in ("home", "work", "mall"):
        return {getattr(routine, kind): 1.0}
    out: dict[str, float] = {}

    def put(options, mass):
        for o in options:
            out[o] = out.get(o, 0.0) + mass / len(options)

    if kind == "friday_dinner":
        put([routine.friday_restaurant], config.p_friday_fixed)
        put(world.work_restaurants[routine.work], 1.0 - config.p_friday_fixed)
    else:
        put(world.mall_restaurants[routine.mall], config.p_saturday_near_mall)
        put(world.restaurants, 1.0 - config.p_saturday_near_mall)
    return out


def oracle(history, next_time_slot: int, config: SynthConfig, world: SynthWorld | None = None) -> OracleAnswer:
    """True distribution of the next location given the user and the next hour slot.

    ``history`` is the user's generated records (or just the user key); the
    routine depends only on who the user is.  Slots outside the weekly
    template get the pure noise prior.
    """
    user = history if isinstance(history, str) else history[-1].user
    world = world or world_for(config)
    routine = world.users[user]
    keys = world.location_keys
    template = template_distribution(SLOT_KIND.get(int(next_time_slot) % 168), routine, world, config)
    rho = config.noise_rate
    probs = {k: rho / len(keys) + (1.0 - rho) * template.get(k, 0.0) for k in keys}
    return OracleAnswer(probs)


def bayes_recall(config: SynthConfig, queries: Sequence[tuple[str, int]], k: int) -> float:
    """Mean Bayes-optimal Recall@k over ``(user, next_slot)`` queries."""
    world = world_for(config)
    if not queries:
        return 0.0
    return float(np.mean([oracle(u, slot, config, world).bayes_recall(k) for u, slot in queries]))


def slot_of(timestamp) -> int:
    return hour_of_week(timestamp)
