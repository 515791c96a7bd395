from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from stanpoi import ingest, synth
from stanpoi.relation import haversine, hour_of_week


def one_user(**kw):
    return synth.SynthConfig(num_users=1, weeks=1, noise_rate=0.0, **kw)


def test_noise_free_week_is_exactly_the_template():
    cfg = one_user(end_on_saturday_dinner=False)
    records, world = synth.generate_records(cfg)
    r = world.users["user-0"]
    expected = [r.home, r.work, r.work, r.friday_restaurant, r.mall, None, r.home]
    assert len(records) == len(synth.TEMPLATE)
    for rec, want, (slot, _) in zip(records, expected, synth.TEMPLATE):
        if want is None:
            assert rec.location in world.mall_restaurants[r.mall]
        else:
            assert rec.location == want
        assert hour_of_week(rec.timestamp) == slot


def test_trajectories_end_on_saturday_dinner():
    records, _ = synth.generate_records(synth.SynthConfig(num_users=3, weeks=2))
    last = {}
    for rec in records:
        last[rec.user] = rec
    assert all(hour_of_week(r.timestamp) == synth.SATURDAY_DINNER_SLOT for r in last.values())
    assert len(records) == 3 * synth.SynthConfig(weeks=2).visits_per_user()


def test_saturday_dinner_uniform_over_near_mall_set():
    cfg = one_user(end_on_saturday_dinner=False, seed=11)
    cfg = replace(cfg, weeks=1000)
    records, world = synth.generate_records(cfg)
    options = world.mall_restaurants[world.users["user-0"].mall]
    sat = [r.location for r in records if hour_of_week(r.timestamp) == synth.SATURDAY_DINNER_SLOT]
    assert len(sat) == 1000 and set(sat) <= set(options)
    counts = Counter(sat)
    assert chisquare([counts[o] for o in options]).pvalue > 0.01


def test_every_line_parses_and_counts_match_config():
    cfg = synth.SynthConfig(num_users=7, weeks=3, seed=4)
    ds = ingest.from_text(synth.generate(cfg))
    assert ds.stats.skipped_lines == 0 and ds.stats.gps_conflicts == 0
    assert ds.stats.num_users == 7
    assert ds.stats.num_checkins == 7 * cfg.visits_per_user() == 7 * (7 * 3 - 1)
    assert ds.stats.num_locations <= cfg.num_locations == 30
    assert len(ds.train) == 7 * (cfg.visits_per_user() - 3)


def test_generation_is_deterministic_per_seed():
    cfg = synth.SynthConfig(num_users=5, weeks=4, seed=3)
    assert synth.generate(cfg) == synth.generate(cfg)
    assert synth.generate(cfg) != synth.generate(replace(cfg, seed=4))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 1))
def test_timestamps_strictly_increase_within_slots(seed, noise):
    cfg = synth.SynthConfig(num_users=3, weeks=3, noise_rate=noise, seed=seed)
    records, world = synth.generate_records(cfg)
    by_user = {}
    for r in records:
        by_user.setdefault(r.user, []).append(r)
    for rows in by_user.values():
        ts = [r.timestamp for r in rows]
        assert all(a < b for a, b in zip(ts, ts[1:]))
        assert all(hour_of_week(t) in synth.SLOT_KIND for t in ts)
        assert all((r.lat, r.lon) == world.locations[r.location] for r in rows)


def test_restaurant_clusters_are_far_apart():
    world = synth.world_for(synth.SynthConfig())
    near_work = np.array([world.locations[r] for rs in world.work_restaurants.values() for r in rs])
    near_mall = np.array([world.locations[r] for rs in world.mall_restaurants.values() for r in rs])
    assert haversine(near_work[:, None], near_mall[None]).min() >= 100.0


def test_clusters_too_close_is_rejected():
    with pytest.raises(ValueError, match="10 km"):
        synth.world_for(synth.SynthConfig(district_separation_km=3.0))


@pytest.mark.parametrize("field", ["noise_rate", "p_friday_fixed", "p_saturday_near_mall"])
@pytest.mark.parametrize("value", [-0.1, 1.5])
def test_probabilities_must_lie_in_unit_interval(field, value):
    with pytest.raises(ValueError):
        synth.SynthConfig(**{field: value})


def test_start_must_be_monday():
    with pytest.raises(ValueError):
        synth.SynthConfig(start="2012-04-03")


def test_oracle_friday_point_mass_and_saturday_uniform():
    cfg = one_user(restaurants_per_mall=4)
    world = synth.world_for(cfg)
    r = world.users["user-0"]
    fri = synth.oracle("user-0", synth.FRIDAY_DINNER_SLOT, cfg, world).probs
    assert fri[r.friday_restaurant] == 1.0
    assert sum(v for k, v in fri.items() if k != r.friday_restaurant) == 0.0
    sat = synth.oracle("user-0", synth.SATURDAY_DINNER_SLOT, cfg, world).probs
    for k in world.mall_restaurants[r.mall]:
        assert sat[k] == 0.25


def test_oracle_noise_mixture():
    cfg = replace(one_user(), noise_rate=0.2)
    world = synth.world_for(cfg)
    clean = synth.oracle("user-0", synth.SATURDAY_DINNER_SLOT, replace(cfg, noise_rate=0.0), world).probs
    noisy = synth.oracle("user-0", synth.SATURDAY_DINNER_SLOT, cfg, world).probs
    L = len(world.locations)
    for k in world.locations:
        assert noisy[k] == pytest.approx(0.8 * clean[k] + 0.2 / L, abs=1e-15)
    assert sum(noisy.values()) == pytest.approx(1.0, abs=1e-12)


def test_oracle_off_template_slot_is_uniform():
    cfg = one_user()
    ans = synth.oracle("user-0", 3, cfg)
    assert len(set(ans.probs.values())) == 1
    assert sum(ans.probs.values()) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 167), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_oracle_sums_to_one(slot, noise, p_fri, p_sat):
    cfg = synth.SynthConfig(num_users=2, noise_rate=noise, p_friday_fixed=p_fri, p_saturday_near_mall=p_sat)
    ans = synth.oracle("user-1", slot, cfg)
    assert abs(sum(ans.probs.values()) - 1.0) <= 1e-12
    assert min(ans.probs.values()) >= 0.0


def test_oracle_accepts_generated_history_and_orders_by_vocabulary():
    cfg = synth.SynthConfig(num_users=2, weeks=2)
    records, world = synth.generate_records(cfg)
    hist = [r for r in records if r.user == "user-1"]
    ans = synth.oracle(hist, synth.SATURDAY_DINNER_SLOT, cfg)
    ds = ingest.from_text(synth.generate(cfg))
    vec = ans.vector(ds.location_keys)
    assert vec.shape == (ds.num_locations,)
    assert ans.probs == synth.oracle("user-1", synth.SATURDAY_DINNER_SLOT, cfg, world).probs


def test_bayes_recall_closed_form():
    cfg = synth.SynthConfig(num_users=3)
    q = [(u, synth.SATURDAY_DINNER_SLOT) for u in ("user-0", "user-1", "user-2")]
    assert synth.bayes_recall(cfg, q, 1) == pytest.approx(0.9 / 3 + 0.1 / 30, abs=1e-12)
    assert synth.bayes_recall(cfg, q, 3) == pytest.approx(0.9 + 0.3 / 30, abs=1e-12)
    assert synth.bayes_recall(cfg, q, 30) == pytest.approx(1.0, abs=1e-12)


def test_bayes_recall_bounds_empirical_recall_of_oracle_and_others():
    cfg = synth.SynthConfig(num_users=300, weeks=1, seed=5)
    records, world = synth.generate_records(cfg)
    targets = {}
    for r in records:
        targets[r.user] = r.location  # last record is the Saturday dinner
    bayes = synth.bayes_recall(cfg, [(u, synth.SATURDAY_DINNER_SLOT) for u in targets], 1)
    keys = world.location_keys
    hits_oracle = hits_fixed = 0
    for u, loc in targets.items():
        probs = synth.oracle(u, synth.SATURDAY_DINNER_SLOT, cfg, world).probs
        hits_oracle += max(keys, key=lambda k: (probs[k], -keys.index(k))) == loc
        hits_fixed += keys[-1] == loc
    n = len(targets)
    se = np.sqrt(bayes * (1 - bayes) / n)
    assert abs(hits_oracle / n - bayes) < 4 * se
    assert hits_fixed / n < bayes
