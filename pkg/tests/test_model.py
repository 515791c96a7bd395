import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from stanpoi import model as M
from stanpoi import tensor as tn
from stanpoi.relation import IntervalBounds, candidate_relation, trajectory_relation
from stanpoi.tensor import Tensor

MONDAY = 1333324800  # 2012-04-02 00:00 UTC


def random_params(U, L, d, seed=0, scale=0.8):
    """Parameters with every array (reductions included) filled at random."""
    rng = np.random.default_rng(seed)
    p = M.ModelParams.init(U, L, d, rng)
    for name, t in p.named().items():
        t.data[...] = rng.uniform(-scale, scale, size=t.shape)
    p.clamp_padding()
    return p


def make_seq(user, locs, hours, gps, n):
    m = len(locs)
    seq = SimpleNamespace(
        user_id=user,
        locations=np.zeros(n, dtype=np.int64),
        timestamps=np.zeros(n, dtype=np.int64),
        gps=np.zeros((n, 2)),
        valid_len=m,
    )
    seq.locations[:m] = locs
    seq.timestamps[:m] = [MONDAY + int(h * 3600) for h in hours]
    seq.gps[:m] = gps
    return seq


CAND = {1: (40.70, -74.00), 2: (40.72, -73.99), 3: (40.60, -73.90)}


def tiny_instance(mode="interpolation", mask_mode="paper", n=4, valid=3, seed=0, **flags):
    params = random_params(U=2, L=3, d=2, seed=seed)
    locs = [1, 3, 1, 2][:valid]
    seq = make_seq(2, locs, [1.0, 27.5, 30.25, 100.0][:valid], [CAND[l] for l in locs], n)
    target = int(seq.timestamps[valid - 1]) + 5 * 3600
    bounds = IntervalBounds(0.0, 40.0, 0.0, 50.0)
    cfg = M.ModelConfig(d=2, n=n, interval_mode=mode, mask_mode=mask_mode, dropout=0.0, bounds=bounds, **flags)
    return params, cfg, seq, target


def run_forward(params, cfg, seq, target):
    return M.forward(seq, trajectory_relation(seq), candidate_relation(CAND, seq, target), params, cfg).data


def run_oracle(params, cfg, seq, target):
    P = {k: v.tolist() for k, v in params.arrays().items()}
    b = cfg.bounds
    ocfg = dict(d=cfg.d, n=cfg.n, mode=cfg.interval_mode, mask_mode=cfg.mask_mode, use_tim=cfg.use_tim,
                use_sim=cfg.use_sim, use_cand=cfg.use_candidate_intervals,
                bounds=(b.t_min, b.t_max, b.s_min, b.s_max))
    return oracles.forward_scalar(P, ocfg, seq.user_id, [int(x) for x in seq.locations],
                                  [int(x) for x in seq.timestamps], seq.gps.tolist(), seq.valid_len,
                                  target, [CAND[i] for i in (1, 2, 3)])


# -- embeddings ------------------------------------------------------------------------


def test_embed_trajectory_hand_oracle_and_padding():
    p = M.ModelParams.init(1, 2, 3, np.random.default_rng(0))
    p.user_emb.data[1] = [1, 0, 0]
    p.loc_emb.data[1] = [0, 1, 0]
    p.loc_emb.data[2] = [0, 0, 1]
    p.time_emb.data[:] = 0
    p.time_emb.data[5] = [0, 0, 2]
    seq = make_seq(1, [1, 2], [5, 6], [(0, 0), (0, 0)], n=4)
    E = M.embed_trajectory(seq, p).data
    np.testing.assert_array_equal(E, [[1, 1, 2], [1, 0, 1], [0, 0, 0], [0, 0, 0]])
    empty = make_seq(1, [], [], np.zeros((0, 2)), n=3)
    assert not M.embed_trajectory(empty, p).data.any()


def test_embed_rejects_unknown_ids():
    p = M.ModelParams.init(1, 2, 3, np.random.default_rng(0))
    with pytest.raises(IndexError):
        M.embed_checkins(p, 1, [3], [0], 1)
    with pytest.raises(IndexError):
        M.embed_checkins(p, 2, [1], [0], 1)


def test_padding_rows_start_at_zero():
    p = M.ModelParams.init(4, 5, 6, np.random.default_rng(0))
    assert not p.user_emb.data[0].any() and not p.loc_emb.data[0].any()
    assert not p.w_reduce_t.data.any() and not p.w_reduce_ns.data.any()


def test_interval_embedding_examples():
    p = M.ModelParams.init(1, 1, 2, np.random.default_rng(0))
    p.unit_t.data[:] = [0.1, -0.2]
    unit = M.ModelConfig(d=2, n=2, interval_mode="unit")
    np.testing.assert_allclose(M.interval_embedding(2.5, p, unit, "t").data, [0.25, -0.5])

    q = M.ModelParams.init(1, 1, 1, np.random.default_rng(0))
    q.sup_t.data[:] = [1.0]
    q.inf_t.data[:] = [0.0]
    interp = M.ModelConfig(d=1, n=2, bounds=IntervalBounds(0, 10, 0, 0))
    assert M.interval_embedding(5.0, q, interp, "t").data.tolist() == [0.5]
    # lower bound gives sup, values are clamped, degenerate bounds give sup
    assert M.interval_embedding(0.0, q, interp, "t").data.tolist() == [1.0]
    assert M.interval_embedding(25.0, q, interp, "t").data.tolist() == [0.0]
    q.sup_s.data[:] = [3.0]
    assert M.interval_embedding(7.0, q, interp, "s").data.tolist() == [3.0]


def test_interpolation_needs_bounds():
    p = M.ModelParams.init(1, 1, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        M.interval_embedding(1.0, p, M.ModelConfig(d=2, n=2), "t")


@pytest.mark.parametrize("mode", ["unit", "interpolation"])
def test_factorized_reduction_equals_explicit_vectors(mode):
    p = random_params(1, 1, 5, seed=3)
    cfg = M.ModelConfig(d=5, n=4, interval_mode=mode, bounds=IntervalBounds(0, 30, 0, 80))
    rng = np.random.default_rng(1)
    dt, ds = rng.uniform(0, 40, (4, 4)), rng.uniform(0, 100, (4, 4))
    fast = M.embed_intervals(dt, ds, p, cfg).data
    slow = (M.interval_embedding(dt, p, cfg, "t").data @ p.w_reduce_t.data
            + M.interval_embedding(ds, p, cfg, "s").data @ p.w_reduce_s.data)
    np.testing.assert_allclose(fast, slow, rtol=1e-12, atol=1e-12)
    cand = M.embed_intervals(dt, ds, p, cfg, "candidate").data
    slow_c = (M.interval_embedding(dt, p, cfg, "t").data @ p.w_reduce_nt.data
              + M.interval_embedding(ds, p, cfg, "s").data @ p.w_reduce_ns.data)
    np.testing.assert_allclose(cand, slow_c, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 1e4)), min_size=1, max_size=6))
def test_unit_mode_is_homogeneous(values):
    p = random_params(1, 1, 3, seed=2)
    cfg = M.ModelConfig(d=3, n=2, interval_mode="unit")
    x = np.array(values)
    np.testing.assert_array_equal(M.interval_embedding(2 * x, p, cfg, "t").data,
                                  2 * M.interval_embedding(x, p, cfg, "t").data)


def test_ablation_flags_zero_the_bias():
    p = random_params(1, 1, 3)
    cfg = M.ModelConfig(d=3, n=2, use_tim=False, use_sim=False, bounds=IntervalBounds(0, 1, 0, 1))
    assert not M.embed_intervals(np.ones((2, 2)), np.ones((2, 2)), p, cfg).data.any()
    only_t = replace(cfg, use_tim=True)
    both = replace(cfg, use_tim=True, use_sim=True)
    only_s = replace(cfg, use_sim=True)
    dt, ds = np.full((2, 2), 0.3), np.full((2, 2), 0.6)
    np.testing.assert_allclose(M.embed_intervals(dt, ds, p, both).data,
                               M.embed_intervals(dt, ds, p, only_t).data + M.embed_intervals(dt, ds, p, only_s).data)


# -- aggregation -------------------------------------------------------------------------


def test_single_valid_row_post_softmax_mask_is_v0_over_n():
    n, d = 5, 3
    p = random_params(1, 1, d)
    p.w_q.data[:] = 0.0
    E = Tensor(np.random.default_rng(0).normal(size=(n, d)))
    cfg = M.ModelConfig(d=d, n=n, dropout=0.0)
    S = M.self_attention_aggregate(E, None, 1, p, cfg).data
    V0 = E.data[0] @ p.w_v.data
    np.testing.assert_allclose(S[0], V0 / n, atol=1e-15)
    assert not S[1:].any()


def test_uniform_attention_presoftmax_gives_column_mean():
    n, d = 4, 3
    p = random_params(1, 1, d)
    p.w_q.data[:] = 0.0
    p.w_k.data[:] = 0.0
    E = Tensor(np.random.default_rng(1).normal(size=(n, d)))
    cfg = M.ModelConfig(d=d, n=n, mask_mode="presoftmax", dropout=0.0)
    S = M.self_attention_aggregate(E, np.zeros((n, n)), n, p, cfg).data
    V = E.data @ p.w_v.data
    np.testing.assert_allclose(S, np.tile(V.mean(axis=0), (n, 1)), atol=1e-12)


def test_saturated_bias_selects_one_value_row():
    n, d = 4, 2
    p = random_params(1, 1, d)
    E = Tensor(np.random.default_rng(2).normal(size=(n, d)))
    bias = np.zeros((n, n))
    bias[1, 3] = 1e6
    cfg = M.ModelConfig(d=d, n=n, mask_mode="presoftmax", dropout=0.0)
    S = M.self_attention_aggregate(E, bias, n, p, cfg).data
    np.testing.assert_allclose(S[1], (E.data @ p.w_v.data)[3], atol=1e-6)


@pytest.mark.parametrize("mask_mode", ["paper", "presoftmax"])
def test_zero_valid_len_gives_zero_aggregate(mask_mode):
    p = random_params(1, 1, 2)
    E = Tensor(np.zeros((3, 2)))
    cfg = M.ModelConfig(d=2, n=3, mask_mode=mask_mode, dropout=0.0)
    S = M.self_attention_aggregate(E, np.zeros((3, 3)), 0, p, cfg).data
    assert np.isfinite(S).all() and not S.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 3), st.integers(0, 10**6))
def test_attention_row_sums_by_mask_mode(valid, pad, seed):
    n, d = valid + pad, 3
    p = random_params(1, 1, d, seed=seed % 97, scale=2.0)
    rng = np.random.default_rng(seed)
    E = Tensor(rng.normal(size=(n, d)))
    bias = rng.normal(size=(n, n))
    for mode in ("paper", "presoftmax"):
        W, _ = M.attention_weights(E, bias, valid, p, M.ModelConfig(d=d, n=n, mask_mode=mode))
        rows = W.data.sum(axis=1)
        assert np.all(W.data >= 0) and np.all(rows <= 1 + 1e-12)
        assert not W.data[valid:].any() and not W.data[:, valid:].any()
        if mode == "presoftmax":
            np.testing.assert_allclose(rows[:valid], 1.0, atol=1e-9)


def test_export_attention_zero_params_is_uniform_over_n():
    p = random_params(2, 3, 2)
    for t in p.named().values():
        t.data[:] = 0.0
    seq = make_seq(1, [1, 2, 3], [1, 2, 3], [CAND[1], CAND[2], CAND[3]], n=5)
    cfg = M.ModelConfig(d=2, n=5, bounds=IntervalBounds(0, 2, 0, 200))
    W = M.export_attention(seq, trajectory_relation(seq), p, cfg)
    expect = np.zeros((5, 5))
    expect[:3, :3] = 1 / 5
    np.testing.assert_allclose(W, expect, atol=1e-15)
    pre = M.export_attention(seq, trajectory_relation(seq), p, replace(cfg, mask_mode="presoftmax"))
    np.testing.assert_allclose(pre.sum(axis=1)[:3], 1.0, atol=1e-9)


# -- matching ----------------------------------------------------------------------------


def test_identical_candidates_tie():
    cfg = M.ModelConfig(d=2, n=3)
    loc = Tensor(np.ones((4, 2)))
    S = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    A = M.attention_match(loc, S, None, 2, cfg).data
    np.testing.assert_allclose(A, 0.5, atol=1e-15)


def test_saturated_match_puts_unit_mass_on_winner():
    cfg = M.ModelConfig(d=1, n=2)
    A = M.attention_match(Tensor(np.array([[1.0], [0.0]])), Tensor(np.array([[1e4], [5.0]])), None, 1, cfg).data
    np.testing.assert_allclose(A, [1.0, 0.0], atol=1e-12)


def test_match_against_scalar_softmax_then_sum():
    cfg = M.ModelConfig(d=2, n=3)
    loc = np.array([[0.3, -1.2], [0.5, 0.4], [-0.7, 0.9]])
    S = np.array([[1.0, 0.2], [-0.4, 0.8], [9.0, 9.0]])
    bias = np.array([[0.1, -0.3, 7.0], [0.0, 0.2, 7.0], [-0.5, 0.4, 7.0]])
    A = M.attention_match(Tensor(loc), Tensor(S), bias, 2, cfg).data
    expect = [0.0, 0.0, 0.0]
    for j in range(2):
        z = [(sum(loc[c][k] * S[j][k] for k in range(2)) + bias[c][j]) / math.sqrt(2) for c in range(3)]
        tot = sum(math.exp(v) for v in z)
        for c in range(3):
            expect[c] += math.exp(z[c]) / tot
    np.testing.assert_allclose(A, expect, rtol=0, atol=1e-12)


def test_match_needs_a_valid_position():
    with pytest.raises(ValueError):
        M.attention_match(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))), None, 0, M.ModelConfig(d=2, n=3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(-50, 50))
def test_column_shift_leaves_scores_unchanged(seed, shift):
    rng = np.random.default_rng(seed)
    cfg = M.ModelConfig(d=3, n=4)
    loc, S = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(4, 3)))
    bias = rng.normal(size=(5, 4))
    base = M.attention_match(loc, S, bias, 3, cfg).data
    shifted = M.attention_match(loc, S, bias + shift * rng.normal(size=(1, 4)), 3, cfg).data
    np.testing.assert_allclose(base, shifted, atol=1e-9)


def test_candidate_time_bias_is_inert_under_candidate_softmax():
    params, cfg, seq, target = tiny_instance()
    a = run_forward(params, cfg, seq, target)
    b = run_forward(params, cfg, seq, target + 500 * 3600)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_pif_repeated_location_gains_score():
    cfg = M.ModelConfig(d=2, n=4)
    loc = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
    S_once = np.array([[2.0, 0.0], [0.0, 2.0], [0.0, 0.0], [0.0, 0.0]])
    S_twice = np.array([[2.0, 0.0], [0.0, 2.0], [2.0, 0.0], [0.0, 0.0]])
    a1 = M.attention_match(loc, Tensor(S_once), None, 2, cfg).data
    a2 = M.attention_match(loc, Tensor(S_twice), None, 3, cfg).data
    assert a2[0] > a1[0]


# -- end to end --------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["unit", "interpolation"])
@pytest.mark.parametrize("mask_mode", ["paper", "presoftmax"])
@pytest.mark.parametrize("valid", [1, 3, 4])
def test_forward_matches_hand_unrolled_oracle(mode, mask_mode, valid):
    params, cfg, seq, target = tiny_instance(mode, mask_mode, valid=valid)
    np.testing.assert_allclose(run_forward(params, cfg, seq, target), run_oracle(params, cfg, seq, target),
                               rtol=0, atol=1e-12)


def test_minus_all_equals_zeroed_intervals():
    params, cfg, seq, target = tiny_instance()
    off = replace(cfg, use_tim=False, use_sim=False, use_candidate_intervals=False)
    a = run_forward(params, off, seq, target)
    rel = trajectory_relation(seq)
    cr = candidate_relation(CAND, seq, target)
    unit = replace(cfg, interval_mode="unit")
    zeroed = M.forward(seq, replace(rel, delta_t=0 * rel.delta_t, delta_s=0 * rel.delta_s),
                       replace(cr, n_t=0 * cr.n_t, n_s=0 * cr.n_s), params, unit).data
    np.testing.assert_allclose(a, zeroed, atol=1e-12)


def test_padding_contents_are_inert():
    params, cfg, seq, target = tiny_instance(n=6, valid=3)
    base = run_forward(params, cfg, seq, target)
    seq.locations[3:] = [2, 3, 1]
    seq.timestamps[3:] = [MONDAY + 999999, 5, MONDAY]
    seq.gps[3:] = [(10, 10), (-20, 30), (0, 0)]
    rel = trajectory_relation(seq)
    rel.delta_t[3:, :] = 123.0  # junk beyond the valid block
    cr = candidate_relation(CAND, seq, target)
    cr.n_s[:, 3:] = 77.0
    A = M.forward(seq, rel, cr, params, cfg).data
    assert A.tobytes() == base.tobytes()


def test_batched_scores_equal_single_sequence_forward():
    from stanpoi.train import Geometry, batch_inputs, scores, ExampleArrays

    params, cfg, seq, target = tiny_instance(n=4, valid=3)
    gps = np.zeros((4, 2))
    for i, g in CAND.items():
        gps[i] = g
    ex = ExampleArrays(np.array([2]), seq.locations[None], seq.timestamps[None], np.array([3]),
                       np.array([1]), np.array([target]))
    batched = scores(params, cfg, batch_inputs(ex, Geometry(gps))).data[0]
    np.testing.assert_allclose(batched, run_forward(params, cfg, seq, target), rtol=0, atol=1e-12)


def test_end_to_end_gradients_match_finite_differences():
    from stanpoi.train import loss

    params, cfg, seq, target = tiny_instance("interpolation", "paper", valid=4)
    rel, cr = trajectory_relation(seq), candidate_relation(CAND, seq, target)
    named = params.named()
    value = loss(M.forward(seq, rel, cr, params, cfg), 2, [1, 3])
    value.backward()
    f = lambda: loss(M.forward(seq, rel, cr, params, cfg), 2, [1, 3]).item()
    numeric = tn.numeric_grad(f, [t.data for t in named.values()])
    for (name, t), g in zip(named.items(), numeric):
        auto = t.grad if t.grad is not None else np.zeros_like(t.data)
        np.testing.assert_allclose(auto, g, rtol=1e-5, atol=1e-8, err_msg=name)


def test_config_round_trip():
    cfg = M.ModelConfig(d=4, n=9, mask_mode="presoftmax", bounds=IntervalBounds(0, 1, 0, 2))
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        M.ModelConfig(d=0, n=1)
    with pytest.raises(ValueError):
        M.ModelConfig(interval_mode="bucket")
