"""Bi-layer spatiotemporal attention network for next-location scoring.

Pipeline for one (or a batch of) padded trajectories::

    check-in embeddings  E = user + location + hour-of-week
    interval bias        B = reduce(embed(Δt)) + reduce(embed(Δs))
    aggregation          S = (M ∘ softmax((E Wq)(E Wk)^T + B) / √d) (E Wv)
    matching             A = Σ_valid_j softmax_candidates((E_loc S^T + N) / √d)

Every function broadcasts over leading batch axes, so the same code serves a
single sequence and a training batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as tn
from .relation import HOURS_PER_WEEK, IntervalBounds, hour_of_week
from .tensor import Tensor

INTERVAL_MODES = ("unit", "interpolation")
MASK_MODES = ("paper", "presoftmax")


@dataclass
class ModelConfig:
    d: int = 50
    n: int = 100
    interval_mode: str = "interpolation"
    mask_mode: str = "paper"
    use_tim: bool = True
    use_sim: bool = True
    use_candidate_intervals: bool = True
    dropout: float = 0.2
    bounds: IntervalBounds | None = None

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise ValueError("d and n must be >= 1")
        if self.interval_mode not in INTERVAL_MODES:
            raise ValueError(f"interval_mode must be one of {INTERVAL_MODES}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["bounds"] = None if self.bounds is None else asdict(self.bounds)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if d.get("bounds") is not None:
            d["bounds"] = IntervalBounds(**d["bounds"])
        return cls(**d)


@dataclass
class ModelParams:
    user_emb: Tensor
    loc_emb: Tensor
    time_emb: Tensor
    unit_t: Tensor
    unit_s: Tensor
    sup_t: Tensor
    inf_t: Tensor
    sup_s: Tensor
    inf_s: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_reduce_t: Tensor
    w_reduce_s: Tensor
    w_reduce_nt: Tensor
    w_reduce_ns: Tensor

    @classmethod
    def init(cls, num_users: int, num_locations: int, d: int, rng: np.random.Generator) -> ModelParams:
        """Uniform(±1/√d) tables, projections and interval vectors; zero reductions.

        Row 0 of the user and location tables is the padding row and stays zero.
        """
        r = 1.0 / math.sqrt(d)
        uni = lambda *shape: rng.uniform(-r, r, size=shape)

        def table(rows):
            w = uni(rows + 1, d)
            w[0] = 0.0
            return w

        arrays = {
            "user_emb": table(num_users),
            "loc_emb": table(num_locations),
            "time_emb": uni(HOURS_PER_WEEK, d),
            "unit_t": uni(d),
            "unit_s": uni(d),
            "sup_t": uni(d),
            "inf_t": uni(d),
            "sup_s": uni(d),
            "inf_s": uni(d),
            "w_q": uni(d, d),
            "w_k": uni(d, d),
            "w_v": uni(d, d),
            "w_reduce_t": np.zeros(d),
            "w_reduce_s": np.zeros(d),
            "w_reduce_nt": np.zeros(d),
            "w_reduce_ns": np.zeros(d),
        }
        return cls.from_arrays(arrays)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> ModelParams:
        return cls(**{f.name: Tensor(np.array(arrays[f.name], dtype=np.float64), requires_grad=True) for f in fields(cls)})

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    def copy(self) -> ModelParams:
        return ModelParams.from_arrays(self.arrays())

    @property
    def num_locations(self) -> int:
        return self.loc_emb.shape[0] - 1

    @property
    def d(self) -> int:
        return self.loc_emb.shape[1]

    def clamp_padding(self) -> None:
        self.user_emb.data[0] = 0.0
        self.loc_emb.data[0] = 0.0


def _valid(valid_len, n: int) -> np.ndarray:
    return np.arange(n) < np.asarray(valid_len)[..., None]


# -- embeddings -----------------------------------------------------------------------


def embed_checkins(params: ModelParams, users, locations, hours, valid_len) -> Tensor:
    """``E(u)`` for id arrays: users ``(...)``, locations/hours ``(..., n)``."""
    users = np.asarray(users, dtype=np.int64)
    locations = np.asarray(locations, dtype=np.int64)
    hours = np.asarray(hours, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= params.user_emb.shape[0]):
        raise IndexError("user id outside the embedding vocabulary")
    if locations.size and (locations.min() < 0 or locations.max() >= params.loc_emb.shape[0]):
        raise IndexError("location id outside the embedding vocabulary")
    valid = _valid(valid_len, locations.shape[-1])
    e_user = tn.gather_rows(params.user_emb, users[..., None])
    e_loc = tn.gather_rows(params.loc_emb, locations)
    e_time = tn.gather_rows(params.time_emb, np.where(valid, hours, 0))
    return tn.masked(e_user + e_loc + e_time, valid[..., None])


def embed_trajectory(seq, params: ModelParams) -> Tensor:
    hours = hour_of_week(seq.timestamps)
    return embed_checkins(params, seq.user_id, seq.locations, hours, seq.valid_len)


def _interval_parts(params: ModelParams, which: str):
    if which == "t":
        return params.unit_t, params.sup_t, params.inf_t
    return params.unit_s, params.sup_s, params.inf_s


def _bounds_for(config: ModelConfig, which: str) -> tuple[float, float]:
    if config.bounds is None:
        raise ValueError("interpolation mode needs interval bounds in the model config")
    b = config.bounds
    return (b.t_min, b.t_max) if which == "t" else (b.s_min, b.s_max)


def _interp_fraction(delta: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros_like(delta)
    return (np.clip(delta, lo, hi) - lo) / (hi - lo)


def interval_embedding(delta, params: ModelParams, config: ModelConfig, which: str = "t") -> Tensor:
    """Per-entry interval vectors, shape ``delta.shape + (d,)``.

    Unit mode scales a learned unit vector by the interval.  Interpolation
    mode blends ``sup`` (at the lower bound) and ``inf`` (at the upper
    bound) after clamping into the bounds; equal bounds give ``sup``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    unit, sup, inf = _interval_parts(params, which)
    if config.interval_mode == "unit":
        return Tensor(delta[..., None]) * unit
    frac = _interp_fraction(delta, *_bounds_for(config, which))[..., None]
    return Tensor(1.0 - frac) * sup + Tensor(frac) * inf


def _reduced_term(delta, params, config, which, w_reduce) -> Tensor:
    """``<interval_embedding(delta), w_reduce>`` without materialising ``d``-vectors."""
    delta = np.asarray(delta, dtype=np.float64)
    unit, sup, inf = _interval_parts(params, which)
    if config.interval_mode == "unit":
        return Tensor(delta) * (unit * w_reduce).sum()
    frac = _interp_fraction(delta, *_bounds_for(config, which))
    return Tensor(1.0 - frac) * (sup * w_reduce).sum() + Tensor(frac) * (inf * w_reduce).sum()


def embed_intervals(delta_t, delta_s, params: ModelParams, config: ModelConfig, kind: str = "trajectory") -> Tensor:
    """Scalar bias per entry: weighted sum over ``d`` of the temporal and spatial vectors.

    ``kind`` picks the reduction vectors: ``"trajectory"`` for Δ, ``"candidate"``
    for N.  Disabled parts contribute exactly zero.
    """
    if kind == "trajectory":
        w_t, w_s = params.w_reduce_t, params.w_reduce_s
    elif kind == "candidate":
        w_t, w_s = params.w_reduce_nt, params.w_reduce_ns
    else:
        raise ValueError(f"unknown interval kind {kind!r}")
    shape = np.broadcast_shapes(np.shape(delta_t), np.shape(delta_s))
    out = Tensor(np.zeros(shape))
    if config.use_tim:
        out = out + _reduced_term(delta_t, params, config, "t", w_t)
    if config.use_sim:
        out = out + _reduced_term(delta_s, params, config, "s", w_s)
    return out


# -- attention layers -----------------------------------------------------------------


def attention_weights(E: Tensor, bias, valid_len, params: ModelParams, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Masked attention weights ``M ∘ softmax(·)`` and the value rows."""
    n = E.shape[-2]
    valid = _valid(valid_len, n)
    pair = valid[..., :, None] & valid[..., None, :]
    q, k, v = E @ params.w_q, E @ params.w_k, E @ params.w_v
    logits = q @ tn.transpose(k)
    if bias is not None:
        logits = logits + tn.where(pair, bias, 0.0)
    logits = logits / math.sqrt(E.shape[-1])
    if config.mask_mode == "presoftmax":
        # a zero-length prefix keeps column 0 so the softmax stays finite; M zeroes it after
        cols = _valid(np.maximum(np.asarray(valid_len), 1), n)[..., None, :]
        logits = tn.where(cols, logits, -np.inf)
    weights = tn.masked(tn.softmax(logits, axis=-1), pair)
    return weights, v


def self_attention_aggregate(
    E: Tensor,
    bias,
    valid_len,
    params: ModelParams,
    config: ModelConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    weights, v = attention_weights(E, bias, valid_len, params, config)
    weights = tn.dropout(weights, config.dropout, rng, train)
    return weights @ v


def attention_match(loc_emb: Tensor, S: Tensor, candidate_bias, valid_len, config: ModelConfig) -> Tensor:
    """Per-candidate score: softmax over candidates at each valid position, summed.

    Each valid position spreads one unit of mass over the candidates, so a
    location that recurs in the trajectory collects mass once per visit.
    """
    valid_len = np.asarray(valid_len)
    if np.any(valid_len < 1):
        raise ValueError("attention_match needs at least one valid check-in")
    n = S.shape[-2]
    cols = _valid(valid_len, n)[..., None, :]
    logits = loc_emb @ tn.transpose(S)
    if candidate_bias is not None:
        logits = logits + tn.where(cols, candidate_bias, 0.0)
    logits = logits / math.sqrt(S.shape[-1])
    probs = tn.softmax(logits, axis=-2)
    return tn.masked(probs, cols).sum(axis=-1)


def candidate_table(params: ModelParams) -> Tensor:
    """Embeddings of candidate ids ``1..L``."""
    return tn.gather_rows(params.loc_emb, np.arange(1, params.num_locations + 1))


def forward_arrays(
    params: ModelParams,
    config: ModelConfig,
    users,
    locations,
    hours,
    valid_len,
    delta_t,
    delta_s,
    n_t,
    n_s,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Scores ``A`` of shape ``(..., L)`` from precomputed id and interval arrays."""
    E = embed_checkins(params, users, locations, hours, valid_len)
    E = tn.dropout(E, config.dropout, rng, train)
    bias = embed_intervals(delta_t, delta_s, params, config, "trajectory")
    S = self_attention_aggregate(E, bias, valid_len, params, config, train, rng)
    cand_bias = None
    if config.use_candidate_intervals:
        cand_bias = embed_intervals(n_t, n_s, params, config, "candidate")
    return attention_match(candidate_table(params), S, cand_bias, valid_len, config)


def forward(seq, relations, candidate_relation, params: ModelParams, config: ModelConfig,
            train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Scores over all ``L`` candidates for one padded sequence."""
    return forward_arrays(
        params, config, seq.user_id, seq.locations, hour_of_week(seq.timestamps), seq.valid_len,
        relations.delta_t, relations.delta_s, candidate_relation.n_t, candidate_relation.n_s,
        train, rng,
    )


def export_attention(seq, relations, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """The ``n × n`` aggregation weights (eval mode), masked as in the forward pass."""
    E = embed_trajectory(seq, params)
    bias = embed_intervals(relations.delta_t, relations.delta_s, params, config, "trajectory")
    weights, _ = attention_weights(E, bias, seq.valid_len, params, config)
    return weights.data.copy()


def ablated(config: ModelConfig, **flags) -> ModelConfig:
    return replace(config, **flags)
