"""Negative sampling, loss, the training loop, Recall@k and ablations."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .ingest import Dataset
from .model import ModelConfig, ModelParams, forward_arrays
from .relation import IntervalBounds, haversine, hour_of_week, windowed_bounds
from .tensor import Tensor

log = logging.getLogger(__name__)

# rows of the ablation table: flag overrides relative to the full model
VARIANTS: dict[str, dict] = {
    "STAN": {},
    "-TIM": {"use_tim": False},
    "-SIM": {"use_sim": False},
    "-TIM-BS": {"use_tim": False, "balanced_sampler": False},
    "-SIM-BS": {"use_sim": False, "balanced_sampler": False},
    "-BS": {"balanced_sampler": False},
    "-ALL": {"use_tim": False, "use_sim": False, "use_candidate_intervals": False, "balanced_sampler": False},
}


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 0.003
    dropout: float = 0.2
    neg_samples: int = 10
    n: int = 100
    d: int = 50
    seed: int = 0
    batch_size: int = 32
    eval_k: tuple[int, ...] = (5, 10)
    select_k: int = 5
    interval_mode: str = "interpolation"
    mask_mode: str = "paper"
    use_tim: bool = True
    use_sim: bool = True
    use_candidate_intervals: bool = True
    balanced_sampler: bool = True

    def __post_init__(self):
        self.eval_k = tuple(int(k) for k in self.eval_k)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.neg_samples < 1:
            raise ValueError("neg_samples must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def model_config(self, bounds: IntervalBounds | None = None) -> ModelConfig:
        return ModelConfig(
            d=self.d, n=self.n, interval_mode=self.interval_mode, mask_mode=self.mask_mode,
            use_tim=self.use_tim, use_sim=self.use_sim,
            use_candidate_intervals=self.use_candidate_intervals, dropout=self.dropout, bounds=bounds,
        )

    def variant(self, name: str) -> TrainConfig:
        if name not in VARIANTS:
            raise KeyError(f"unknown variant {name!r}; choose from {list(VARIANTS)}")
        return replace(self, **VARIANTS[name])

    def to_dict(self) -> dict:
        out = asdict(self)
        out["eval_k"] = list(self.eval_k)
        return out


@dataclass
class EvalReport:
    recall: dict[int, float]
    num_examples: int
    ranks: list[int] = field(default_factory=list)
    seed: int | None = None
    config: dict = field(default_factory=dict)
    epoch_loss: list[float] = field(default_factory=list)
    val_recall: list[dict[int, float]] = field(default_factory=list)
    best_epoch: int | None = None
    score_grads_per_step: float | None = None
    wall_clock: float = 0.0

    def to_json(self, drop_wall_clock: bool = False) -> str:
        d = asdict(self)
        d["recall"] = {str(k): v for k, v in self.recall.items()}
        d["val_recall"] = [{str(k): v for k, v in r.items()} for r in self.val_recall]
        if drop_wall_clock:
            d.pop("wall_clock")
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        d = json.loads(text)
        d["recall"] = {int(k): v for k, v in d["recall"].items()}
        d["val_recall"] = [{int(k): v for k, v in r.items()} for r in d.get("val_recall", [])]
        return cls(**d)

    def table(self) -> str:
        ks = sorted(self.recall)
        head = "  ".join(f"{'Recall@' + str(k):>10}" for k in ks)
        row = "  ".join(f"{self.recall[k]:>10.4f}" for k in ks)
        return f"{'examples':>8}  {head}\n{self.num_examples:>8}  {row}"


# -- sampling and loss ------------------------------------------------------------------


def balanced_sample(L: int, label: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """``s`` distinct ids drawn uniformly from ``{1..L} \\ {label}``."""
    if s > L - 1:
        raise ValueError(f"cannot draw {s} negatives from {L - 1} non-label candidates")
    draw = rng.choice(L - 1, size=s, replace=False) + 1
    return draw + (draw >= label)


def loss(A: Tensor, label: int, negatives) -> Tensor:
    """``-[log σ(A[label]) + Σ_neg log(1 - σ(A[neg]))]`` for one score vector."""
    negatives = np.asarray(negatives, dtype=np.int64)
    if np.any(negatives == label):
        raise ValueError("label appears among the negatives")
    idx = np.concatenate([[label], negatives]) - 1
    sign = np.concatenate([[1.0], -np.ones(len(negatives))])
    picked = tn.take_along(A, idx, axis=-1)
    return -tn.log_sigmoid(tn.mul(picked, sign)).sum()


def batch_loss(A: Tensor, labels: np.ndarray, negatives: np.ndarray | None) -> tuple[Tensor, int]:
    """Mean per-example loss and the number of scores it touches.

    ``negatives=None`` uses every non-label candidate.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, L = A.shape
    if negatives is None:
        sign = -np.ones((B, L))
        sign[np.arange(B), labels - 1] = 1.0
        terms = tn.log_sigmoid(tn.mul(A, sign))
        return -terms.sum() / B, B * L
    idx = np.concatenate([labels[:, None], negatives], axis=1) - 1
    sign = -np.ones(idx.shape)
    sign[:, 0] = 1.0
    picked = tn.take_along(A, idx, axis=-1)
    return -tn.log_sigmoid(tn.mul(picked, sign)).sum() / B, idx.size


# -- batching ------------------------------------------------------------------------------


@dataclass
class ExampleArrays:
    """Padded id/time arrays for a list of ``(user, prefix)`` examples."""

    users: np.ndarray
    locations: np.ndarray
    times: np.ndarray
    valid_len: np.ndarray
    labels: np.ndarray
    label_times: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def build(cls, ds: Dataset, pairs: np.ndarray, n: int) -> ExampleArrays:
        N = len(pairs)
        locs = np.zeros((N, n), dtype=np.int64)
        times = np.zeros((N, n), dtype=np.int64)
        vlen = np.zeros(N, dtype=np.int64)
        labels = np.zeros(N, dtype=np.int64)
        ltimes = np.zeros(N, dtype=np.int64)
        for i, (u, k) in enumerate(pairs):
            start = max(0, k - n)
            m = k - start
            locs[i, :m] = ds.traj_locations[u][start:k]
            times[i, :m] = ds.traj_times[u][start:k]
            vlen[i] = m
            labels[i] = ds.traj_locations[u][k]
            ltimes[i] = ds.traj_times[u][k]
        users = np.asarray(pairs[:, 0], dtype=np.int64) if N else np.zeros(0, dtype=np.int64)
        return cls(users, locs, times, vlen, labels, ltimes)

    def subset(self, idx) -> ExampleArrays:
        return ExampleArrays(*(getattr(self, f)[idx] for f in
                               ("users", "locations", "times", "valid_len", "labels", "label_times")))


class Geometry:
    """Location coordinates with a cached distance table for small vocabularies."""

    CACHE_LIMIT = 4000

    def __init__(self, location_gps: np.ndarray):
        self.gps = np.asarray(location_gps, dtype=np.float64)
        self.L = len(self.gps) - 1
        self.table = None
        if self.L <= self.CACHE_LIMIT:
            self.table = haversine(self.gps[:, None, :], self.gps[None, :, :])

    def pairwise(self, locs: np.ndarray, valid: np.ndarray) -> np.ndarray:
        pair = valid[..., :, None] & valid[..., None, :]
        if self.table is not None:
            d = self.table[locs[..., :, None], locs[..., None, :]]
        else:
            g = self.gps[locs]
            d = haversine(g[..., :, None, :], g[..., None, :, :])
        return np.where(pair, d, 0.0)

    def to_candidates(self, locs: np.ndarray, valid: np.ndarray) -> np.ndarray:
        if self.table is not None:
            d = np.moveaxis(self.table[1:][:, locs], 0, -2)
        else:
            g = self.gps[locs]
            d = haversine(self.gps[1:, None, :][None], g[..., None, :, :])
        return np.where(valid[..., None, :], d, 0.0)


def batch_inputs(ex: ExampleArrays, geo: Geometry) -> dict[str, np.ndarray]:
    """Ids, hour slots and interval matrices for every example in ``ex``."""
    n = ex.locations.shape[1]
    valid = np.arange(n) < ex.valid_len[:, None]
    pair = valid[:, :, None] & valid[:, None, :]
    t = ex.times.astype(np.float64)
    delta_t = np.where(pair, np.abs(t[:, :, None] - t[:, None, :]) / 3600.0, 0.0)
    n_t = np.where(valid, np.abs(ex.label_times[:, None].astype(np.float64) - t) / 3600.0, 0.0)[:, None, :]
    return {
        "users": ex.users,
        "locations": ex.locations,
        "hours": np.where(valid, hour_of_week(ex.times), 0),
        "valid_len": ex.valid_len,
        "delta_t": delta_t,
        "delta_s": geo.pairwise(ex.locations, valid),
        "n_t": n_t,
        "n_s": geo.to_candidates(ex.locations, valid),
    }


def scores(params: ModelParams, config: ModelConfig, inputs: dict, train: bool = False,
           rng: np.random.Generator | None = None) -> Tensor:
    return forward_arrays(params, config, inputs["users"], inputs["locations"], inputs["hours"],
                          inputs["valid_len"], inputs["delta_t"], inputs["delta_s"],
                          inputs["n_t"], inputs["n_s"], train, rng)


# -- evaluation -----------------------------------------------------------------------------


def rank_of_label(A: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """0-based rank of each label; ties go to the lower location id."""
    labels = np.asarray(labels, dtype=np.int64)
    a = A[np.arange(len(labels)), labels - 1][:, None]
    ids = np.arange(1, A.shape[1] + 1)[None, :]
    better = (A > a) | ((A == a) & (ids < labels[:, None]))
    return better.sum(axis=1)


def recall_at_k(ranks: np.ndarray, ks: Sequence[int]) -> dict[int, float]:
    ranks = np.asarray(ranks)
    if len(ranks) == 0:
        return {int(k): 0.0 for k in ks}
    return {int(k): float(np.mean(ranks < k)) for k in ks}


def predict(params: ModelParams, config: ModelConfig, ex: ExampleArrays, geo: Geometry,
            batch_size: int = 64) -> np.ndarray:
    """Score matrix ``(len(ex), L)`` in eval mode."""
    out = []
    for start in range(0, len(ex), batch_size):
        part = ex.subset(slice(start, start + batch_size))
        out.append(scores(params, config, batch_inputs(part, geo)).data)
    return np.concatenate(out) if out else np.zeros((0, params.num_locations))


def evaluate(params: ModelParams, config: ModelConfig, ds: Dataset, examples, ks: Sequence[int] = (5, 10),
             batch_size: int = 64, geo: Geometry | None = None) -> EvalReport:
    """Recall@k over ``examples``: a split name, ``(user, prefix)`` pairs, or :class:`ExampleArrays`."""
    t0 = time.perf_counter()
    if isinstance(examples, str):
        examples = getattr(ds, examples)
    if not isinstance(examples, ExampleArrays):
        examples = ExampleArrays.build(ds, np.asarray(examples, dtype=np.int64).reshape(-1, 2), config.n)
    geo = geo or Geometry(ds.location_gps)
    A = predict(params, config, examples, geo, batch_size)
    ranks = rank_of_label(A, examples.labels) if len(examples) else np.zeros(0, dtype=np.int64)
    return EvalReport(recall_at_k(ranks, ks), len(examples), [int(r) for r in ranks],
                      config=config.to_dict(), wall_clock=time.perf_counter() - t0)


# -- training -------------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


def training_bounds(ds: Dataset, n: int) -> IntervalBounds:
    """Bounds over every training prefix (each user's first ``m - 3`` check-ins)."""
    times, gps = [], []
    for u in np.unique(ds.train[:, 0]) if len(ds.train) else []:
        m = len(ds.traj_locations[u])
        times.append(ds.traj_times[u][: m - 3].astype(np.float64))
        gps.append(ds.location_gps[ds.traj_locations[u][: m - 3]])
    return windowed_bounds(times, gps, n)


def sample_negatives(labels: np.ndarray, L: int, s: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([balanced_sample(L, int(lab), s, rng) for lab in labels])


def train(ds: Dataset, config: TrainConfig, on_epoch: Callable[[int, float, dict], None] | None = None
          ) -> tuple[ModelParams, ModelConfig, EvalReport]:
    """Fit on the training split; keep the epoch with the best validation Recall@``select_k``.

    Returns the selected parameters, the model config (with interval bounds),
    and the test-set report.
    """
    t0 = time.perf_counter()
    L = ds.num_locations
    if config.balanced_sampler and config.neg_samples > L - 1:
        raise ValueError(f"neg_samples={config.neg_samples} exceeds L-1={L - 1}")
    init_ss, shuffle_ss, sampler_ss, dropout_ss = np.random.SeedSequence(config.seed).spawn(4)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    sampler_rng = np.random.default_rng(sampler_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    bounds = training_bounds(ds, config.n)
    mcfg = config.model_config(bounds)
    params = ModelParams.init(ds.num_users, L, config.d, np.random.default_rng(init_ss))
    named = params.named()
    opt = tn.Adam(named, lr=config.lr)
    geo = Geometry(ds.location_gps)
    train_ex = ExampleArrays.build(ds, ds.train, config.n)
    val_ex = ExampleArrays.build(ds, ds.val, config.n)
    ks = sorted(set(config.eval_k) | {config.select_k})

    epoch_loss, val_hist = [], []
    best, best_epoch, best_score = params.arrays(), 0, -1.0
    grad_terms = steps = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_ex))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            part = train_ex.subset(order[start : start + config.batch_size])
            A = scores(params, mcfg, batch_inputs(part, geo), train=True, rng=dropout_rng)
            negs = sample_negatives(part.labels, L, config.neg_samples, sampler_rng) if config.balanced_sampler else None
            value, touched = batch_loss(A, part.labels, negs)
            if not math.isfinite(value.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps}")
            opt.zero_grad()
            value.backward()
            for name in ("user_emb", "loc_emb"):
                if named[name].grad is not None:
                    named[name].grad[0] = 0.0
            opt.step()
            params.clamp_padding()
            grad_terms += touched
            steps += 1
            total += value.item() * len(part)
            count += len(part)
        epoch_loss.append(total / max(count, 1))
        val = evaluate(params, mcfg, ds, val_ex, ks, geo=geo)
        val_hist.append(val.recall)
        # ties go to the later, longer-trained snapshot
        if val.recall[config.select_k] >= best_score:
            best, best_epoch, best_score = params.arrays(), epoch, val.recall[config.select_k]
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss[-1], val.recall)
        log.info("epoch %d loss %.4f val %s", epoch, epoch_loss[-1], val.recall)

    params = ModelParams.from_arrays(best)
    report = evaluate(params, mcfg, ds, "test", config.eval_k, geo=geo)
    report.seed = config.seed
    report.config = {"train": config.to_dict(), "model": mcfg.to_dict()}
    report.epoch_loss = epoch_loss
    report.val_recall = val_hist
    report.best_epoch = best_epoch
    report.score_grads_per_step = grad_terms / max(steps, 1)
    report.wall_clock = time.perf_counter() - t0
    return params, mcfg, report


# -- ablations ------------------------------------------------------------------------------


@dataclass
class AblationReport:
    variants: list[str]
    seeds: list[int]
    reports: dict[str, list[EvalReport]]

    def mean_std(self, variant: str, k: int) -> tuple[float, float]:
        vals = np.array([r.recall[k] for r in self.reports[variant]])
        return float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0

    def table(self, ks: Sequence[int] | None = None) -> str:
        ks = list(ks or sorted(next(iter(self.reports.values()))[0].recall))
        head = f"{'variant':<10}" + "".join(f"{'Recall@' + str(k):>20}" for k in ks)
        lines = [head]
        for v in self.variants:
            cells = []
            for k in ks:
                m, s = self.mean_std(v, k)
                cells.append(f"{m:>12.4f} ± {s:<5.3f}")
            lines.append(f"{v:<10}" + "".join(cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "variants": self.variants,
            "seeds": self.seeds,
            "rows": {
                v: {
                    "per_seed": [{str(k): x for k, x in r.recall.items()} for r in reps],
                    "mean": {str(k): self.mean_std(v, k)[0] for k in reps[0].recall},
                    "std": {str(k): self.mean_std(v, k)[1] for k in reps[0].recall},
                    "score_grads_per_step": [r.score_grads_per_step for r in reps],
                }
                for v, reps in self.reports.items()
            },
        }


def ablation_suite(ds: Dataset, base: TrainConfig, variants: Sequence[str] = tuple(VARIANTS),
                   seeds: Sequence[int] = (0,)) -> AblationReport:
    reports: dict[str, list[EvalReport]] = {}
    for name in variants:
        cfg = base.variant(name)
        reports[name] = [train(ds, replace(cfg, seed=s))[2] for s in seeds]
    return AblationReport(list(variants), list(seeds), reports)
