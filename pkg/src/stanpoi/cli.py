"""Command-line entry point: ``stanpoi <command> [options]``.

Settings resolve in three layers: an INI config file (``--config``), then
``STAN_*`` environment variables, then command-line flags.  Every command that
writes artifacts creates a fresh run directory ``<out>/seed-<seed>-<UTC time>``,
holding an ``INCOMPLETE`` marker until the command finishes.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__, ingest, synth, tensor, train
from .model import ModelConfig, ModelParams, export_attention
from .relation import trajectory_relation

log = logging.getLogger("stanpoi")

ENV_PREFIX = "STAN_"
EXIT_FAILED_CHECK = 3
_MISSING = 2

# flag name -> attribute on the parsed namespace; mirrored as STAN_<NAME>
_ENV_FLAGS = ("config", "seed", "dataset", "out", "variant", "k", "mask_mode", "interval_mode")
_TRAIN_FLAG_FIELDS = {"seed": "seed", "mask_mode": "mask_mode", "interval_mode": "interval_mode"}


class UsageError(Exception):
    """Bad configuration or arguments (exit code 2)."""


# -- configuration ------------------------------------------------------------------------


def _coerce(value: str, default, name: str):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(type(default[0])(v) for v in value.replace(",", " ").split())
        return value
    except ValueError:
        raise UsageError(f"bad value for {name}: {value!r}") from None


def _section(parser: configparser.ConfigParser, name: str, cls) -> dict:
    if not parser.has_section(name):
        return {}
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    out = {}
    for key, value in parser.items(name):
        if key not in defaults:
            raise UsageError(f"unknown key {key!r} in [{name}]; allowed: {sorted(defaults)}")
        out[key] = _coerce(value, defaults[key], f"{name}.{key}")
    return out


def load_config(path: str | None) -> tuple[train.TrainConfig, synth.SynthConfig, dict]:
    """Read ``[train]``, ``[synth]`` and ``[paths]`` sections; unknown keys are errors."""
    parser = configparser.ConfigParser()
    if path:
        if not Path(path).is_file():
            raise FileNotFoundError(path)
        parser.read(path)
        extra = set(parser.sections()) - {"train", "synth", "paths"}
        if extra:
            raise UsageError(f"unknown config sections: {sorted(extra)}")
    paths = dict(parser.items("paths")) if parser.has_section("paths") else {}
    bad = set(paths) - {"dataset", "out", "raw"}
    if bad:
        raise UsageError(f"unknown key(s) in [paths]: {sorted(bad)}")
    try:
        tcfg = train.TrainConfig(**_section(parser, "train", train.TrainConfig))
        scfg = synth.SynthConfig(**_section(parser, "synth", synth.SynthConfig))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return tcfg, scfg, paths


def _apply_env(args: argparse.Namespace) -> None:
    """Fill flags the user did not pass from ``STAN_*`` variables."""
    for name in _ENV_FLAGS:
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None and getattr(args, name, None) is None and hasattr(args, name):
            setattr(args, name, env)


def _parse_ks(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(k) for k in text)
    try:
        ks = tuple(int(k) for k in str(text).replace(",", " ").split())
    except ValueError:
        raise UsageError(f"--k expects integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k values must be positive")
    return ks


def resolve(args: argparse.Namespace) -> tuple[train.TrainConfig, synth.SynthConfig, dict]:
    _apply_env(args)
    tcfg, scfg, paths = load_config(args.config)
    over = {}
    for flag, fname in _TRAIN_FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            over[fname] = int(value) if fname == "seed" else value
    if getattr(args, "k", None) is not None:
        over["eval_k"] = _parse_ks(args.k)
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    try:
        tcfg = replace(tcfg, **over)
        if getattr(args, "variant", None):
            tcfg = tcfg.variant(args.variant)
        if getattr(args, "seed", None) is not None:
            scfg = replace(scfg, seed=int(args.seed))
        ModelConfig(d=tcfg.d, n=tcfg.n, interval_mode=tcfg.interval_mode, mask_mode=tcfg.mask_mode)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    for key in ("dataset", "out"):
        if getattr(args, key, None) is not None:
            paths[key] = getattr(args, key)
    return tcfg, scfg, paths


# -- run directories ----------------------------------------------------------------------


class RunDir:
    """Append-only output directory; ``INCOMPLETE`` is removed only on success."""

    def __init__(self, out: str | Path, seed: int):
        root = Path(out)
        root.mkdir(parents=True, exist_ok=True)
        stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
        base = root / f"seed-{seed}-{stamp}"
        path, i = base, 0
        while True:
            try:
                path.mkdir()
                break
            except FileExistsError:
                i += 1
                path = base.with_name(f"{base.name}-{i}")
        self.path = path
        self.marker = path / "INCOMPLETE"
        self.marker.write_text("run did not finish\n")

    def file(self, name: str) -> Path:
        target = self.path / name
        if target.exists():
            raise FileExistsError(f"refusing to overwrite {target}")
        return target

    def write_json(self, name: str, payload: dict) -> Path:
        target = self.file(name)
        target.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return target

    def finish(self) -> None:
        self.marker.unlink()


def _effective(tcfg: train.TrainConfig, paths: dict, command: str, extra: dict | None = None) -> dict:
    out = {"command": command, "version": __version__, "seed": tcfg.seed, "train": tcfg.to_dict(), "paths": paths}
    if extra:
        out.update(extra)
    return out


def _json_bytes(payload: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(payload, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _json_from(arr: np.ndarray) -> dict:
    return json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))


def save_checkpoint(path: Path, params: ModelParams, mcfg: ModelConfig, effective: dict) -> None:
    """Parameters plus the model and run config, encoded as byte arrays in the same container."""
    arrays = dict(params.arrays())
    arrays["meta.model_config"] = _json_bytes(mcfg.to_dict())
    arrays["meta.effective_config"] = _json_bytes(effective)
    tensor.save_arrays(path, arrays)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    arrays = tensor.load_arrays(path)
    mcfg = ModelConfig.from_dict(_json_from(arrays.pop("meta.model_config")))
    effective = _json_from(arrays.pop("meta.effective_config"))
    return ModelParams.from_arrays(arrays), mcfg, effective


def _load_dataset(paths: dict) -> ingest.Dataset:
    path = paths.get("dataset")
    if not path:
        raise UsageError("no dataset given (--dataset or STAN_DATASET)")
    if not Path(path).is_file():
        raise FileNotFoundError(path)
    try:
        return ingest.load_dataset(path)
    except ingest.IngestError:
        # accept raw check-in text as well
        return ingest.load_raw(path)


# -- commands -----------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    _apply_env(args)
    if not Path(args.raw).is_file():
        raise FileNotFoundError(args.raw)
    fmt = ingest.TSMC_FORMAT if args.format == "tsmc" else (args.format or ingest.DEFAULT_FORMAT)
    ds = ingest.load_raw(args.raw, fmt, args.delimiter)
    out = args.out or str(Path(args.raw).with_suffix(".stands"))
    ingest.save_dataset(ds, out)
    s = ds.stats.summary()
    print(f"users={s['num_users']} locations={s['num_locations']} checkins={s['num_checkins']}")
    print(f"skipped_lines={s['skipped_lines']} gps_conflicts={s['gps_conflicts']} "
          f"train={len(ds.train)} val={len(ds.val)} test={len(ds.test)} -> {out}")
    return 0


def cmd_stats(args) -> int:
    _, _, paths = resolve(args)
    ds = _load_dataset(paths)
    print(json.dumps({**ds.stats.summary(), "train": len(ds.train), "val": len(ds.val), "test": len(ds.test),
                      "dropped_users": ds.dropped_users}, indent=2))
    return 0


def cmd_synth(args) -> int:
    _, scfg, paths = resolve(args)
    over = {k: v for k, v in (("num_users", args.users), ("weeks", args.weeks), ("noise_rate", args.noise))
            if v is not None}
    try:
        scfg = replace(scfg, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(paths.get("out") or "synth.tsv")
    if out.exists():
        raise FileExistsError(f"refusing to overwrite {out}")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(synth.generate(scfg))
    out.with_name(out.name + ".json").write_text(json.dumps({"synth": scfg.to_dict()}, indent=2, sort_keys=True))
    print(f"wrote {scfg.num_users * scfg.visits_per_user()} check-ins for {scfg.num_users} users -> {out}")
    return 0


def _check_report(report: train.EvalReport) -> list[str]:
    problems = [f"Recall@{k}={v} outside [0,1]" for k, v in report.recall.items() if not 0.0 <= v <= 1.0]
    ks = sorted(report.recall)
    problems += [f"Recall@{a} > Recall@{b}" for a, b in zip(ks, ks[1:]) if report.recall[a] > report.recall[b]]
    return problems


def _finish(run: RunDir, problems: list[str]) -> int:
    if problems:
        for p in problems:
            print(f"self-check failed: {p}", file=sys.stderr)
        return EXIT_FAILED_CHECK
    run.finish()
    print(f"run directory: {run.path}")
    return 0


def cmd_train(args) -> int:
    tcfg, _, paths = resolve(args)
    ds = _load_dataset(paths)
    run = RunDir(paths.get("out") or "runs", tcfg.seed)
    effective = _effective(tcfg, paths, "train")
    progress = lambda e, l, r: print(f"epoch {e:3d}  loss {l:.4f}  val {r}", flush=True)
    params, mcfg, report = train.train(ds, tcfg, on_epoch=progress)
    save_checkpoint(run.file("model.ckpt"), params, mcfg, effective)
    run.write_json("report.json", {"effective_config": effective, "report": json.loads(report.to_json())})
    print(report.table())
    return _finish(run, _check_report(report))


def cmd_eval(args) -> int:
    _apply_env(args)
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(args.checkpoint)
    params, mcfg, saved = load_checkpoint(args.checkpoint)
    tcfg = train.TrainConfig(**{k: tuple(v) if k == "eval_k" else v for k, v in saved["train"].items()})
    if args.k is not None:
        tcfg = replace(tcfg, eval_k=_parse_ks(args.k))
    paths = dict(saved.get("paths", {}))
    if args.dataset is not None:
        paths["dataset"] = args.dataset
    ds = _load_dataset(paths)
    if ds.num_locations != params.num_locations:
        raise UsageError(f"checkpoint has {params.num_locations} locations, dataset {ds.num_locations}")
    report = train.evaluate(params, mcfg, ds, args.split, tcfg.eval_k)
    report.seed = tcfg.seed
    run = RunDir(args.out or paths.get("out") or "runs", tcfg.seed)
    effective = _effective(tcfg, paths, "eval", {"checkpoint": str(args.checkpoint), "split": args.split})
    run.write_json("report.json", {"effective_config": effective, "report": json.loads(report.to_json(True))})
    print(report.table())
    return _finish(run, _check_report(report))


def cmd_ablate(args) -> int:
    tcfg, _, paths = resolve(args)
    variants = [v.strip() for v in (args.variants or ",".join(train.VARIANTS)).split(",") if v.strip()]
    unknown = [v for v in variants if v not in train.VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s) {unknown}; choose from {list(train.VARIANTS)}")
    seeds = [int(s) for s in (args.seeds or str(tcfg.seed)).split(",")]
    ds = _load_dataset(paths)
    run = RunDir(paths.get("out") or "runs", tcfg.seed)
    report = train.ablation_suite(ds, tcfg, variants, seeds)
    effective = _effective(tcfg, paths, "ablate", {"variants": variants, "seeds": seeds})
    run.write_json("ablation.json", {"effective_config": effective, "ablation": report.to_dict()})
    print(report.table())
    problems = [] if list(report.reports) == variants else ["report rows differ from configured variants"]
    return _finish(run, problems)


def _sequence_for(ds: ingest.Dataset, user_key: str | None, split: str, n: int):
    pairs = getattr(ds, split)
    if len(pairs) == 0:
        raise UsageError(f"split {split!r} is empty")
    if user_key is None:
        u, k = pairs[0]
    else:
        if user_key not in ds.user_keys:
            raise UsageError(f"unknown user {user_key!r}")
        uid = ds.user_keys.index(user_key) + 1
        match = [p for p in pairs if p[0] == uid]
        if not match:
            raise UsageError(f"user {user_key!r} has no {split} example")
        u, k = match[0]
    return ds.sequence(int(u), int(k), n)


def write_attention_csv(path: Path, weights: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in weights:
            w.writerow([format(float(x), ".17g") for x in row])


def attention_heatmap(path: Path, weights: np.ndarray, labels: list[str]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = len(labels)
    fig, ax = plt.subplots(figsize=(max(4, m * 0.35 + 2), max(3.5, m * 0.35 + 1.5)))
    im = ax.imshow(weights[:m, :m], cmap="viridis", vmin=0.0)
    ax.set_xticks(range(m), labels, rotation=90, fontsize=7)
    ax.set_yticks(range(m), labels, fontsize=7)
    ax.set_xlabel("attended check-in")
    ax.set_ylabel("updated check-in")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_export_attention(args) -> int:
    _apply_env(args)
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(args.checkpoint)
    params, mcfg, saved = load_checkpoint(args.checkpoint)
    paths = dict(saved.get("paths", {}))
    if args.dataset is not None:
        paths["dataset"] = args.dataset
    ds = _load_dataset(paths)
    seq = _sequence_for(ds, args.user, args.split, mcfg.n)
    weights = export_attention(seq, trajectory_relation(seq), params, mcfg)
    m = seq.valid_len
    labels = []
    for loc, ts in zip(seq.locations[:m], seq.timestamps[:m]):
        stamp = time.strftime("%a %H:%M", time.gmtime(int(ts)))
        labels.append(f"{ds.location_keys[int(loc) - 1]} {stamp}")
    seed = int(saved.get("seed", 0))
    run = RunDir(args.out or paths.get("out") or "runs", seed)
    write_attention_csv(run.file("attention.csv"), weights)
    run.write_json("attention.json", {
        "effective_config": {**saved, "command": "export-attention", "split": args.split},
        "model_config": mcfg.to_dict(),
        "user": ds.user_keys[seq.user_id - 1],
        "valid_len": int(m),
        "positions": labels,
        "timestamps": [int(t) for t in seq.timestamps[:m]],
        "shape": list(weights.shape),
    })
    attention_heatmap(run.file("attention.png"), weights, labels)
    problems = []
    if np.any(weights < 0) or np.any(weights.sum(axis=1) > 1 + 1e-9):
        problems.append("attention rows must be non-negative and sum to at most 1")
    return _finish(run, problems)


# -- argument parsing ---------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, *, run_flags: bool = True) -> None:
    p.add_argument("--config", help="INI file with [train], [synth], [paths] sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", help="dataset file from `ingest` (raw check-in text also accepted)")
    p.add_argument("--out", help="output directory (run directories are created inside)")
    if run_flags:
        p.add_argument("--variant", choices=list(train.VARIANTS))
        p.add_argument("--k", help="comma-separated cutoffs for Recall@k, e.g. 5,10")
        p.add_argument("--mask-mode", dest="mask_mode", choices=["paper", "presoftmax"])
        p.add_argument("--interval-mode", dest="interval_mode", choices=["unit", "interpolation"])
        p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stanpoi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse raw check-ins into a dataset file")
    p.add_argument("raw")
    p.add_argument("--format", help="field layout, e.g. user,location,lat,lon,time, or 'tsmc'")
    p.add_argument("--delimiter", default="\t")
    p.add_argument("--out", help="dataset file to write")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="print dataset statistics")
    _common(p, run_flags=False)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="generate a synthetic check-in file with a planted routine")
    _common(p, run_flags=False)
    p.add_argument("--users", type=int)
    p.add_argument("--weeks", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and report test recall")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--k")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(func=cmd_eval, config=None, seed=None, variant=None, mask_mode=None, interval_mode=None)

    p = sub.add_parser("ablate", help="train every variant over several seeds")
    _common(p)
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(train.VARIANTS)}")
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-attention", help="write one trajectory's attention matrix as CSV and PNG")
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--user", help="user key (default: first example of the split)")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.set_defaults(func=cmd_export_attention, config=None, seed=None, variant=None, k=None,
                   mask_mode=None, interval_mode=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return _MISSING
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _MISSING
    except (ingest.IngestError, ValueError, KeyError, OSError, train.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
