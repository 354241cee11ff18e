"""Command-line entry points: ``pdns train|sample|evaluate|oracle|baseline``."""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import metrics as mt
from .approximator import check_store_matches, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, truth_sampler
from .ou import terminal_reward
from .targets import enumerate_exact, potential
from .trainer import evaluate_model, run_pdns

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3


class UsageError(Exception):
    """Bad input detected by a subcommand; mapped to exit code 2."""


# ---------------------------------------------------------------------------
# files


def write_csv(path, columns, data, config_hash: str | None, integer_cols: int = 0) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(data, dtype=float).reshape(-1, len(columns))
    with open(path, "w") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write(",".join(columns) + "\n")
        for row in data:
            cells = [str(int(v)) for v in row[:integer_cols]] + [f"{v:.17g}" for v in row[integer_cols:]]
            fh.write(",".join(cells) + "\n")


@dataclass
class Table:
    states: np.ndarray
    extra: dict
    config_hash: str | None


def read_csv(path) -> Table:
    config_hash = None
    lines = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                if line.startswith("# config_hash="):
                    config_hash = line.strip().split("=", 1)[1]
                continue
            if line.strip():
                lines.append(line.strip())
    if not lines:
        raise UsageError(f"{path}: no header row")
    cols = lines[0].split(",")
    data = np.array([[float(c) for c in ln.split(",")] for ln in lines[1:]]).reshape(-1, len(cols))
    state_cols = [i for i, c in enumerate(cols) if c.startswith("x_")]
    extra = {c: data[:, i] for i, c in enumerate(cols) if not c.startswith("x_")}
    return Table(data[:, state_cols], extra, config_hash)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _clean(obj):
    """Replace non-finite floats so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else None)
    return obj


def _state_columns(d: int) -> list[str]:
    return [f"x_{i}" for i in range(d)]


# ---------------------------------------------------------------------------
# metrics


METRIC_NAMES = (
    "mmd",
    "sinkhorn",
    "w2_energy",
    "mean",
    "var",
    "ess",
    "logz",
    "mode_histogram",
    "tv",
    "magnetization",
    "abs_magnetization",
    "two_point",
)


@dataclass
class Reference:
    states: np.ndarray
    weights: np.ndarray | None = None


def _need(ref, name):
    if ref is None:
        raise UsageError(f"metric {name!r} needs a reference (--reference or --oracle)")
    return ref


def _need_target(target, name, discrete=None):
    if target is None:
        raise UsageError(f"metric {name!r} needs --config for the target")
    if discrete is not None and target.is_discrete != discrete:
        kind = "discrete" if discrete else "continuous"
        raise UsageError(f"metric {name!r} applies only to {kind} targets")
    return target


def compute_metric(name, X, log_w, ref: Reference | None, target, opts: dict):
    if name == "mmd":
        r = _need(ref, name)
        return mt.mmd(X, _unweighted(r, opts))
    if name == "sinkhorn":
        r = _need(ref, name)
        res = mt.sinkhorn(X, _unweighted(r, opts), eps=float(opts.get("sinkhorn_eps", 1e-3)))
        return {"cost": res.cost, "violation": res.violation, "converged": res.converged, "iterations": res.iterations}
    if name == "w2_energy":
        r = _need(ref, name)
        t = _need_target(target, name)
        return mt.w2_1d(potential(t, X), potential(t, _unweighted(r, opts)))
    if name in ("mean", "var"):
        f = np.mean if name == "mean" else np.var
        out = {"model": f(X, axis=0).tolist()}
        if ref is not None:
            Y = _unweighted(ref, opts)
            out["reference"] = f(Y, axis=0).tolist()
        return out
    if name == "ess":
        if log_w is None:
            raise UsageError("metric 'ess' needs a log_w column")
        return mt.global_ess(log_w)
    if name == "logz":
        if log_w is None:
            raise UsageError("metric 'logz' needs a log_w column")
        est, se = mt.logz_from_log_weights(log_w)
        if target is not None and target.is_discrete:
            est += target.n_sites * np.log(target.alphabet)
        return {"estimate": est, "se": se}
    if name == "mode_histogram":
        t = _need_target(target, name, discrete=False)
        if "centers" not in t.params:
            raise UsageError("mode_histogram needs a target with centers")
        freqs, unassigned = mt.mode_histogram(X, t.params["centers"], float(opts.get("mode_radius", 2.0)))
        return {"frequencies": freqs.tolist(), "unassigned": unassigned}
    t = _need_target(target, name, discrete=True)
    r = _need(ref, name)
    Xi = np.rint(X).astype(np.int64)
    Yi = np.rint(r.states).astype(np.int64)
    variant, q = t.variant, t.alphabet
    if name == "tv":
        p = mt.empirical_distribution(Xi, t)
        return mt.tv_distance(p, mt.empirical_distribution(Yi, t, r.weights))
    if name in ("magnetization", "abs_magnetization"):
        absolute = name == "abs_magnetization"
        a = mt.magnetization(Xi, None, variant, q, absolute)
        b = mt.magnetization(Yi, r.weights, variant, q, absolute)
        return {"model": a, "reference": b, "abs_error": abs(a - b)}
    if name == "two_point":
        if t.L is None:
            raise UsageError("two_point needs a lattice target")
        out = {}
        for rr in opts.get("two_point_r", [1]):
            a = mt.two_point_corr(Xi, t.L, int(rr), None, variant, q)
            b = mt.two_point_corr(Yi, t.L, int(rr), r.weights, variant, q)
            out[str(rr)] = {"model": a, "reference": b, "abs_error": abs(a - b)}
        return out
    raise UsageError(f"unknown metric {name!r}; valid names: {', '.join(METRIC_NAMES)}")


def _unweighted(ref: Reference, opts) -> np.ndarray:
    if ref.weights is None:
        return ref.states
    rng = np.random.default_rng(int(opts.get("seed", 0)))
    n = int(opts.get("reference_draws", 2000))
    idx = rng.choice(len(ref.states), size=n, p=ref.weights / ref.weights.sum())
    return ref.states[idx]


def oracle_reference(cfg: RunConfig, n: int, rng) -> Reference:
    t = cfg.target
    if t.is_discrete:
        states, probs, _ = enumerate_exact(t)
        return Reference(states.astype(float), probs)
    draw = truth_sampler(t)
    if draw is None:
        raise UsageError(f"no exact sampler for target {t.variant!r}; pass --reference instead")
    return Reference(draw(n, rng))


def run_metrics(names, X, log_w, ref, target, opts) -> dict:
    return {name: compute_metric(name, X, log_w, ref, target, opts) for name in names}


# ---------------------------------------------------------------------------
# subcommands


def _load(args) -> RunConfig:
    workers = getattr(args, "workers", 1) or 1
    if workers > 1 and getattr(args, "deterministic", False):
        raise ConfigError("--workers", "multiple workers are not bit-reproducible; drop --deterministic")
    if workers > 1:
        warnings.warn("multi-worker rollouts are not bit-reproducible", RuntimeWarning, stacklevel=2)
    return load_config(args.config, getattr(args, "seed", None), getattr(args, "out", None), workers)


def cmd_train(args) -> int:
    cfg = _load(args)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash
    log_path = out / "stages.jsonl"
    log_path.write_text("")

    def log(line):
        with open(log_path, "a") as fh:
            fh.write(json.dumps(_clean({**line, "config_hash": h})) + "\n")

    res = run_pdns(cfg.train, cfg.world, log=log, checkpoint_dir=out / "checkpoints")
    save_checkpoint(out / "final.pdns1", res.store)
    report = dict(res.report)
    report["config"] = cfg.raw
    report["config_hash"] = h
    names = cfg.metrics.get("names", [])
    if names:
        rng = np.random.default_rng(cfg.seed + 1)
        ref = None
        try:
            ref = oracle_reference(cfg, len(res.samples), rng)
        except UsageError:
            pass
        report["metrics"] = run_metrics(names, res.samples, res.log_weights, ref, cfg.target, cfg.metrics)
    d = res.samples.shape[1]
    write_csv(out / "samples.csv", _state_columns(d) + ["log_w"], np.column_stack([res.samples, res.log_weights]), h,
              d if cfg.discrete else 0)
    write_json(out / "report.json", _clean(report))
    print(json.dumps(_clean({"status": res.status, "global_ess": report["global_ess"], "out": str(out)})))
    return EXIT_OK if res.status == "ok" else EXIT_ABORT


def cmd_sample(args) -> int:
    cfg = _load(args)
    try:
        store = load_checkpoint(args.checkpoint)
        check_store_matches(store, cfg.world.spec)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    rng = np.random.default_rng(cfg.seed if args.seed is None else args.seed)
    d = cfg.world.spec.seq_len if cfg.discrete else cfg.world.spec.input_dim
    if args.n > 0:
        records, base = evaluate_model(cfg.world, store.ema, args.n, rng)
        data = np.column_stack([records.x_T, base])
    else:
        data = np.zeros((0, d + 1))
    write_csv(args.output, _state_columns(d) + ["log_w"], data, cfg.hash, d if cfg.discrete else 0)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    names = [n.strip() for n in args.metrics.split(",") if n.strip()]
    bad = [n for n in names if n not in METRIC_NAMES]
    if bad:
        raise UsageError(f"unknown metric(s) {', '.join(bad)}; valid names: {', '.join(METRIC_NAMES)}")
    samples = read_csv(args.samples)
    cfg = load_config(args.config) if args.config else None
    ref = None
    if args.reference:
        rt = read_csv(args.reference)
        if rt.states.shape[1] != samples.states.shape[1]:
            raise UsageError(f"dimension mismatch: {samples.states.shape[1]} vs {rt.states.shape[1]}")
        if samples.config_hash and rt.config_hash and samples.config_hash != rt.config_hash and not args.force:
            raise UsageError("config hashes differ between samples and reference (use --force to compare anyway)")
        ref = Reference(rt.states, rt.extra.get("prob"))
    elif args.oracle:
        if cfg is None:
            raise UsageError("--oracle needs --config")
        ref = oracle_reference(cfg, len(samples.states), np.random.default_rng(args.seed or 0))
        if ref.states.shape[1] != samples.states.shape[1]:
            raise UsageError(f"dimension mismatch: {samples.states.shape[1]} vs {ref.states.shape[1]}")
    if cfg is not None:
        if samples.config_hash and samples.config_hash != cfg.hash and not args.force:
            raise UsageError("samples were produced under a different config (use --force to compare anyway)")
        d = cfg.target.n_sites if cfg.discrete else cfg.target.dim
        if samples.states.shape[1] != d:
            raise UsageError(f"dimension mismatch: samples have {samples.states.shape[1]} columns, target has {d}")
    opts = dict(cfg.metrics) if cfg is not None else {}
    result = run_metrics(names, samples.states, samples.extra.get("log_w"), ref, cfg.target if cfg else None, opts)
    result = _clean({"metrics": result, "config_hash": samples.config_hash})
    text = json.dumps(result, indent=2, sort_keys=True, default=_json_default)
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n")
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = _load(args)
    if not cfg.discrete:
        raise UsageError("the exact interpolant is available only for discrete targets")
    try:
        states, probs = bl.exact_interpolant(cfg.target, args.lam)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d = states.shape[1]
    write_csv(args.output, _state_columns(d) + ["prob"], np.column_stack([states, probs]), cfg.hash, d)
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _load(args)
    if not cfg.discrete:
        raise UsageError("MCMC baselines are implemented for discrete targets only")
    chain = cfg.baseline
    try:
        x = bl.sw_chain(cfg.target, chain) if args.method == "sw" else bl.mh_chain(cfg.target, chain)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d = x.shape[1]
    write_csv(args.output, _state_columns(d), x, cfg.hash, d)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdns", description="Proximal diffusion neural sampler")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", required=True, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", "-o", dest="output", default=None, help=out_help)
        sp.add_argument("--workers", type=int, default=1, help="rollout worker threads (not bit-reproducible above 1)")
        sp.add_argument("--deterministic", action="store_true", help="refuse settings that break bit reproducibility")

    sp = sub.add_parser("train", help="run the staged training loop")
    common(sp, "output directory (overrides config 'out')")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="draw terminal samples from a checkpoint")
    common(sp, "CSV path")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("-n", type=int, default=1000)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("evaluate", help="compute metrics on a sample CSV")
    sp.add_argument("--samples", required=True)
    sp.add_argument("--reference", default=None, help="reference CSV (samples or an oracle file)")
    sp.add_argument("--oracle", action="store_true", help="use the exact reference of the --config target")
    sp.add_argument("--config", default=None)
    sp.add_argument("--metrics", default="mmd")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true", help="compare files with different config hashes")
    sp.add_argument("--out", "-o", dest="output", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("oracle", help="write the exact geometric interpolant")
    common(sp, "CSV path")
    sp.add_argument("--lam", type=float, required=True)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("baseline", help="run an MCMC baseline and dump samples")
    common(sp, "CSV path")
    sp.add_argument("--method", choices=("sw", "mh"), default="sw")
    sp.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train" and args.output is not None:
        args.out = args.output
    else:
        args.out = None
    if args.command in ("sample", "oracle", "baseline") and args.output is None:
        print("error: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
