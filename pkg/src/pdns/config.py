"""YAML run configuration: parsing, cross-field validation and object construction."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import targets as tg
from .approximator import ControlNetSpec, ScoreNetSpec
from .baselines import ChainConfig
from .ou import OUSchedule
from .trainer import TrainConfig, World


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is a dotted path and ``line`` the YAML line if known."""

    def __init__(self, field: str, message: str, line: int | None = None):
        self.field, self.message, self.line = field, message, line
        where = f"line {line}, " if line is not None else ""
        super().__init__(f"{where}field '{field}': {message}")


def _line_index(text: str) -> dict[str, int]:
    """Map dotted key paths to 1-based YAML line numbers."""
    out: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out
    if root is not None:
        walk(root, "")
    return out


@dataclass
class RunConfig:
    raw: dict
    target: object
    world: World
    train: TrainConfig
    metrics: dict
    baseline: ChainConfig
    seed: int
    out: Path

    @property
    def discrete(self) -> bool:
        return self.target.is_discrete

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    """Short digest of the experiment definition; the output location is not part of it."""
    raw = {k: v for k, v in raw.items() if k != "out"}
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _get(block: dict, key: str, path: str, default=None, kind=None):
    val = block.get(key, default)
    if val is None:
        return None
    if kind is not None:
        try:
            val = kind(val)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.{key}", f"expected {kind.__name__}: {exc}") from None
    return val


def build_target(block: dict, path: str = "target"):
    if not isinstance(block, dict) or "variant" not in block:
        raise ConfigError(path, "missing 'variant'")
    v = block["variant"]
    beta = _get(block, "beta", path, 1.0, float)
    if beta < 0:
        raise ConfigError(f"{path}.beta", "beta must be nonnegative")
    clip = _get(block, "grad_clip", path, 100.0, float)
    try:
        if v == "MW":
            return tg.many_well(_get(block, "dim", path, 5, int), _get(block, "delta", path, 4.0, float), beta, clip)
        if v == "Funnel":
            return tg.funnel(_get(block, "dim", path, 10, int), _get(block, "sigma", path, 3.0, float), beta, clip)
        if v in ("GMM", "MoS"):
            centers = block.get("centers")
            if centers is None:
                centers = tg.random_centers(
                    _get(block, "dim", path, 2, int),
                    _get(block, "n_modes", path, 8, int),
                    _get(block, "half_width", path, 10.0, float),
                    _get(block, "center_seed", path, 0, int),
                )
            if v == "GMM":
                return tg.gmm(centers, _get(block, "scale", path, 1.0, float), beta, clip)
            return tg.mixture_of_students(centers, _get(block, "df", path, 2.0, float), beta, clip)
        if v == "DW4":
            kw = {k: float(block[k]) for k in ("a", "b", "c", "d0", "tau") if k in block}
            return tg.double_well_4(**kw, beta=beta, grad_clip=clip)
        if v == "LJ":
            kw = {k: float(block[k]) for k in ("r_m", "eps", "c", "tau") if k in block}
            return tg.lennard_jones(_get(block, "n_particles", path, 13, int), **kw, beta=beta, grad_clip=clip)
        if v == "Ising":
            return tg.ising(_get(block, "L", path, 3, int), beta, _get(block, "J", path, 1.0, float))
        if v == "Potts":
            return tg.potts(_get(block, "L", path, 3, int), _get(block, "q", path, 3, int), beta, _get(block, "J", path, 1.0, float))
        if v == "MaxCut":
            n = _get(block, "n_vertices", path, 12, int)
            edges = block.get("edges")
            if edges is None:
                edges = tg.random_graph(n, _get(block, "p", path, 0.5, float), _get(block, "graph_seed", path, 0, int))
            return tg.maxcut(n, edges, beta)
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(f"{path}.variant", f"unknown variant {v!r}")


def _train_config(block: dict, seed: int) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    extra = set(block) - names
    if extra:
        raise ConfigError(f"train.{sorted(extra)[0]}", f"unknown key; valid keys: {sorted(names)}")
    kw = dict(block)
    kw.setdefault("seed", seed)
    try:
        return TrainConfig(**kw)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        bad = next((n for n in sorted(names, key=len, reverse=True) if n in msg), None)
        raise ConfigError(f"train.{bad}" if bad else "train", msg) from None


def parse_config(raw: dict, seed: int | None = None, out=None, workers: int = 1) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = int(seed)
        raw.setdefault("train", {})["seed"] = int(seed)
    if out is not None:
        raw["out"] = str(out)
    seed = int(raw.get("seed", 0))
    for key in ("target", "process", "net"):
        if key not in raw:
            raise ConfigError(key, "missing section")
    target = build_target(raw["target"])
    proc, net = raw["process"] or {}, raw["net"] or {}
    hidden = tuple(int(h) for h in net.get("hidden", (64, 64) if not target.is_discrete else (128, 128)))
    act = net.get("activation", "gelu")
    if act not in ("gelu", "tanh", "silu"):
        raise ConfigError("net.activation", f"unknown activation {act!r}")
    if target.is_discrete:
        if "ctmc_steps" not in proc:
            raise ConfigError("process.ctmc_steps", "discrete targets need the CTMC step count")
        if any(k in proc for k in ("alpha_min", "alpha_max", "sigma_bar")):
            raise ConfigError("process", "OU schedule keys given for a discrete target")
        steps = _get(proc, "ctmc_steps", "process", None, int)
        if steps < 1:
            raise ConfigError("process.ctmc_steps", "must be positive")
        spec = ScoreNetSpec(target.n_sites, target.alphabet, hidden, act, skip=bool(net.get("skip", False)))
        world = World(target, spec, None, steps, workers=workers)
    else:
        if "ctmc_steps" in proc:
            raise ConfigError("process.ctmc_steps", "continuous targets use the OU schedule, not CTMC steps")
        try:
            sched = OUSchedule(
                _get(proc, "sigma_bar", "process", 1.0, float),
                _get(proc, "alpha_min", "process", 0.1, float),
                _get(proc, "alpha_max", "process", 10.0, float),
                _get(proc, "T", "process", 1.0, float),
                _get(proc, "K", "process", 100, int),
                _get(proc, "memoryless_tol", "process", 0.1, float),
            )
        except ValueError as exc:
            raise ConfigError("process", str(exc)) from None
        spec = ControlNetSpec(target.dim, hidden, act, int(net.get("time_features", 8)), sched.T)
        world = World(target, spec, sched, workers=workers)
    train = _train_config(raw.get("train") or {}, seed)
    bl = raw.get("baseline") or {}
    try:
        chain = ChainConfig(
            int(bl.get("burn_in", 10_000)), int(bl.get("thin", 10)), int(bl.get("n_samples", 100)),
            int(bl.get("chains", 100)), int(bl.get("seed", seed)),
        )
    except ValueError as exc:
        raise ConfigError("baseline", str(exc)) from None
    metrics = raw.get("metrics") or {}
    if not isinstance(metrics, dict):
        raise ConfigError("metrics", "must be a mapping")
    return RunConfig(raw, target, world, train, metrics, chain, seed, Path(raw.get("out", "runs/default")))


def load_config(path, seed: int | None = None, out=None, workers: int = 1) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<syntax>", str(exc).splitlines()[0], mark.line + 1 if mark else None) from None
    try:
        return parse_config(raw, seed, out, workers)
    except ConfigError as exc:
        if exc.line is None:
            lines = _line_index(text)
            key = exc.field
            while key and key not in lines:
                key = key.rpartition(".")[0]
            exc = ConfigError(exc.field, exc.message, lines.get(key))
        raise exc from None


def truth_sampler(target):
    """Exact sampler for targets that have one (GMM), else ``None``."""
    if getattr(target, "variant", None) != "GMM" or target.beta != 1.0:
        return None
    centers = np.asarray(target.params["centers"], dtype=float)
    scale = float(target.params["scale"])

    def draw(n, rng):
        idx = rng.integers(0, len(centers), size=n)
        return centers[idx] + scale * rng.standard_normal((n, centers.shape[1]))

    return draw
