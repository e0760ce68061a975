"""Experiment configuration: YAML in, validated dataclasses out.

Every validation error names the offending field by its dotted path, e.g.
``mechanism.sigma: must be >= 0``. ``to_dict`` followed by ``from_dict``
reproduces the same configuration exactly.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from . import protection as prot

SCHEMA_VERSION = 1
SWEEP_PARAMS = {"randomization": "sigma", "sparsity": "d", "secret_sharing": "delta"}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _take(tree: dict, path: str, allowed: set) -> dict:
    if tree is None:
        return {}
    if not isinstance(tree, dict):
        raise ConfigError(path, "expected a mapping")
    extra = set(tree) - allowed
    if extra:
        raise ConfigError(f"{path}.{sorted(extra)[0]}" if path else sorted(extra)[0], "unknown field")
    return tree


def _num(tree, key, path, default, *, lo=None, hi=None, integer=False, strict_lo=False):
    value = tree.get(key, default)
    where = f"{path}.{key}" if path else key
    if integer:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, "must be an integer")
    elif isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(where, "must be a finite number")
    if lo is not None and (value <= lo if strict_lo else value < lo):
        raise ConfigError(where, f"must be {'>' if strict_lo else '>='} {lo}")
    if hi is not None and value > hi:
        raise ConfigError(where, f"must be <= {hi}")
    return value if integer else float(value)


def _choice(tree, key, path, default, options):
    value = tree.get(key, default)
    if value not in options:
        raise ConfigError(f"{path}.{key}", f"must be one of {list(options)}")
    return value


def _bool(tree, key, path, default):
    value = tree.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"{path}.{key}" if path else key, "must be true or false")
    return value


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "regression"
    n_features: int = 1
    n_samples: int = 5
    noise: float = 0.5
    heterogeneity: float = 0.3
    separation: float = 1.0
    paths: tuple = ()

    @classmethod
    def from_dict(cls, tree, path="dataset"):
        t = _take(tree, path, {f for f in cls.__dataclass_fields__})
        kind = _choice(t, "kind", path, "regression", ("regression", "classification", "csv"))
        paths = t.get("paths", [])
        if kind == "csv":
            if not isinstance(paths, list) or not paths or not all(isinstance(p, str) for p in paths):
                raise ConfigError(f"{path}.paths", "csv datasets need one file path per client")
        return cls(kind=kind,
                   n_features=_num(t, "n_features", path, 1, lo=1, integer=True),
                   n_samples=_num(t, "n_samples", path, 5, lo=1, integer=True),
                   noise=_num(t, "noise", path, 0.5, lo=0),
                   heterogeneity=_num(t, "heterogeneity", path, 0.3, lo=0),
                   separation=_num(t, "separation", path, 1.0, lo=0),
                   paths=tuple(paths))

    def to_dict(self):
        d = asdict(self)
        d["paths"] = list(self.paths)
        return d


@dataclass(frozen=True)
class UniverseSpec:
    candidates: int = 8
    sigma_obs: float = 0.1
    cap: int = 64

    @classmethod
    def from_dict(cls, tree, path="universe"):
        t = _take(tree, path, {"candidates", "sigma_obs", "cap"})
        cap = _num(t, "cap", path, 64, lo=2, integer=True)
        return cls(candidates=_num(t, "candidates", path, 8, lo=2, hi=cap, integer=True),
                   sigma_obs=_num(t, "sigma_obs", path, 0.1, lo=0, strict_lo=True),
                   cap=cap)


@dataclass(frozen=True)
class EvaluationSpec:
    path: str = "empirical"
    bins: int = 32
    grid_size: int = 4096
    batches: int = 10
    budgets: tuple = ()

    @classmethod
    def from_dict(cls, tree, path="evaluation"):
        t = _take(tree, path, {"path", "bins", "grid_size", "batches", "budgets"})
        budgets = t.get("budgets", [])
        if not isinstance(budgets, list):
            raise ConfigError(f"{path}.budgets", "expected a list")
        for i, b in enumerate(budgets):
            if isinstance(b, bool) or not isinstance(b, (int, float)) or b < 0:
                raise ConfigError(f"{path}.budgets[{i}]", "must be a nonnegative number")
        return cls(path=_choice(t, "path", path, "empirical", ("empirical", "parametric")),
                   bins=_num(t, "bins", path, 32, lo=2, integer=True),
                   grid_size=_num(t, "grid_size", path, 4096, lo=1, integer=True),
                   batches=_num(t, "batches", path, 10, lo=2, integer=True),
                   budgets=tuple(float(b) for b in budgets))

    def to_dict(self):
        d = asdict(self)
        d["budgets"] = list(self.budgets)
        return d


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple

    @classmethod
    def from_dict(cls, tree, mech_type, path="sweep"):
        t = _take(tree, path, {"param", "values"})
        expected = SWEEP_PARAMS.get(mech_type)
        if expected is None:
            raise ConfigError(path, f"mechanism {mech_type!r} has no sweepable parameter")
        param = t.get("param", expected)
        if param != expected:
            raise ConfigError(f"{path}.param", f"must be {expected!r} for {mech_type}")
        values = t.get("values")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"{path}.values", "sweep grids must be non-empty lists")
        for i, v in enumerate(values):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path}.values[{i}]", "must be a number")
        return cls(param, tuple(values))

    def to_dict(self):
        return {"param": self.param, "values": list(self.values)}


ATTACK_FIELDS = {
    "gradient-inversion": {"kind", "instances", "sigmas", "seed", "max_iters", "tol", "restarts", "prior", "weight"},
    "model-inversion": {"kind", "instances", "seed", "max_iters", "tol", "restarts", "prior", "weight"},
    "brute-force": {"kind", "n", "key_alphabet", "planted_index", "seed"},
    "posterior-argmax": {"kind", "instances", "candidates", "sigma_obs", "seed"},
}


def _attack(tree, path):
    if not isinstance(tree, dict):
        raise ConfigError(path, "expected a mapping")
    kind = tree.get("kind")
    if kind not in ATTACK_FIELDS:
        raise ConfigError(f"{path}.kind", f"must be one of {sorted(ATTACK_FIELDS)}")
    t = _take(tree, path, ATTACK_FIELDS[kind])
    out = {"kind": kind}
    if kind in ("gradient-inversion", "model-inversion"):
        out["instances"] = _num(t, "instances", path, 20, lo=1, integer=True)
        out["seed"] = _num(t, "seed", path, 0, lo=0, integer=True)
        out["max_iters"] = _num(t, "max_iters", path, 2000, lo=0, integer=True)
        out["tol"] = _num(t, "tol", path, 1e-8, lo=0, strict_lo=True)
        out["restarts"] = _num(t, "restarts", path, 4, lo=1, integer=True)
        out["prior"] = _choice(t, "prior", path, "none", ("none", "smoothness", "label"))
        out["weight"] = _num(t, "weight", path, 0.0, lo=0)
        if kind == "gradient-inversion":
            sig = t.get("sigmas", [0.0])
            if not isinstance(sig, list) or not sig or any(
                    isinstance(s, bool) or not isinstance(s, (int, float)) or s < 0 for s in sig):
                raise ConfigError(f"{path}.sigmas", "must be a non-empty list of nonnegative numbers")
            out["sigmas"] = [float(s) for s in sig]
    elif kind == "brute-force":
        out["n"] = _num(t, "n", path, 6, lo=1, integer=True)
        alpha = t.get("key_alphabet", [0, 1, 2, 3])
        if not isinstance(alpha, list) or len(alpha) < 2 or not all(
                isinstance(a, int) and not isinstance(a, bool) for a in alpha) or len(set(alpha)) != len(alpha):
            raise ConfigError(f"{path}.key_alphabet", "must list at least 2 distinct integers")
        out["key_alphabet"] = alpha
        size = len(alpha) ** out["n"]
        out["planted_index"] = _num(t, "planted_index", path, size - 1, lo=0, hi=size - 1, integer=True)
        out["seed"] = _num(t, "seed", path, 0, lo=0, integer=True)
    else:
        out["instances"] = _num(t, "instances", path, 20, lo=1, integer=True)
        out["candidates"] = _num(t, "candidates", path, 4, lo=2, integer=True)
        out["sigma_obs"] = _num(t, "sigma_obs", path, 0.1, lo=0, strict_lo=True)
        out["seed"] = _num(t, "seed", path, 0, lo=0, integer=True)
    return out


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    clients: int = 3
    rounds: int = 50
    trials: int = 64
    local_steps: int = 1
    lr: float = 0.1
    init_scale: float = 1.0
    protect_every_round: bool = False
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: dict = field(default_factory=lambda: {"kind": "linear-regression", "bias": True})
    utility: dict = field(default_factory=lambda: {"kind": "clipped-regression", "tau": 1.0})
    universe: UniverseSpec = field(default_factory=UniverseSpec)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    mechanism: object = field(default_factory=prot.NoOp)
    sweep: SweepSpec | None = None
    attacks: list = field(default_factory=list)
    output: str | None = None

    TOP = {"schema_version", "name", "seed", "clients", "rounds", "trials", "local_steps", "lr",
           "init_scale", "protect_every_round", "dataset", "model", "utility", "universe",
           "evaluation", "mechanism", "sweep", "attacks", "output"}

    @classmethod
    def from_dict(cls, tree: dict) -> "ExperimentConfig":
        t = _take(tree, "", cls.TOP)
        version = t.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
        name = t.get("name", "experiment")
        if not isinstance(name, str) or not name or "/" in name:
            raise ConfigError("name", "must be a non-empty string without '/'")
        model = _take(t.get("model"), "model", {"kind", "bias"})
        model = {"kind": _choice(model, "kind", "model", "linear-regression",
                                 ("linear-regression", "logistic-regression")),
                 "bias": _bool(model, "bias", "model", True)}
        util = _take(t.get("utility"), "utility", {"kind", "tau"})
        util = {"kind": _choice(util, "kind", "utility", "clipped-regression",
                                ("clipped-regression", "accuracy")),
                "tau": _num(util, "tau", "utility", 1.0, lo=0, strict_lo=True)}
        mech_tree = t.get("mechanism", {"type": "noop"})
        if not isinstance(mech_tree, dict):
            raise ConfigError("mechanism", "expected a mapping")
        try:
            mechanism = prot.mechanism_from_dict(mech_tree)
        except (TypeError, ValueError) as exc:
            raise ConfigError("mechanism", str(exc)) from exc
        sweep = None
        if t.get("sweep") is not None:
            sweep = SweepSpec.from_dict(t["sweep"], mechanism.kind)
        attacks = t.get("attacks", [])
        if not isinstance(attacks, list):
            raise ConfigError("attacks", "expected a list")
        output = t.get("output")
        if output is not None and not isinstance(output, str):
            raise ConfigError("output", "must be a path string")
        cfg = cls(
            name=name,
            seed=_num(t, "seed", "", 0, lo=0, hi=2**64 - 1, integer=True),
            clients=_num(t, "clients", "", 3, lo=2, integer=True),
            rounds=_num(t, "rounds", "", 50, lo=1, integer=True),
            trials=_num(t, "trials", "", 64, lo=2, integer=True),
            local_steps=_num(t, "local_steps", "", 1, lo=1, integer=True),
            lr=_num(t, "lr", "", 0.1, lo=0, strict_lo=True),
            init_scale=_num(t, "init_scale", "", 1.0, lo=0),
            protect_every_round=_bool(t, "protect_every_round", "", False),
            dataset=DatasetSpec.from_dict(t.get("dataset")),
            model=model,
            utility=util,
            universe=UniverseSpec.from_dict(t.get("universe")),
            evaluation=EvaluationSpec.from_dict(t.get("evaluation")),
            mechanism=mechanism,
            sweep=sweep,
            attacks=[_attack(a, f"attacks[{i}]") for i, a in enumerate(attacks)],
            output=output,
        )
        if cfg.dataset.kind == "csv" and len(cfg.dataset.paths) != cfg.clients:
            raise ConfigError("dataset.paths", "need exactly one csv file per client")
        if cfg.evaluation.batches > cfg.trials // 2 and cfg.evaluation.path == "empirical":
            raise ConfigError("evaluation.batches", "needs at least 2 trials per batch")
        return cfg

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "clients": self.clients,
            "rounds": self.rounds,
            "trials": self.trials,
            "local_steps": self.local_steps,
            "lr": self.lr,
            "init_scale": self.init_scale,
            "protect_every_round": self.protect_every_round,
            "dataset": self.dataset.to_dict(),
            "model": dict(self.model),
            "utility": dict(self.utility),
            "universe": asdict(self.universe),
            "evaluation": self.evaluation.to_dict(),
            "mechanism": self.mechanism.to_dict(),
            "sweep": self.sweep.to_dict() if self.sweep else None,
            "attacks": [dict(a) for a in self.attacks],
            "output": self.output,
        }

    def config_hash(self) -> str:
        tree = self.to_dict()
        tree.pop("output")
        blob = json.dumps(tree, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_mechanism(self, mechanism) -> "ExperimentConfig":
        data = self.to_dict()
        data["mechanism"] = mechanism.to_dict()
        data["sweep"] = None
        return ExperimentConfig.from_dict(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return ExperimentConfig.from_dict(tree)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
