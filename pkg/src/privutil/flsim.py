"""Horizontal federated learning with linear or logistic models.

Trials are simulated in lock-step: every array carries a leading trial axis
so one pass of full-batch gradient descent advances all trials at once. Each
trial owns child RNG streams spawned from the master seed, so results do not
depend on how trials are batched.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from . import protection as prot
from .divergence import DiagGaussian, DistanceResult, tv_discrete, tv_gaussian

logger = logging.getLogger(__name__)

KINDS = ("linear-regression", "logistic-regression")
VAR_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Data and models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClientDataset:
    features: np.ndarray
    targets: np.ndarray
    client_id: int = 0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        if X.shape[0] != y.size:
            raise ValueError("features and targets must have the same number of rows")
        if y.size < 1:
            raise ValueError("a dataset needs at least one sample")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset values must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def n_samples(self) -> int:
        return self.targets.size


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "linear-regression"
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"model kind must be one of {KINDS}")

    def dim(self, n_features: int) -> int:
        return n_features + int(self.bias)

    def design(self, data: ClientDataset) -> np.ndarray:
        X = data.features
        return np.hstack([X, np.ones((X.shape[0], 1))]) if self.bias else X


@dataclass(frozen=True)
class ModelVector:
    weights: np.ndarray
    kind: str = "linear-regression"
    bias: bool = True

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        if not np.all(np.isfinite(w)):
            raise ValueError("model weights must be finite")
        if self.kind not in KINDS:
            raise ValueError(f"model kind must be one of {KINDS}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(self.kind, self.bias)


@dataclass(frozen=True)
class UtilitySpec:
    kind: str = "clipped-regression"
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in ("accuracy", "clipped-regression"):
            raise ValueError("utility kind must be 'accuracy' or 'clipped-regression'")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError("tau must be positive")

    @property
    def c4(self) -> float:
        return 1.0


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def predict(W: np.ndarray, X: np.ndarray, kind: str) -> np.ndarray:
    z = W @ X.T
    return z if kind == "linear-regression" else _sigmoid(z)


def loss_and_grad(W: np.ndarray, X: np.ndarray, y: np.ndarray, kind: str):
    """Mean squared loss (halved) or mean log-loss, with its gradient, per row of W."""
    z = W @ X.T
    n = y.size
    if kind == "linear-regression":
        r = z - y
        loss = 0.5 * np.mean(r * r, axis=-1)
    else:
        r = _sigmoid(z) - y
        loss = np.mean(np.logaddexp(0.0, z) - y * z, axis=-1)
    return loss, r @ X / n


def local_update_batch(W: np.ndarray, X: np.ndarray, y: np.ndarray, kind: str,
                       steps: int, lr: float, *, where: str = "") -> np.ndarray:
    W = np.array(W, dtype=float)
    for step in range(steps):
        _, g = loss_and_grad(W, X, y, kind)
        W = W - lr * g
        if not np.all(np.isfinite(W)):
            raise FloatingPointError(f"local update diverged at step {step}{where}")
    return W


def local_update(w: ModelVector, data: ClientDataset, steps: int, lr: float) -> ModelVector:
    """Full-batch gradient descent on the client's own data."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    X = w.spec.design(data)
    if X.shape[1] != w.weights.size:
        raise ValueError("model dimension does not match the data")
    out = local_update_batch(w.weights[None, :], X, data.targets, w.kind, steps, lr)[0]
    return ModelVector(out, w.kind, w.bias)


def average_models(W: np.ndarray) -> np.ndarray:
    """Mean over the client axis (second to last) of a stack of model vectors.

    Deviations from the first client are averaged and added back, so
    identical inputs come out unchanged bit for bit.
    """
    W = np.asarray(W, dtype=float)
    base = W[..., 0, :]
    return base + (W - base[..., None, :]).mean(axis=-2)


def fedavg_aggregate(models: Sequence) -> ModelVector | np.ndarray:
    """Coordinate-wise mean. Accepts ModelVectors or raw arrays."""
    models = list(models)
    if not models:
        raise ValueError("nothing to aggregate")
    raw = [m.weights if isinstance(m, ModelVector) else np.atleast_1d(np.asarray(m, dtype=float))
           for m in models]
    if len({r.shape for r in raw}) != 1:
        raise ValueError("models have mismatched dimensions")
    mean = average_models(np.stack(raw))
    first = models[0]
    return ModelVector(mean, first.kind, first.bias) if isinstance(first, ModelVector) else mean


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Per-client data generator.

    Regression clients draw ``y = x·w_k + b_k + noise``; classification clients
    draw two Gaussian clusters at ``±c_k``. Client parameters scatter around a
    shared centre by ``heterogeneity``.
    """

    kind: str = "regression"
    n_features: int = 1
    n_samples: int = 20
    noise: float = 0.5
    heterogeneity: float = 0.3
    separation: float = 1.0

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ValueError("task kind must be 'regression' or 'classification'")
        if self.n_features < 1 or self.n_samples < 1:
            raise ValueError("need at least one feature and one sample")

    @property
    def model_kind(self) -> str:
        return "linear-regression" if self.kind == "regression" else "logistic-regression"

    def client_parameters(self, k: int, rng: np.random.Generator) -> np.ndarray:
        base = rng.standard_normal(self.n_features + 1)
        return base[None, :] + self.heterogeneity * rng.standard_normal((k, self.n_features + 1))

    def sample(self, params: np.ndarray, rng: np.random.Generator, client_id: int = 0) -> ClientDataset:
        n, p = self.n_samples, self.n_features
        if self.kind == "regression":
            X = rng.standard_normal((n, p))
            y = X @ params[:p] + params[p] + self.noise * rng.standard_normal(n)
        else:
            y = (np.arange(n) % 2).astype(float)
            direction = params[:p] / max(np.linalg.norm(params[:p]), 1e-12)
            centre = self.separation * direction
            X = (2 * y[:, None] - 1) * centre[None, :] + self.noise * rng.standard_normal((n, p))
        return ClientDataset(X, y, client_id)


def load_csv_dataset(path, client_id: int = 0) -> ClientDataset:
    """CSV with a header row; every column but the last is a feature."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ClientDataset(data[:, :-1], data[:, -1], client_id)


# ---------------------------------------------------------------------------
# Utility
# ---------------------------------------------------------------------------

def utility_many(W, data: ClientDataset, spec: UtilitySpec, model: ModelSpec) -> np.ndarray:
    W = np.atleast_2d(np.asarray(W, dtype=float))
    X = model.design(data)
    z = W @ X.T
    if spec.kind == "clipped-regression":
        mse = np.mean((z - data.targets) ** 2, axis=-1)
        return 1.0 - np.minimum(1.0, mse / spec.tau)
    pred = (z >= 0).astype(float)
    return np.mean(pred == (data.targets > 0.5), axis=-1)


def utility(w: ModelVector, data: ClientDataset, spec: UtilitySpec) -> float:
    """Accuracy, or 1 − min(1, MSE/τ); always in [0, 1]."""
    return float(utility_many(w.weights[None, :], data, spec, w.spec)[0])


def mean_utility(W, datasets: Sequence[ClientDataset], spec: UtilitySpec, model: ModelSpec) -> np.ndarray:
    """Ū(w) = (1/K)·Σ_k U_k(w) for each row of W."""
    acc = np.zeros(np.atleast_2d(W).shape[0])
    for data in datasets:
        acc = acc + utility_many(W, data, spec, model)
    return acc / len(datasets)


# ---------------------------------------------------------------------------
# Empirical distributions over model vectors
# ---------------------------------------------------------------------------

class EmpiricalModelDist:
    """Weighted point set of model vectors.

    Plain trial samples carry uniform weights. Discretised Gaussians carry
    cell masses at cell centres. ``space`` separates plaintext model vectors
    from ciphertext releases, which share no support with them.
    """

    def __init__(self, points, weights=None, *, space: str = "plaintext", label: str = ""):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("distribution has no samples")
        if weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
            self.uniform = True
        else:
            w = np.asarray(weights, dtype=float).reshape(-1)
            if w.size != pts.shape[0] or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be nonnegative, one per point, with positive sum")
            w = w / w.sum()
            self.uniform = False
        self.points = pts
        self.weights = w
        self.space = space
        self.label = label

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def variances(self) -> np.ndarray:
        mu = self.mean()
        n = len(self)
        var = self.weights @ (self.points - mu) ** 2
        if self.uniform and n > 1:
            var = var * n / (n - 1)
        return var

    def fit_gaussian(self, var_floor: float = VAR_FLOOR) -> DiagGaussian:
        if len(self) < 2:
            raise ValueError("need at least 2 samples to fit a Gaussian")
        return DiagGaussian(self.mean(), np.maximum(self.variances(), var_floor))

    def subset(self, idx) -> "EmpiricalModelDist":
        return EmpiricalModelDist(self.points[idx], None if self.uniform else self.weights[idx],
                                  space=self.space, label=self.label)


class Binning:
    """Tensor grid of equal-width bins; values outside are clipped to edge bins."""

    def __init__(self, edges: Sequence[np.ndarray]):
        self.edges = [np.asarray(e, dtype=float) for e in edges]
        self.shape = tuple(e.size - 1 for e in self.edges)

    @classmethod
    def from_box(cls, lo, hi, bins: int = 32) -> "Binning":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        edges = []
        for a, b in zip(lo, hi):
            if not b - a > 1e-12 * max(1.0, abs(a)):
                a, b = a - 0.5, b + 0.5
            edges.append(np.linspace(a, b, bins + 1))
        return cls(edges)

    @classmethod
    def shared(cls, *dists: EmpiricalModelDist, bins: int = 32) -> "Binning":
        pooled = np.vstack([d.points for d in dists])
        if pooled.shape[1] > 3:
            raise ValueError("histogram binning is limited to 3 dimensions; use the Gaussian path")
        return cls.from_box(pooled.min(axis=0), pooled.max(axis=0), bins)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    def cell_index(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        idx = [np.clip(np.searchsorted(e[1:-1], pts[:, i], side="right"), 0, e.size - 2)
               for i, e in enumerate(self.edges)]
        return np.ravel_multi_index(idx, self.shape)

    def histogram(self, dist: EmpiricalModelDist) -> np.ndarray:
        return np.bincount(self.cell_index(dist.points), weights=dist.weights,
                           minlength=self.n_cells)

    def centers(self) -> np.ndarray:
        mids = [0.5 * (e[:-1] + e[1:]) for e in self.edges]
        grids = np.meshgrid(*mids, indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def gaussian_masses(self, g: DiagGaussian) -> np.ndarray:
        """Exact cell probabilities; the tails fold into the edge cells."""
        per_dim = []
        for i, e in enumerate(self.edges):
            z = (e - g.mean[i]) / g.std[i]
            cdf = ndtr(z)
            cdf[0], cdf[-1] = 0.0, 1.0
            per_dim.append(np.diff(cdf))
        mass = per_dim[0]
        for m in per_dim[1:]:
            mass = np.multiply.outer(mass, m).reshape(-1)
        return mass / mass.sum()

    def discretize(self, g: DiagGaussian, *, label: str = "") -> EmpiricalModelDist:
        return EmpiricalModelDist(self.centers(), self.gaussian_masses(g), label=label)


def tv_empirical(p: EmpiricalModelDist, q: EmpiricalModelDist, *,
                 binning: Binning | None = None, bins: int = 32) -> DistanceResult:
    """Histogram TV on shared bins; releases in different spaces are disjoint."""
    if p.space != q.space:
        return DistanceResult(1.0, "exact-sum")
    if binning is None:
        binning = Binning.shared(p, q, bins=bins)
    return tv_discrete(binning.histogram(p), binning.histogram(q))


def tv_any(p, q, bins: int = 32) -> float:
    if isinstance(p, DiagGaussian):
        return tv_gaussian(p, q).value
    return tv_empirical(p, q, bins=bins).value


# ---------------------------------------------------------------------------
# Utility loss, Δ and γ
# ---------------------------------------------------------------------------

def utility_loss(dist_O_agg: EmpiricalModelDist, dist_S_agg: EmpiricalModelDist,
                 datasets: Sequence[ClientDataset], spec: UtilitySpec, model: ModelSpec) -> float:
    """ε_u = (1/K)·Σ_k [Û_k(P_a^O) − Û_k(P_a^S)], unclipped."""
    if len(dist_O_agg) != len(dist_S_agg):
        raise ValueError("aggregate distributions have different sample counts")
    diffs = []
    for data in datasets:
        uo = dist_O_agg.weights @ utility_many(dist_O_agg.points, data, spec, model)
        us = dist_S_agg.weights @ utility_many(dist_S_agg.points, data, spec, model)
        diffs.append(float(uo - us))
    return math.fsum(diffs) / len(diffs)


class NoNearOptimalGap(ValueError):
    """No positive Δ keeps the near-optimal mass under TV/2."""


@dataclass(frozen=True)
class DeltaResult:
    delta: float
    u_star: float
    tv: float


def estimate_u_star(dists: Sequence[EmpiricalModelDist], datasets: Sequence[ClientDataset],
                    spec: UtilitySpec, model: ModelSpec, *, polish_steps: int = 200,
                    lr: float = 0.1) -> float:
    """Best Ū over all observed aggregates, improved by a gradient-descent polish."""
    pts = np.vstack([d.points for d in dists])
    u = mean_utility(pts, datasets, spec, model)
    best = pts[int(np.argmax(u))]
    X = np.vstack([model.design(d) for d in datasets])
    y = np.concatenate([d.targets for d in datasets])
    try:
        polished = local_update_batch(best[None, :], X, y, model.kind, polish_steps, lr)
        u_pol = float(mean_utility(polished, datasets, spec, model)[0])
    except FloatingPointError:
        u_pol = -math.inf
    return max(float(u.max()), u_pol)


def compute_delta(dist_S_agg: EmpiricalModelDist, datasets: Sequence[ClientDataset],
                  spec: UtilitySpec, model: ModelSpec, tv: float, u_star: float,
                  tol: float = 1e-9) -> DeltaResult:
    """Largest Δ with P_a^S{w : |u* − Ū(w)| ≤ Δ} ≤ TV/2, by bisection."""
    gaps = np.abs(u_star - mean_utility(dist_S_agg.points, datasets, spec, model))
    return delta_from_gaps(gaps, dist_S_agg.weights, tv, u_star, tol)


def delta_from_gaps(gaps, weights, tv: float, u_star: float = math.nan,
                    tol: float = 1e-9) -> DeltaResult:
    gaps = np.asarray(gaps, dtype=float)
    weights = np.asarray(weights, dtype=float)
    budget = 0.5 * tv

    def feasible(delta: float) -> bool:
        return float(weights[gaps <= delta].sum()) <= budget

    if tv <= 0 or not feasible(0.0):
        raise NoNearOptimalGap("near-optimal mass exceeds TV/2 as Δ → 0")
    lo, hi = 0.0, float(gaps.max())
    if feasible(hi):
        return DeltaResult(hi, u_star, tv)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return DeltaResult(lo, u_star, tv)


@dataclass(frozen=True)
class GammaResult:
    mean_ratio: float
    sum_ratio: float
    tv_clients: tuple
    tv_aggregate: float


def gamma_from_tv(tv_clients: Sequence[float], tv_aggregate: float) -> GammaResult:
    tv_clients = tuple(float(t) for t in tv_clients)
    if tv_aggregate <= 0:
        raise ValueError("aggregate TV is zero; γ is undefined")
    total = math.fsum(tv_clients)
    return GammaResult(total / len(tv_clients) / tv_aggregate, total / tv_aggregate,
                       tv_clients, float(tv_aggregate))


def compute_gamma(dists_O: Sequence, dists_S: Sequence, agg_O, agg_S, bins: int = 32) -> GammaResult:
    """γ̂ = mean client TV over aggregate TV; also the sum-over-clients form."""
    if len(dists_O) != len(dists_S) or not dists_O:
        raise ValueError("need matching, non-empty client distribution lists")
    tvs = [tv_any(o, s, bins) for o, s in zip(dists_O, dists_S)]
    return gamma_from_tv(tvs, tv_any(agg_O, agg_S, bins))


# ---------------------------------------------------------------------------
# Federation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoundTrace:
    round: int
    loss_mean: float
    grad_norm_mean: float


@dataclass
class FederationConfig:
    datasets: list
    model: ModelSpec = field(default_factory=ModelSpec)
    mechanism: object = field(default_factory=prot.NoOp)
    rounds: int = 50
    trials: int = 64
    seed: int = 0
    local_steps: int = 1
    lr: float = 0.1
    init_scale: float = 1.0
    protect_every_round: bool = False

    def __post_init__(self):
        if len(self.datasets) < 1:
            raise ValueError("need at least one client")
        if self.trials < 2:
            raise ValueError("trials must be >= 2")
        if self.rounds < 1 or self.local_steps < 1:
            raise ValueError("rounds and local_steps must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class FederationResult:
    traces: list
    dist_O: list
    dist_S: list
    agg_O: EmpiricalModelDist
    agg_S: EmpiricalModelDist
    final_global: np.ndarray
    quantization_error: float = 0.0


def trial_streams(seed: int, trials: int) -> list[tuple[np.random.Generator, np.random.Generator]]:
    """(init stream, mechanism stream) per trial, spawned from the master seed."""
    out = []
    for child in np.random.SeedSequence(seed).spawn(trials):
        a, b = child.spawn(2)
        out.append((np.random.default_rng(a), np.random.default_rng(b)))
    return out


def needs_fixed_point(mech) -> bool:
    return isinstance(mech, (prot.SecretSharing, prot.ToyHE))


def apply_mechanism(mech, W: np.ndarray, rng: np.random.Generator):
    """Protect one round of client vectors ``W`` (K, n).

    Returns per-client releases, the server's aggregate and the release space.
    """
    k = W.shape[0]
    if isinstance(mech, prot.NoOp):
        return W.copy(), fedavg_aggregate(W), "plaintext"
    if isinstance(mech, prot.Randomization):
        rel = np.stack([prot.randomize(w, mech.sigma, rng) for w in W])
        return rel, fedavg_aggregate(rel), "plaintext"
    if isinstance(mech, prot.Sparsity):
        rel = np.stack([prot.sparsify(w, mech, rng) for w in W])
        return rel, fedavg_aggregate(rel), "plaintext"
    if isinstance(mech, prot.SecretSharing):
        res = prot.secret_share(W, mech, rng)
        # secret_share has verified the ring total equals the integer sum, so
        # averaging the inputs gives the same value with the same rounding
        return res.uploads, fedavg_aggregate(W), "plaintext"
    if isinstance(mech, prot.ToyHE):
        key = prot.he_keygen(mech, rng)
        n = W.shape[1]
        ints = prot.encode_fixed(W, mech)
        cts = [[prot.Ciphertext(c, mech, mech.error_bound)
                for c in prot.encrypt_batch(ints[i], key, rng)] for i in range(k)]
        summed = [prot.he_sum([cts[i][j] for i in range(k)]) for j in range(n)]
        if mech.key_known:
            rel = np.stack([prot.decode_fixed(prot.decrypt_batch(np.stack([c.matrix for c in row]), key), mech)
                            for row in cts])
            agg = prot.decode_fixed(prot.decrypt_batch(np.stack([c.matrix for c in summed]), key), mech) / k
            return rel, agg, "plaintext"
        rel = np.array([[prot.ciphertext_as_weights(c) for c in row] for row in cts])
        agg = np.array([prot.ciphertext_as_weights(c) for c in summed]) / k
        return rel, agg, "ciphertext"
    raise TypeError(f"unsupported mechanism {mech!r}")


def _global_stats(Wg, designs, targets, kind):
    loss = np.zeros(Wg.shape[0])
    grad = np.zeros_like(Wg)
    for X, y in zip(designs, targets):
        l, g = loss_and_grad(Wg, X, y, kind)
        loss, grad = loss + l, grad + g
    k = len(designs)
    return loss / k, np.linalg.norm(grad / k, axis=1)


def run_federation(config: FederationConfig) -> FederationResult:
    """Run T trials of R FedAvg rounds; protect the final-round releases.

    The unprotected trajectory produces W^O. By default the mechanism is
    applied to the last-round local models, so W^S = M(W^O) trial by trial
    and P^O does not depend on the mechanism. With ``protect_every_round``
    a second trajectory aggregates protected uploads in every round.
    """
    cfg = config
    model = cfg.model
    designs = [model.design(d) for d in cfg.datasets]
    targets = [d.targets for d in cfg.datasets]
    k = len(designs)
    n = designs[0].shape[1]
    if any(X.shape[1] != n for X in designs):
        raise ValueError("clients disagree on the feature dimension")
    streams = trial_streams(cfg.seed, cfg.trials)
    W0 = np.stack([rng.normal(0.0, cfg.init_scale, n) for rng, _ in streams])
    mech = cfg.mechanism
    fixed = needs_fixed_point(mech)

    def local_round(Wg, r):
        out = [local_update_batch(Wg, X, y, model.kind, cfg.local_steps, cfg.lr,
                                  where=f" (round {r}, client {i})")
               for i, (X, y) in enumerate(zip(designs, targets))]
        return np.stack(out, axis=1)          # (T, K, n)

    traces = []
    Wg = W0
    local = None
    for r in range(cfg.rounds):
        local = local_round(Wg, r)
        Wg = average_models(local)
        loss, gnorm = _global_stats(Wg, designs, targets, model.kind)
        traces.append(RoundTrace(r, float(loss.mean()), float(gnorm.mean())))

    W_O = local
    qerr = 0.0
    if fixed:
        Wq = prot.quantize(W_O, mech.scale)
        qerr = float(np.max(np.abs(Wq - W_O)))
        W_O = Wq

    rel = np.empty_like(W_O)
    agg = np.empty((cfg.trials, n))
    space = "plaintext"
    if cfg.protect_every_round and not isinstance(mech, prot.NoOp):
        Wg_s = W0
        for r in range(cfg.rounds):
            loc = local_round(Wg_s, r)
            if fixed:
                loc = prot.quantize(loc, mech.scale)
            for t, (_, mrng) in enumerate(streams):
                try:
                    rel[t], agg[t], space = apply_mechanism(mech, loc[t], mrng)
                except (prot.HEErrorBudgetExceeded, prot.FixedPointOverflow) as exc:
                    raise RuntimeError(f"mechanism failed at trial {t}, round {r}: {exc}") from exc
            Wg_s = agg.copy() if space == "plaintext" else average_models(loc)
    else:
        for t, (_, mrng) in enumerate(streams):
            try:
                rel[t], agg[t], space = apply_mechanism(mech, W_O[t], mrng)
            except (prot.HEErrorBudgetExceeded, prot.FixedPointOverflow) as exc:
                raise RuntimeError(
                    f"mechanism failed at trial {t}, round {cfg.rounds - 1}: {exc}") from exc

    agg_O = average_models(W_O)
    dist_O = [EmpiricalModelDist(W_O[:, i], label=f"O/client{i}") for i in range(k)]
    dist_S = [EmpiricalModelDist(rel[:, i], space=space, label=f"S/client{i}") for i in range(k)]
    return FederationResult(
        traces=traces,
        dist_O=dist_O,
        dist_S=dist_S,
        agg_O=EmpiricalModelDist(agg_O, label="O/aggregate"),
        agg_S=EmpiricalModelDist(agg, label="S/aggregate"),
        final_global=Wg,
        quantization_error=qerr,
    )
