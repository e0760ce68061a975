"""Inference attacks: gradient inversion, model inversion, key brute force.

The optimisation attacks minimise ``‖observed − predicted(d)‖² + λ·penalty(d)``
by gradient descent with Armijo backtracking. The smoothness penalty is a
smoothed total variation of the feature vector; the label prior pins the
target to a known value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import protection as prot
from .belief import CandidateUniverse, GaussianEmission, log_posterior_matrix

KINDS = ("gradient-inversion", "model-inversion", "brute-force")
PRIORS = ("none", "smoothness", "label")
ARMIJO = 1e-4
TV_SMOOTHING = 1e-6
MIN_STEP = 1e-20
STALL_RTOL = 1e-15


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "gradient-inversion"
    prior: str = "none"
    step_size: float = 1.0
    max_iters: int = 2000
    tol: float = 1e-8
    weight: float = 0.0
    restarts: int = 4
    restart_scale: float = 1.0
    seed: int = 0
    label: float | None = None
    keyspace: object | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attack kind must be one of {KINDS}")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.weight < 0:
            raise ValueError("prior weight must be nonnegative")
        if self.max_iters < 0 or self.restarts < 1 or not self.step_size > 0:
            raise ValueError("need max_iters >= 0, restarts >= 1 and a positive step size")
        if self.prior == "label" and self.label is None:
            raise ValueError("the label prior needs the known label")
        if self.kind == "brute-force" and self.keyspace is None:
            raise ValueError("brute force needs a finite key space")


@dataclass
class AttackResult:
    recovered: object
    loss: float
    iterations: int
    converged: bool
    details: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Model context
# ---------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class ModelContext:
    """Known model weights, one row per observed model; data are single points."""

    weights: np.ndarray
    kind: str = "linear-regression"
    bias: bool = True

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if not np.all(np.isfinite(W)):
            raise ValueError("model weights must be finite")
        object.__setattr__(self, "weights", W)

    @property
    def n_features(self) -> int:
        return self.weights.shape[1] - int(self.bias)

    def design(self, x: np.ndarray) -> np.ndarray:
        return np.append(x, 1.0) if self.bias else np.asarray(x, dtype=float)

    def _link(self, z):
        if self.kind == "linear-regression":
            return z, np.ones_like(z)
        s = _sigmoid(z)
        return s, s * (1 - s)

    def output(self, x) -> np.ndarray:
        return self._link(self.weights @ self.design(x))[0]

    def output_jacobian(self, x) -> np.ndarray:
        """d output / d x, shape (models, features)."""
        _, dlink = self._link(self.weights @ self.design(x))
        return dlink[:, None] * self.weights[:, : self.n_features]

    def gradient(self, x, y) -> np.ndarray:
        """Per-sample loss gradient w.r.t. the weights, stacked over models."""
        xt = self.design(x)
        r = self._link(self.weights @ xt)[0] - y
        return (r[:, None] * xt[None, :]).reshape(-1)

    def gradient_jacobian(self, x, y):
        """d gradient / d x (rows stacked over models) and d gradient / d y."""
        xt = self.design(x)
        out, dlink = self._link(self.weights @ xt)
        r = out - y
        p = self.n_features
        m, n = self.weights.shape
        jx = (dlink[:, None, None] * xt[None, :, None] * self.weights[:, None, :p]
              + r[:, None, None] * np.eye(n, p)[None])
        jy = -np.broadcast_to(xt, (m, n))
        return jx.reshape(m * n, p), jy.reshape(-1)


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

def smoothed_tv(x) -> tuple[float, np.ndarray]:
    """Σ sqrt((x_{i+1} − x_i)² + s²) − s and its gradient."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return 0.0, np.zeros_like(x)
    d = np.diff(x)
    r = np.sqrt(d * d + TV_SMOOTHING ** 2)
    g = np.zeros_like(x)
    q = d / r
    g[:-1] -= q
    g[1:] += q
    return float(np.sum(r - TV_SMOOTHING)), g


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass
class _Descent:
    x: np.ndarray
    loss: float
    iterations: int
    converged: bool
    history: list


def backtracking_descent(fun: Callable, x0, cfg: AttackConfig) -> _Descent:
    """Gradient descent with Armijo backtracking; losses of accepted steps never increase.

    The first trial step of each iteration is the Barzilai–Borwein step from
    the previous move, which is then halved until the Armijo condition holds.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    history = [f]
    step = cfg.step_size
    for it in range(cfg.max_iters):
        gn2 = float(g @ g)
        if math.sqrt(gn2) <= cfg.tol:
            return _Descent(x, f, it, True, history)
        t = step
        while True:
            xn = x - t * g
            fn, gnew = fun(xn)
            if np.isfinite(fn) and fn <= f - ARMIJO * t * gn2:
                break
            t *= 0.5
            if t < MIN_STEP:
                return _Descent(x, f, it, False, history)
        s_, y_ = xn - x, gnew - g
        sy = float(s_ @ y_)
        step = min(max(float(s_ @ s_) / sy, 1e-10), 1e10) if sy > 0 else cfg.step_size
        stalled = f - fn <= STALL_RTOL * max(1.0, abs(f))
        x, f, g = xn, fn, gnew
        history.append(f)
        if f <= cfg.tol ** 2:
            # residual fit is exact to working precision
            return _Descent(x, f, it + 1, True, history)
        if stalled:
            # no representable progress left; accept a near-stationary point
            gn = math.sqrt(float(g @ g))
            return _Descent(x, f, it + 1, gn <= math.sqrt(cfg.tol), history)
    gn = math.sqrt(float(g @ g))
    return _Descent(x, f, cfg.max_iters, gn <= cfg.tol, history)


def _restart_points(x0: np.ndarray, cfg: AttackConfig) -> list[np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    pts = [x0]
    for _ in range(cfg.restarts - 1):
        pts.append(x0 + cfg.restart_scale * rng.standard_normal(x0.shape))
    return pts


def _best_of(fun: Callable, x0: np.ndarray, cfg: AttackConfig) -> tuple[_Descent, int]:
    best, best_i = None, -1
    for i, start in enumerate(_restart_points(x0, cfg)):
        run = backtracking_descent(fun, start, cfg)
        # ties within tolerance keep the earlier restart
        if best is None or run.loss < best.loss - cfg.tol:
            best, best_i = run, i
    return best, best_i


def _prior_term(cfg: AttackConfig, x):
    if cfg.prior == "smoothness" and cfg.weight > 0:
        v, g = smoothed_tv(x)
        return cfg.weight * v, cfg.weight * g
    return 0.0, np.zeros_like(x)


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------

def gradient_inversion(G, context: ModelContext, cfg: AttackConfig, init=None) -> AttackResult:
    """Recover a data point (x, y) whose loss gradient matches ``G``.

    ``init`` is the starting data point: features, plus the label unless the
    label prior fixes it.
    """
    G = np.asarray(G, dtype=float).reshape(-1)
    if not np.all(np.isfinite(G)):
        raise ValueError("observed gradient must be finite")
    p = context.n_features
    if G.size != context.weights.size:
        raise ValueError("observed gradient does not match the model shape")
    fixed_label = cfg.prior == "label"

    def split(v):
        return (v, cfg.label) if fixed_label else (v[:p], v[p])

    def fun(v):
        x, y = split(v)
        res = context.gradient(x, y) - G
        jx, jy = context.gradient_jacobian(x, y)
        pv, pg = _prior_term(cfg, x)
        loss = float(res @ res) + pv
        gx = 2.0 * jx.T @ res + pg
        if fixed_label:
            return loss, gx
        return loss, np.append(gx, 2.0 * float(jy @ res))

    size = p if fixed_label else p + 1
    x0 = np.zeros(size) if init is None else np.asarray(init, dtype=float).reshape(size)
    run, idx = _best_of(fun, x0, cfg)
    x, y = split(run.x)
    rec = np.append(x, y)
    return AttackResult(rec, run.loss, run.iterations, run.converged,
                        {"restart": idx, "history": run.history})


def model_inversion(O, context: ModelContext, cfg: AttackConfig, init=None) -> AttackResult:
    """Recover features x whose model outputs match ``O``."""
    O = np.atleast_1d(np.asarray(O, dtype=float))
    if O.size != context.weights.shape[0]:
        raise ValueError("one observed output per model row is required")
    p = context.n_features

    def fun(x):
        res = context.output(x) - O
        pv, pg = _prior_term(cfg, x)
        return float(res @ res) + pv, 2.0 * context.output_jacobian(x).T @ res + pg

    x0 = np.zeros(p) if init is None else np.asarray(init, dtype=float).reshape(p)
    run, idx = _best_of(fun, x0, cfg)
    return AttackResult(run.x, run.loss, run.iterations, run.converged,
                        {"restart": idx, "history": run.history})


def brute_force_key(pair, keyspace: prot.KeySpace) -> AttackResult:
    """Scan the whole key space in its fixed order; report the first matching key.

    A key matches when it decrypts the ciphertext to the known plaintext with
    noise below q/4. The scan never stops early, so it always costs exactly
    ``len(keyspace)`` decryptions.
    """
    plaintext, ct = pair
    C = ct.matrix if isinstance(ct, prot.Ciphertext) else np.asarray(ct)
    params = keyspace.params
    target = int(prot.encode_fixed(plaintext, params))
    found, found_at, calls, matches = None, None, 0, 0
    for i, key in enumerate(keyspace):
        calls += 1
        if prot.decrypt_batch(C[None], key)[0] == target and prot.noise_consistent(C[None], key, target):
            matches += 1
            if found is None:
                found, found_at = key, i
    return AttackResult(found, 0.0 if found is not None else 1.0, calls, found is not None,
                        {"index": found_at, "decrypt_calls": calls, "matches": matches,
                         "scan_order": "lexicographic"})


@dataclass(frozen=True)
class ArgmaxResult:
    index: int
    candidate: object
    tie: bool


def attack_as_posterior_argmax(w_observed, universe: CandidateUniverse, likelihood) -> ArgmaxResult:
    """Posterior mode over the universe; ties go to the lowest index."""
    lp = log_posterior_matrix(np.asarray(w_observed)[None, ...] if np.ndim(w_observed) <= 1
                              else w_observed, universe, likelihood)[0]
    top = float(lp.max())
    winners = np.flatnonzero(lp >= top - 1e-12)
    i = int(winners[0])
    return ArgmaxResult(i, universe.candidates[i], winners.size > 1)


# ---------------------------------------------------------------------------
# Attacks under randomization
# ---------------------------------------------------------------------------

def algebraic_estimate(G, context: ModelContext, with_label: bool = False) -> np.ndarray:
    """Data point read off a single-model gradient with bias.

    The bias entry of the gradient is the residual r, so x = G_x / r and, for
    a linear model, y = w·x̃ − r. Falls back to zeros when the model has no
    bias or the residual vanishes.
    """
    G = np.asarray(G, dtype=float).reshape(context.weights.shape)[0]
    p = context.n_features
    if not context.bias or abs(G[p]) < 1e-12:
        x = np.zeros(p)
        return np.append(x, 0.0) if with_label else x
    x = G[:p] / G[p]
    if not with_label:
        return x
    out = context.output(x)[0]
    y = out - G[p] if context.kind == "linear-regression" else float(np.clip(out - G[p], 0.0, 1.0))
    return np.append(x, y)


def inversion_errors_under_noise(context: ModelContext, points, labels, sigmas, cfg: AttackConfig,
                                 seed: int = 0) -> np.ndarray:
    """Feature recovery error of gradient inversion when the gradient carries N(0, σ²) noise.

    Instance ``i`` uses the same standard-normal draw at every σ, so the
    errors across the sweep differ only by the noise scale. Each attack starts
    from the algebraic estimate. With ``cfg.prior == "label"`` the true label
    is given to the attacker. Returns an array of shape
    (len(sigmas), len(points)).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    labels = np.asarray(labels, dtype=float).reshape(-1)
    streams = np.random.SeedSequence(seed).spawn(len(points))
    z = np.stack([np.random.default_rng(s).standard_normal(context.weights.size) for s in streams])
    use_label = cfg.prior == "label"
    out = np.empty((len(sigmas), len(points)))
    for j, (x, y) in enumerate(zip(points, labels)):
        G = context.gradient(x, y)
        run_cfg = AttackConfig(**{**cfg.__dict__, "label": float(y) if use_label else cfg.label})
        for i, s in enumerate(sigmas):
            Gs = G + s * z[j]
            res = gradient_inversion(Gs, context, run_cfg,
                                     init=algebraic_estimate(Gs, context, with_label=not use_label))
            out[i, j] = float(np.linalg.norm(res.recovered[:-1] - x))
    return out


@dataclass(frozen=True)
class CrossCheck:
    argmax_index: int
    inversion_index: int
    tie: bool

    @property
    def agree(self) -> bool:
        return self.argmax_index == self.inversion_index


def argmax_cross_check(context: ModelContext, points, labels, observed_index: int,
                       sigma_obs: float = 0.1, cfg: AttackConfig | None = None) -> CrossCheck:
    """Compare the posterior mode with gradient inversion snapped to the nearest candidate.

    Candidates are the data points ``(points[i], labels[i])`` under a uniform
    prior; the release is the exact gradient of candidate ``observed_index``
    and the likelihood is Gaussian around each candidate's gradient.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    labels = np.asarray(labels, dtype=float).reshape(-1)
    grads = np.stack([context.gradient(x, y) for x, y in zip(points, labels)])
    universe = CandidateUniverse(list(range(len(points))))
    G = grads[observed_index]
    mode = attack_as_posterior_argmax(G, universe, GaussianEmission(grads, sigma_obs))
    cfg = cfg or AttackConfig()
    res = gradient_inversion(G, context, cfg, init=algebraic_estimate(G, context, with_label=True))
    cands = np.column_stack([points, labels])
    nearest = int(np.argmin(np.linalg.norm(cands - res.recovered[None, :], axis=1)))
    return CrossCheck(mode.index, nearest, mode.tie)
