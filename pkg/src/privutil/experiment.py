"""From a federation run to a :class:`TradeoffReport`.

Release distributions are discretised onto a shared tensor grid and beliefs
are computed at the cell centres, so every belief and every TV term refers to
the same discrete measures. Two ways to obtain the cell masses:

* ``empirical``: histograms of the simulated trial samples. The statistical
  tolerance comes from batch means over trial subsets.
* ``parametric``: a Gaussian fitted to the unprotected samples, with the
  protected law derived from it analytically; cell masses are exact normal
  probabilities, so no sampling error enters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import protection as prot
from .belief import (CandidateUniverse, GaussianEmission, covering_box,
                     log_posterior_matrix, max_log_ratio, sobol_grid)
from .bounds import TradeoffReport, tradeoff_constants
from .divergence import DiagGaussian, sqrt_js, tv_discrete, tv_gaussian
from .flsim import (Binning, NoNearOptimalGap, ClientDataset, EmpiricalModelDist,
                    FederationResult, ModelSpec, SyntheticTask, UtilitySpec, compute_delta,
                    estimate_u_star, gamma_from_tv, local_update_batch, utility_loss)

PATHS = ("empirical", "parametric")


@dataclass
class PrivacySetup:
    """Per-client candidate universes with their release likelihoods."""
    universes: list
    likelihoods: list
    sigma_obs: float


def draw_alternates(task: SyntheticTask, params: np.ndarray, n_candidates: int,
                    rng: np.random.Generator) -> list[list[ClientDataset]]:
    """``n_candidates − 1`` alternative datasets per client from the client's own generator."""
    return [[task.sample(params[k], rng, client_id=k) for _ in range(n_candidates - 1)]
            for k in range(params.shape[0])]


def build_privacy_setup(datasets: Sequence[ClientDataset], alternates: Sequence[Sequence[ClientDataset]],
                        model: ModelSpec, w_ref: np.ndarray, *, local_steps: int, lr: float,
                        sigma_obs: float = 0.1, cap: int = 64) -> PrivacySetup:
    """The true dataset sits at index 0 of each universe.

    A candidate's emission mean is the local model it would produce from the
    reference global model ``w_ref``.
    """
    universes, likelihoods = [], []
    for data, alts in zip(datasets, alternates):
        cands = [data, *alts]
        means = np.stack([local_update_batch(w_ref[None, :], model.design(d), d.targets, model.kind,
                                             local_steps, lr)[0] for d in cands])
        universes.append(CandidateUniverse(cands, cap=cap))
        likelihoods.append(GaussianEmission(means, sigma_obs))
    return PrivacySetup(universes, likelihoods, sigma_obs)


# ---------------------------------------------------------------------------
# Parametric laws of protected releases
# ---------------------------------------------------------------------------

def protected_gaussian(mech, g: DiagGaussian, n_avg: int = 1) -> DiagGaussian:
    """Law of the protected release given a Gaussian unprotected law.

    ``n_avg`` is the number of independently protected vectors averaged into
    the release (1 for a client upload, K for the server aggregate).
    """
    if isinstance(mech, prot.NoOp):
        return g
    if isinstance(mech, prot.Randomization):
        if mech.sigma == 0:
            return g
        return DiagGaussian(g.mean, g.variances + mech.sigma ** 2 / n_avg)
    if isinstance(mech, prot.Sparsity):
        d = mech.d
        if d > g.dim:
            raise ValueError("sparsity keeps more coordinates than the model has")
        if d == g.dim:
            return g
        mu_g = np.asarray(mech.mu_g, dtype=float)
        var_g = np.asarray(mech.var_g, dtype=float)
        return DiagGaussian(np.concatenate([g.mean[:d], mu_g]),
                            np.concatenate([g.variances[:d], var_g / n_avg]))
    raise ValueError(f"no Gaussian law for {prot.mechanism_label(mech)}; use the empirical path")


# ---------------------------------------------------------------------------
# Belief bookkeeping on a binning
# ---------------------------------------------------------------------------

@dataclass
class _ClientCells:
    binning: Binning
    post: np.ndarray            # (cells, M) posterior at cell centres
    log_prior: np.ndarray
    prior: np.ndarray
    xi: float
    dp_spread: float


def _client_cells(binning: Binning, universe: CandidateUniverse, likelihood, grid_size: int) -> _ClientCells:
    centers = binning.centers()
    lo = np.array([e[0] for e in binning.edges])
    hi = np.array([e[-1] for e in binning.edges])
    lp_cells = log_posterior_matrix(centers, universe, likelihood)
    lp = np.vstack([lp_cells, log_posterior_matrix(sobol_grid(lo, hi, grid_size), universe, likelihood)])
    xi = max_log_ratio(lp, universe.log_prior)
    spread = float(np.max(lp.max(axis=0) - lp.min(axis=0)))
    post = np.exp(lp_cells)
    post /= post.sum(axis=1, keepdims=True)
    return _ClientCells(binning, post, universe.log_prior, universe.prior.mass, xi, spread)


def _belief(cells: _ClientCells, masses: np.ndarray) -> np.ndarray:
    f = masses @ cells.post
    return f / f.sum()


@dataclass
class _ClientTerms:
    f_O: np.ndarray
    f_A: np.ndarray
    eps_p: float
    c1: float
    tv: float


def _terms(cells: _ClientCells, m_O: np.ndarray, m_S: np.ndarray | None) -> _ClientTerms:
    """``m_S`` None marks releases with no plaintext support (unknown-key ciphertexts)."""
    f_O = _belief(cells, m_O)
    if m_S is None:
        f_A, tv = cells.prior.copy(), 1.0
    else:
        f_A, tv = _belief(cells, m_S), tv_discrete(m_O, m_S).value
    return _ClientTerms(f_O, f_A, sqrt_js(f_A, cells.prior), sqrt_js(f_O, cells.prior), tv)


def _box_of(*dists: EmpiricalModelDist):
    pooled = np.vstack([d.points for d in dists])
    return pooled.min(axis=0), pooled.max(axis=0)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvaluationContext:
    datasets: list
    model: ModelSpec
    utility: UtilitySpec
    mechanism: object
    setup: PrivacySetup
    path: str = "empirical"
    bins: int = 32
    grid_size: int = 4096
    batches: int = 10
    seed: int = 0
    config_hash: str = ""
    polish_steps: int = 200
    lr: float = 0.1


def evaluate(result: FederationResult, ctx: EvaluationContext) -> TradeoffReport:
    if ctx.path not in PATHS:
        raise ValueError(f"path must be one of {PATHS}")
    if ctx.path == "parametric":
        return _evaluate_parametric(result, ctx)
    return _evaluate_empirical(result, ctx)


def _aggregate_terms(agg_O: EmpiricalModelDist, agg_S: EmpiricalModelDist, tv_a: float,
                     ctx: EvaluationContext) -> dict:
    eps_u = utility_loss(agg_O, agg_S, ctx.datasets, ctx.utility, ctx.model)
    u_star = estimate_u_star([agg_O, agg_S], ctx.datasets, ctx.utility, ctx.model,
                             polish_steps=ctx.polish_steps, lr=ctx.lr)
    try:
        delta = compute_delta(agg_S, ctx.datasets, ctx.utility, ctx.model, tv_a, u_star).delta
        status = "ok" if delta > 0 else "no-positive-gap"
        if delta <= 0:
            delta = None
    except NoNearOptimalGap:
        delta, status = None, "no-positive-gap"
    return {"eps_u": eps_u, "u_star": u_star, "delta": delta, "delta_status": status}


def _assemble(ctx: EvaluationContext, terms: list[_ClientTerms], cells: list[_ClientCells],
              tv_a: float, agg: dict, eps_stat: dict, result: FederationResult,
              parametric: dict | None) -> TradeoffReport:
    k = len(terms)
    xi = max(c.xi for c in cells)
    gamma = gamma_sum = None
    if tv_a > 0:
        g = gamma_from_tv([t.tv for t in terms], tv_a)
        gamma, gamma_sum = g.mean_ratio, g.sum_ratio
    consts = tradeoff_constants(xi, gamma, agg["delta"])
    return TradeoffReport(
        mechanism=ctx.mechanism.to_dict(),
        mechanism_id=prot.mechanism_label(ctx.mechanism),
        path=ctx.path,
        n_clients=k,
        dim=int(result.agg_O.dim),
        seed=int(ctx.seed),
        config_hash=ctx.config_hash,
        eps_p_clients=[t.eps_p for t in terms],
        eps_p=math.fsum(t.eps_p for t in terms) / k,
        c1_clients=[t.c1 for t in terms],
        c1=math.fsum(t.c1 for t in terms) / k,
        eps_u=agg["eps_u"],
        tv_clients=[t.tv for t in terms],
        tv_aggregate=tv_a,
        xi=xi,
        c3=consts["c3"],
        c4=ctx.utility.c4,
        prior=[c.prior.tolist() for c in cells],
        belief_A=[t.f_A.tolist() for t in terms],
        belief_O=[t.f_O.tolist() for t in terms],
        delta=agg["delta"],
        delta_status=agg["delta_status"],
        u_star=agg["u_star"],
        gamma=gamma,
        gamma_sum=gamma_sum,
        c2=consts["c2"],
        eps_stat=eps_stat,
        dp_max_log_ratio=max(c.dp_spread for c in cells),
        dp_bound=2.0 * xi,
        quantization_error=result.quantization_error,
        parametric=parametric,
    )


def _evaluate_empirical(result: FederationResult, ctx: EvaluationContext) -> TradeoffReport:
    setup = ctx.setup
    cells, terms, idx_O, idx_S = [], [], [], []
    for k, (dO, dS) in enumerate(zip(result.dist_O, result.dist_S)):
        plain = dS.space == dO.space
        binning = Binning.from_box(*(_box_of(dO, dS) if plain else _box_of(dO)), bins=ctx.bins)
        c = _client_cells(binning, setup.universes[k], setup.likelihoods[k], ctx.grid_size)
        m_O = binning.histogram(dO)
        m_S = binning.histogram(dS) if plain else None
        cells.append(c)
        terms.append(_terms(c, m_O, m_S))
        idx_O.append(binning.cell_index(dO.points))
        idx_S.append(binning.cell_index(dS.points) if plain else None)

    agg_O, agg_S = result.agg_O, result.agg_S
    agg_bins = Binning.from_box(*_box_of(agg_O, agg_S), bins=ctx.bins)
    tv_a = tv_discrete(agg_bins.histogram(agg_O), agg_bins.histogram(agg_S)).value
    agg = _aggregate_terms(agg_O, agg_S, tv_a, ctx)

    eps_stat = _batch_tolerances(result, ctx, cells, idx_O, idx_S, agg, terms, tv_a)
    return _assemble(ctx, terms, cells, tv_a, agg, eps_stat, result, None)


def _batch_tolerances(result, ctx, cells, idx_O, idx_S, agg, terms, tv_a) -> dict:
    """3 × standard error of batch means for each estimated quantity."""
    trials = len(result.agg_O)
    nb = min(ctx.batches, trials // 2)
    if nb < 2:
        return {}
    xi = max(c.xi for c in cells)
    e = tradeoff_constants(xi, None, None)["c3"] * 2.0
    c2 = None
    if agg["delta"] is not None and tv_a > 0:
        g = gamma_from_tv([t.tv for t in terms], tv_a)
        c2 = tradeoff_constants(xi, g.mean_ratio, agg["delta"])["c2"]
    rows = []
    for b in np.array_split(np.arange(trials), nb):
        eps_p, c1, tvs = [], [], []
        for c, io, i_s in zip(cells, idx_O, idx_S):
            m_O = np.bincount(io[b], minlength=c.binning.n_cells) / b.size
            m_S = None if i_s is None else np.bincount(i_s[b], minlength=c.binning.n_cells) / b.size
            t = _terms(c, m_O, m_S)
            eps_p.append(t.eps_p)
            c1.append(t.c1)
            tvs.append(t.tv)
        ep, cc = np.mean(eps_p), np.mean(c1)
        eu = utility_loss(result.agg_O.subset(b), result.agg_S.subset(b),
                          ctx.datasets, ctx.utility, ctx.model)
        rows.append((ep + 0.5 * e * np.mean(tvs) - cc,
                     (ep + c2 * eu - cc) if c2 is not None else 0.0,
                     ep - cc, eu, cc))
    rows = np.array(rows)
    se = 3.0 * rows.std(axis=0, ddof=1) / math.sqrt(nb)
    return dict(zip(("nfl_tv", "nfl_utility", "leakage_gap", "eps_u", "c1"), map(float, se)))


def _evaluate_parametric(result: FederationResult, ctx: EvaluationContext) -> TradeoffReport:
    setup, mech = ctx.setup, ctx.mechanism
    k = len(result.dist_O)
    if result.agg_O.dim > 3:
        raise ValueError("cell grids are limited to 3 dimensions")
    cells, terms = [], []
    g_clients_O, g_clients_S = [], []
    for i, dO in enumerate(result.dist_O):
        gO = dO.fit_gaussian()
        gS = protected_gaussian(mech, gO)
        binning = Binning.from_box(*covering_box(gO, gS), bins=ctx.bins)
        c = _client_cells(binning, setup.universes[i], setup.likelihoods[i], ctx.grid_size)
        cells.append(c)
        terms.append(_terms(c, binning.gaussian_masses(gO), binning.gaussian_masses(gS)))
        g_clients_O.append(gO)
        g_clients_S.append(gS)

    gaO = result.agg_O.fit_gaussian()
    gaS = protected_gaussian(mech, gaO, n_avg=k)
    agg_bins = Binning.from_box(*covering_box(gaO, gaS), bins=ctx.bins)
    agg_O = agg_bins.discretize(gaO, label="O/aggregate")
    agg_S = agg_bins.discretize(gaS, label="S/aggregate")
    tv_a = tv_discrete(agg_O.weights, agg_S.weights).value
    agg = _aggregate_terms(agg_O, agg_S, tv_a, ctx)

    gamma_gauss = None
    tv_ga = tv_gaussian(gaO, gaS).value
    if tv_ga > 0:
        tv_gc = [tv_gaussian(o, s).value for o, s in zip(g_clients_O, g_clients_S)]
        gamma_gauss = math.fsum(tv_gc) / k / tv_ga
    parametric = {
        "client_mean_O": [g.mean.tolist() for g in g_clients_O],
        "client_var_O": [g.variances.tolist() for g in g_clients_O],
        "agg_mean_O": gaO.mean.tolist(),
        "agg_var_O": gaO.variances.tolist(),
        "gamma_gaussian": gamma_gauss,
    }
    # exact cell masses: only floating-point rounding separates the two sides
    eps_stat = {name: 0.0 for name in ("nfl_tv", "nfl_utility", "leakage_gap", "eps_u", "c1")}
    return _assemble(ctx, terms, cells, tv_a, agg, eps_stat, result, parametric)
