"""Trade-off constants, inequality checks and the ε-constrained grid search.

Every check recomputes both sides of its inequality from the raw numeric
fields of a :class:`TradeoffReport`; stored slacks are never trusted.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .divergence import hellinger_h, js_discrete, sqrt_js

SCHEMA_VERSION = 1
FLOAT_ATOL = 1e-12          # rounding slack for inequalities that hold with equality
GAMMA_RANGE = (1.0 / 150.0, 150.0)


class SchemaError(ValueError):
    """A persisted object carries an unexpected schema version or fields."""


def expm1_2xi(xi: float) -> float:
    """e^{2ξ} − 1, or inf when it does not fit a double."""
    try:
        return math.expm1(2.0 * xi)
    except OverflowError:
        return math.inf


@dataclass
class TradeoffReport:
    mechanism: dict
    mechanism_id: str
    path: str
    n_clients: int
    dim: int
    seed: int
    config_hash: str
    eps_p_clients: list
    eps_p: float
    c1_clients: list
    c1: float
    eps_u: float
    tv_clients: list
    tv_aggregate: float
    xi: float
    c3: float
    c4: float
    prior: list                 # per client belief vectors
    belief_A: list
    belief_O: list
    delta: float | None = None
    delta_status: str = "ok"
    u_star: float | None = None
    gamma: float | None = None
    gamma_sum: float | None = None
    c2: float | None = None
    eps_stat: dict = field(default_factory=dict)
    dp_max_log_ratio: float = 0.0
    dp_bound: float = 0.0
    quantization_error: float = 0.0
    parametric: dict | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        consts = [self.eps_p, self.c1, self.eps_u, self.tv_aggregate, self.xi, self.c3, self.c4]
        consts += [v for v in (self.c2, self.delta, self.gamma) if v is not None]
        if not all(math.isfinite(v) for v in consts):
            raise ValueError("report constants must be finite; e^{2ξ} overflowed or a "
                             "measurement diverged (try a larger observation noise)")

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TradeoffReport":
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"report schema_version {version!r}, expected {SCHEMA_VERSION}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        missing = {f.name for f in dataclasses.fields(cls)
                   if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING} - set(data)
        if unknown or missing:
            raise SchemaError(f"report fields: unknown {sorted(unknown)}, missing {sorted(missing)}")
        return cls(**data)

    # -- derived -----------------------------------------------------------

    @property
    def e2xi(self) -> float:
        return expm1_2xi(self.xi)

    def eps_stat_of(self, name: str) -> float:
        return float(self.eps_stat.get(name, 0.0))


def tradeoff_constants(xi: float, gamma: float | None, delta: float | None) -> dict:
    e = expm1_2xi(xi)
    out = {"c3": 0.5 * e, "c4": 1.0, "c2": None, "c2_proof": None}
    if gamma is not None and delta is not None and delta > 0:
        out["c2"] = gamma * e / (4.0 * delta)
        out["c2_proof"] = gamma * e / delta
    return out


# ---------------------------------------------------------------------------
# Check results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    status: str          # pass | fail | skipped
    slack: float | None = None
    tolerance: float = 0.0
    gated: bool = True
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status != "fail"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _ineq(name: str, slack: float, tol: float = 0.0, gated: bool = True, detail: str = "") -> Check:
    ok = slack >= -(tol + FLOAT_ATOL)
    return Check(name, "pass" if ok else "fail", float(slack), float(tol), gated, detail)


def _flag(name: str, ok: bool, gated: bool = True, detail: str = "") -> Check:
    return Check(name, "pass" if ok else "fail", None, 0.0, gated, detail)


# ---------------------------------------------------------------------------
# Generic checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NFLCheck:
    tv_slack: float
    utility_slack: float | None
    utility_status: str
    passed: bool
    checks: tuple


def nfl_tv_rhs(report: TradeoffReport) -> float:
    e = report.e2xi
    terms = [0.5 * e * tv for tv in report.tv_clients]
    return report.eps_p + math.fsum(terms) / len(terms)


def check_nfl(report: TradeoffReport) -> NFLCheck:
    """C1 against the TV-weighted form and, where Δ > 0, the utility-weighted form."""
    tv_slack = nfl_tv_rhs(report) - report.c1
    tv_check = _ineq("nfl_tv", tv_slack, report.eps_stat_of("nfl_tv"))
    if report.delta is None or report.gamma is None or not report.delta > 0:
        util_check = Check("nfl_utility", "skipped", None, 0.0, False,
                           "skipped: no positive near-optimality gap")
        util_slack = None
    else:
        c2 = report.gamma * report.e2xi / (4.0 * report.delta)
        util_slack = report.eps_p + c2 * report.eps_u - report.c1
        util_check = _ineq("nfl_utility", util_slack, report.eps_stat_of("nfl_utility"),
                           detail=f"C2={c2:.6g}")
    return NFLCheck(tv_slack, util_slack, util_check.status,
                    tv_check.passed and util_check.passed, (tv_check, util_check))


def check_integrity(report: TradeoffReport) -> list[Check]:
    """Recompute leakage terms from the stored belief vectors."""
    out = []
    k = report.n_clients
    eps = [sqrt_js(a, b) for a, b in zip(report.belief_A, report.prior)]
    c1 = [sqrt_js(o, b) for o, b in zip(report.belief_O, report.prior)]
    ok = (len(eps) == k
          and np.allclose(eps, report.eps_p_clients, rtol=0, atol=1e-12)
          and np.allclose(c1, report.c1_clients, rtol=0, atol=1e-12)
          and abs(math.fsum(eps) / k - report.eps_p) <= 1e-12
          and abs(math.fsum(c1) / k - report.c1) <= 1e-12)
    out.append(_flag("leakage_consistency", ok, detail="ε_p and C1 recomputed from beliefs"))
    e = report.e2xi
    worst = math.inf
    for a, o, tv in zip(report.belief_A, report.belief_O, report.tv_clients):
        js = js_discrete(a, o).value
        worst = min(worst, 0.25 * e * e * tv * tv - js if math.isfinite(e) else math.inf)
    out.append(_ineq("js_tv_bound", worst, 1e-10))
    out.append(_ineq("bp_dp", report.dp_bound - report.dp_max_log_ratio, 0.0))
    return out


def check_utility_tv(report: TradeoffReport) -> list[Check]:
    """ε_u ≤ C4·TV_a always; ε_u ≥ (Δ/2)·TV_a reported where Δ exists."""
    out = [_ineq("utility_tv_upper", report.c4 * report.tv_aggregate - report.eps_u,
                 report.eps_stat_of("eps_u"))]
    if report.delta is not None:
        out.append(_ineq("utility_tv_lower", report.eps_u - 0.5 * report.delta * report.tv_aggregate,
                         report.eps_stat_of("eps_u"), gated=False,
                         detail="needs unprotected aggregates at the optimum"))
    return out


# ---------------------------------------------------------------------------
# Mechanism-specific checks
# ---------------------------------------------------------------------------

def _require(report: TradeoffReport, kind: str, parametric: bool):
    if report.mechanism.get("type") != kind:
        raise ValueError(f"expected a {kind} report, got {report.mechanism.get('type')!r}")
    if parametric and (report.path != "parametric" or not report.parametric):
        raise ValueError("this check needs the Gaussian (parametric) path; "
                         "use check_nfl for empirical runs")


def check_gamma_range(report: TradeoffReport) -> list[Check]:
    """γ̂ within [1/150, 150]; the Gaussian-law value is used when available."""
    g = (report.parametric or {}).get("gamma_gaussian")
    if g is None:
        g = report.gamma
    if g is None:
        return [Check("gamma_range", "skipped", None, 0.0, False, "aggregate TV is zero")]
    return [_flag("gamma_range", GAMMA_RANGE[0] <= g <= GAMMA_RANGE[1], detail=f"gamma={g:.6g}")]


def noise_scale_term(sigma: float, variances) -> float:
    """min{1, σ²·√Σᵢ σᵢ⁻⁴}."""
    v = np.asarray(variances, dtype=float)
    return min(1.0, sigma * sigma * math.sqrt(float(np.sum(v ** -2.0))))


def check_randomization(reports: Sequence[TradeoffReport]) -> list[list[Check]]:
    """Per-σ bounds for Gaussian randomization plus monotonicity of the bound terms."""
    if not reports:
        raise ValueError("empty sweep")
    for r in reports:
        _require(r, "randomization", parametric=True)
    sigmas = [float(r.mechanism["sigma"]) for r in reports]
    ref = reports[0].parametric
    xi_ref = max(r.xi for r in reports)
    c1_ref = max(r.c1 for r in reports)
    e_ref = expm1_2xi(xi_ref)
    out = []
    for r, s in zip(reports, sigmas):
        par = r.parametric
        m_clients = [noise_scale_term(s, v) for v in par["client_var_O"]]
        m_bar = math.fsum(m_clients) / len(m_clients)
        m_agg = noise_scale_term(s / math.sqrt(r.n_clients), par["agg_var_O"])
        e = r.e2xi
        checks = [
            _ineq("rand_privacy", r.eps_p + 0.75 * e * m_bar - r.c1, r.eps_stat_of("nfl_tv")),
            _ineq("rand_utility", r.c4 * m_bar - r.eps_u, r.eps_stat_of("eps_u")),
            _ineq("rand_utility_aggregate", 1.5 * r.c4 * m_agg - r.eps_u, r.eps_stat_of("eps_u"),
                  gated=False),
            _ineq("rand_privacy_averaged", r.eps_p + r.c3 / r.n_clients * m_bar - r.c1,
                  r.eps_stat_of("nfl_tv"), gated=False),
        ]
        if s == 0.0:
            checks.append(_flag("rand_zero_noise_utility", r.eps_u == 0.0))
            checks.append(_ineq("rand_zero_noise_privacy", r.eps_p - r.c1, r.eps_stat_of("leakage_gap")))
        else:
            checks += check_gamma_range(r)
        out.append(checks)
    # bound terms evaluated with sweep-wide constants on the reference variances
    order = np.argsort(sigmas, kind="stable")
    priv, util = [], []
    for i in order:
        m = [noise_scale_term(sigmas[i], v) for v in ref["client_var_O"]]
        m_bar = math.fsum(m) / len(m)
        priv.append(c1_ref - 0.75 * e_ref * m_bar)
        util.append(m_bar)
    mono_p = all(b <= a for a, b in zip(priv, priv[1:]))
    mono_u = all(b >= a for a, b in zip(util, util[1:]))
    out[-1] = out[-1] + [_flag("rand_privacy_bound_monotone", mono_p),
                         _flag("rand_utility_bound_monotone", mono_u)]
    return out


def sparsity_h(report: TradeoffReport) -> tuple[float, float]:
    """Mean client h and aggregate h over the withheld coordinates."""
    par = report.parametric
    d = int(report.mechanism["d"])
    mu_g = np.asarray(report.mechanism.get("mu_g") or [], dtype=float)
    var_g = np.asarray(report.mechanism.get("var_g") or [], dtype=float)
    if d >= report.dim:
        return 0.0, 0.0
    hs = [hellinger_h(np.asarray(m)[d:], np.asarray(v)[d:], mu_g, var_g)
          for m, v in zip(par["client_mean_O"], par["client_var_O"])]
    h_bar = math.fsum(hs) / len(hs)
    h_agg = hellinger_h(np.asarray(par["agg_mean_O"])[d:], np.asarray(par["agg_var_O"])[d:],
                        mu_g, var_g / report.n_clients)
    return h_bar, h_agg


def check_sparsity(reports: Sequence[TradeoffReport]) -> list[list[Check]]:
    if not reports:
        raise ValueError("empty sweep")
    for r in reports:
        _require(r, "sparsity", parametric=True)
    ds = [int(r.mechanism["d"]) for r in reports]
    out = []
    hs = []
    for r, d in zip(reports, ds):
        h_bar, h_agg = sparsity_h(r)
        hs.append((d, h_bar, h_agg))
        c3_sparse = math.sqrt(2.0) * r.e2xi / 2.0
        checks = [
            _ineq("sparse_privacy", r.eps_p + c3_sparse * h_bar - r.c1, r.eps_stat_of("nfl_tv")),
            _ineq("sparse_utility", math.sqrt(2.0) * r.c4 * h_agg - r.eps_u, r.eps_stat_of("eps_u")),
            _ineq("sparse_utility_client_h", math.sqrt(2.0) * r.c4 * h_bar - r.eps_u,
                  r.eps_stat_of("eps_u"), gated=False),
        ]
        if d >= r.dim:
            checks.append(_flag("sparse_full_upload_h", h_bar == 0.0 and h_agg == 0.0))
            checks.append(_ineq("sparse_full_upload_utility", r.eps_stat_of("eps_u") - abs(r.eps_u)))
            checks.append(_ineq("sparse_full_upload_privacy", r.eps_p - r.c1, r.eps_stat_of("leakage_gap")))
        out.append(checks)
    hs.sort(key=lambda t: t[0])
    mono = all(b[1] <= a[1] and b[2] <= a[2] for a, b in zip(hs, hs[1:]))
    out[-1] = out[-1] + [_flag("sparse_h_monotone", mono)]
    return out


def check_he(report_unknown_key: TradeoffReport | None,
             report_known_key: TradeoffReport | None) -> tuple[list[Check], list[Check]]:
    if report_unknown_key is None or report_known_key is None:
        raise ValueError("both key regimes are required")
    u, k = report_unknown_key, report_known_key
    _require(u, "toy_he", parametric=False)
    _require(k, "toy_he", parametric=False)
    if u.mechanism.get("key_known") or not k.mechanism.get("key_known"):
        raise ValueError("reports are not in the expected key regimes")
    unknown = [_flag("he_unknown_key_privacy_zero", u.eps_p == 0.0)]
    if u.delta is not None and u.delta > 0 and u.gamma is not None:
        c2 = u.gamma * u.e2xi / (4.0 * u.delta)
        unknown.append(_ineq("he_unknown_key_utility", u.eps_u - u.c1 / c2, u.eps_stat_of("eps_u"),
                             detail=f"C1/C2={u.c1 / c2:.6g}"))
    else:
        unknown.append(Check("he_unknown_key_utility", "fail", None, 0.0, True,
                             "no positive near-optimality gap in the unknown-key regime"))
    tol = 2.0 ** -8 * k.dim
    known = [
        _ineq("he_known_key_utility", tol - k.eps_u, k.eps_stat_of("eps_u"), detail=f"tol={tol}"),
        _ineq("he_known_key_privacy", k.eps_p - k.c1, k.eps_stat_of("leakage_gap")),
    ]
    return unknown, known


def check_secret_sharing(report: TradeoffReport) -> list[Check]:
    _require(report, "secret_sharing", parametric=False)
    m = report.mechanism
    share_tv = 1.0 - (2.0 * m["delta"] / (m["a"] + m["b"])) ** report.dim
    e = report.e2xi
    worst = min(ep - (c1 - 0.5 * e * share_tv) for ep, c1 in zip(report.eps_p_clients, report.c1_clients))
    return [
        _flag("ss_utility_zero", report.eps_u == 0.0),
        _ineq("ss_privacy", worst, report.eps_stat_of("leakage_gap"), detail=f"closed-form TV={share_tv:.6g}"),
    ]


def run_checks(report: TradeoffReport) -> list[Check]:
    """Checks that apply to a single report."""
    checks = list(check_nfl(report).checks)
    checks += check_integrity(report)
    checks += check_utility_tv(report)
    kind = report.mechanism.get("type")
    if kind == "secret_sharing":
        checks += check_secret_sharing(report)
    if kind == "randomization":
        if report.path == "parametric":
            checks += check_randomization([report])[0]
        elif report.mechanism["sigma"] > 0:
            checks += check_gamma_range(report)
    if kind == "sparsity" and report.path == "parametric":
        checks += check_sparsity([report])[0]
    return checks


# ---------------------------------------------------------------------------
# Constrained trade-off
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TradeoffSolution:
    feasible: bool
    index: int | None
    mechanism: object | None
    report: TradeoffReport | None


def select_tradeoff(reports: Sequence[TradeoffReport], budget: float) -> tuple[bool, int | None]:
    """Minimise ε_u subject to ε_p ≤ budget; ties by smaller ε_p then grid index."""
    if not reports:
        raise ValueError("empty grid")
    feasible = [i for i, r in enumerate(reports) if r.eps_p <= budget]
    if not feasible:
        return False, None
    best = min(feasible, key=lambda i: (reports[i].eps_u, reports[i].eps_p, i))
    return True, best


def solve_constrained_tradeoff(grid: Sequence, budget: float,
                               evaluate: Callable[[object], TradeoffReport]) -> TradeoffSolution:
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    reports = [evaluate(m) for m in grid]
    ok, idx = select_tradeoff(reports, budget)
    if not ok:
        return TradeoffSolution(False, None, None, None)
    return TradeoffSolution(True, idx, grid[idx], reports[idx])
