import json
import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from privutil import bounds as bd
from privutil import protection as prot


def gated_failures(checks):
    return [c for c in checks if c.gated and c.status == "fail"]


# -- constants ------------------------------------------------------------------

def test_constants_examples():
    zero = bd.tradeoff_constants(0.0, 1.0, 0.5)
    assert zero["c3"] == 0.0 and zero["c2"] == 0.0 and zero["c4"] == 1.0
    half = bd.tradeoff_constants(math.log(2) / 2, 2.0, 0.25)
    assert half["c3"] == pytest.approx(0.5, abs=1e-15)
    assert half["c2"] == pytest.approx(2.0 / (4 * 0.25), abs=1e-15)
    assert half["c2_proof"] == pytest.approx(4 * half["c2"], abs=1e-15)
    assert bd.tradeoff_constants(0.3, 1.0, 0.0)["c2"] is None
    assert bd.tradeoff_constants(0.3, None, 0.1)["c2"] is None


@given(st.floats(0, 400))
def test_expm1_never_raises(xi):
    v = bd.expm1_2xi(xi)
    assert v >= 0 and (math.isinf(v) or v == pytest.approx(math.expm1(2 * xi)))


def test_noise_scale_term_clamps():
    assert bd.noise_scale_term(0.0, [1.0, 2.0]) == 0.0
    assert bd.noise_scale_term(10.0, [1.0]) == 1.0
    assert bd.noise_scale_term(0.1, [1.0, 1.0]) == pytest.approx(0.01 * math.sqrt(2))


# -- checks on the CI reports ---------------------------------------------------

FAMILIES = ["noop", "randomization", "randomization_empirical", "sparsity", "secret_sharing",
            "he_unknown", "he_known"]


@pytest.mark.parametrize("family", FAMILIES)
def test_gated_checks_pass(ci_reports, family):
    for r in ci_reports[family]:
        assert gated_failures(bd.run_checks(r)) == []


def test_noop_tv_check_is_tight(ci_reports):
    r = ci_reports["noop"][0]
    nfl = bd.check_nfl(r)
    assert nfl.tv_slack == 0.0
    assert nfl.utility_status == "skipped"
    assert nfl.checks[1].detail == "skipped: no positive near-optimality gap"
    assert nfl.passed


def test_halving_privacy_leakage_breaks_tv_check(ci_reports):
    r = ci_reports["noop"][0]
    bad = replace(r, eps_p=r.eps_p / 2)
    assert not bd.check_nfl(bad).passed
    assert bd.check_nfl(bad).checks[0].status == "fail"


def test_utility_form_checked_when_gap_positive(ci_reports):
    r = ci_reports["randomization"][2]
    nfl = bd.check_nfl(r)
    assert r.delta > 0 and nfl.utility_status == "pass"
    bad = replace(r, c1=r.eps_p + r.c2 * r.eps_u * 2 + 1.0)
    assert bd.check_nfl(bad).utility_status == "fail"


def test_checks_recompute_from_beliefs(ci_reports):
    r = ci_reports["randomization"][1]
    tampered = replace(r, c1_clients=[c + 0.01 for c in r.c1_clients])
    names = {c.name: c.status for c in bd.run_checks(tampered)}
    assert names["leakage_consistency"] == "fail"


def test_randomization_sweep_checks(ci_reports):
    sweep = bd.check_randomization(ci_reports["randomization"])
    assert all(not gated_failures(c) for c in sweep)
    last = {c.name: c.status for c in sweep[-1]}
    assert last["rand_privacy_bound_monotone"] == "pass"
    assert last["rand_utility_bound_monotone"] == "pass"
    with pytest.raises(ValueError):
        bd.check_randomization(ci_reports["randomization_empirical"])
    with pytest.raises(ValueError):
        bd.check_randomization([])


def test_sparsity_h_vanishes_on_full_upload(ci_reports):
    full = [r for r in ci_reports["sparsity"] if r.mechanism["d"] == r.dim][0]
    assert bd.sparsity_h(full) == (0.0, 0.0)
    hs = [bd.sparsity_h(r) for r in ci_reports["sparsity"]]
    assert all(b[0] <= a[0] and b[1] <= a[1] for a, b in zip(hs, hs[1:]))


def test_sparsity_h_zero_when_withheld_law_matches(ci_reports):
    r = ci_reports["sparsity"][1]
    par = r.parametric
    mech = dict(r.mechanism, mu_g=list(np.asarray(par["client_mean_O"][0])[1:]),
                var_g=list(np.asarray(par["client_var_O"][0])[1:]))
    same = replace(r, n_clients=1, mechanism=mech,
                   parametric=dict(par, client_mean_O=par["client_mean_O"][:1],
                                   client_var_O=par["client_var_O"][:1]))
    assert bd.sparsity_h(same)[0] == 0.0


def test_secret_sharing_closed_form(ci_reports):
    r = ci_reports["secret_sharing"][0]
    checks = {c.name: c for c in bd.check_secret_sharing(r)}
    expected = prot.uniform_share_tv([0.5] * r.dim, [8.0] * r.dim, [8.0] * r.dim)
    assert checks["ss_privacy"].detail == f"closed-form TV={expected:.6g}"
    assert checks["ss_utility_zero"].status == "pass"


def test_he_regimes(ci_reports):
    unknown, known = bd.check_he(ci_reports["he_unknown"][0], ci_reports["he_known"][0])
    assert all(c.status == "pass" for c in unknown + known)
    with pytest.raises(ValueError):
        bd.check_he(ci_reports["he_known"][0], ci_reports["he_unknown"][0])
    with pytest.raises(ValueError):
        bd.check_he(None, ci_reports["he_known"][0])


def test_unknown_key_without_gap_fails(ci_reports):
    u = replace(ci_reports["he_unknown"][0], delta=None)
    unknown, _ = bd.check_he(u, ci_reports["he_known"][0])
    assert unknown[1].status == "fail"
    assert unknown[1].detail == "no positive near-optimality gap in the unknown-key regime"


def test_gamma_range_skips_without_tv(ci_reports):
    assert bd.check_gamma_range(ci_reports["noop"][0])[0].status == "skipped"


# -- constrained selection ------------------------------------------------------

def fake(eps_p, eps_u, reports):
    return replace(reports["noop"][0], eps_p=eps_p, eps_u=eps_u)


def test_select_tradeoff_budgets(ci_reports):
    grid = [fake(0.0, 0.9, ci_reports), fake(0.2, 0.1, ci_reports), fake(0.1, 0.1, ci_reports),
            fake(0.5, 0.0, ci_reports)]
    assert bd.select_tradeoff(grid, math.inf) == (True, 3)
    assert bd.select_tradeoff(grid, 0.3) == (True, 2)
    assert bd.select_tradeoff(grid, 0.0) == (True, 0)
    assert bd.select_tradeoff(grid, -1.0) == (False, None)
    with pytest.raises(ValueError):
        bd.select_tradeoff([], 1.0)


def test_solve_constrained_tradeoff(ci_reports):
    table = {0.0: fake(0.3, 0.0, ci_reports), 1.0: fake(0.05, 0.4, ci_reports)}
    sol = bd.solve_constrained_tradeoff([0.0, 1.0], 0.1, table.__getitem__)
    assert sol.feasible and sol.mechanism == 1.0 and sol.report is table[1.0]
    assert not bd.solve_constrained_tradeoff([0.0], 0.1, table.__getitem__).feasible
    with pytest.raises(ValueError):
        bd.solve_constrained_tradeoff([], 0.1, table.__getitem__)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=12),
       st.floats(0, 1))
def test_selection_is_optimal(pairs, budget):
    grid = [SimpleNamespace(eps_p=p, eps_u=u) for p, u in pairs]
    ok, idx = bd.select_tradeoff(grid, budget)
    feasible = [g for g in grid if g.eps_p <= budget]
    assert ok == bool(feasible)
    if ok:
        assert grid[idx].eps_p <= budget
        assert grid[idx].eps_u == min(g.eps_u for g in feasible)


# -- persistence ----------------------------------------------------------------

def test_report_json_round_trip(ci_reports):
    r = ci_reports["randomization"][2]
    back = bd.TradeoffReport.from_dict(json.loads(json.dumps(r.to_dict())))
    assert back == r


def test_report_schema_errors(ci_reports):
    d = ci_reports["noop"][0].to_dict()
    with pytest.raises(bd.SchemaError):
        bd.TradeoffReport.from_dict({**d, "schema_version": 2})
    with pytest.raises(bd.SchemaError):
        bd.TradeoffReport.from_dict({**d, "extra": 1})
    missing = dict(d)
    del missing["c1"]
    with pytest.raises(bd.SchemaError):
        bd.TradeoffReport.from_dict(missing)
    with pytest.raises(ValueError):
        bd.TradeoffReport.from_dict({**d, "xi": math.inf})
