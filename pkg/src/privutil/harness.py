"""Experiment orchestration: simulate, attack, verify and curve runs on disk.

Every file written carries ``schema_version``. Runs are deterministic in
(config, seed): apart from ``manifest.json``, whose timestamps differ, two
runs produce byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as att
from . import bounds as bd
from . import protection as prot
from .config import ExperimentConfig, dump_config, load_config
from .experiment import EvaluationContext, build_privacy_setup, draw_alternates, evaluate
from .flsim import (FederationConfig, FederationResult, ModelSpec, SyntheticTask, UtilitySpec,
                    load_csv_dataset, run_federation)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ENV = "PRIVUTIL_OUTPUT_ROOT"
DATA_TAG, ALTERNATE_TAG, PILOT_TAG, ATTACK_TAG = 1, 2, 3, 4

EXIT_OK, EXIT_USAGE, EXIT_RUN, EXIT_VERIFY = 0, 1, 2, 3


class RunError(RuntimeError):
    """A run could not be completed or its artifacts are missing."""


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schema_version", *header])
    for row in rows:
        w.writerow([SCHEMA_VERSION, *map(_fmt, row)])
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for i, row in enumerate(rows):
        if row.get("schema_version") != str(SCHEMA_VERSION):
            raise bd.SchemaError(f"{path.name} row {i}: schema_version {row.get('schema_version')!r}")
    return rows


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_report(path: Path) -> bd.TradeoffReport:
    return bd.TradeoffReport.from_dict(json.loads(Path(path).read_text()))


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(run_dir: Path, cfg: ExperimentConfig, started: float) -> None:
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    write_json(run_dir / "manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "tool_version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "files": {str(p.relative_to(run_dir)): sha256(p) for p in files},
    })


def output_root(out: str | None, cfg: ExperimentConfig | None = None) -> Path:
    if out:
        return Path(out)
    if cfg is not None and cfg.output:
        return Path(cfg.output)
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _require(run_dir: Path, names) -> None:
    missing = [n for n in names if not (run_dir / n).exists()]
    if missing:
        raise RunError(f"incomplete run in {run_dir}: missing {', '.join(missing)}")


# ---------------------------------------------------------------------------
# Building an experiment
# ---------------------------------------------------------------------------

def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag])


def _derived_seed(seed: int, tag: int) -> int:
    lo, hi = np.random.SeedSequence([seed, tag]).generate_state(2)
    return int(lo) | (int(hi) << 32)


@dataclass
class Experiment:
    cfg: ExperimentConfig
    datasets: list
    task: SyntheticTask | None
    params: np.ndarray | None
    model: ModelSpec
    utility: UtilitySpec


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    ds = cfg.dataset
    model = ModelSpec(**cfg.model)
    utility = UtilitySpec(**cfg.utility)
    if ds.kind == "csv":
        datasets = [load_csv_dataset(p, client_id=k) for k, p in enumerate(ds.paths)]
        return Experiment(cfg, datasets, None, None, model, utility)
    task = SyntheticTask(ds.kind, ds.n_features, ds.n_samples, ds.noise, ds.heterogeneity, ds.separation)
    if task.model_kind != model.kind:
        raise ValueError(f"a {ds.kind} dataset needs model.kind {task.model_kind!r}")
    rng = _rng(cfg.seed, DATA_TAG)
    params = task.client_parameters(cfg.clients, rng)
    datasets = [task.sample(params[k], rng, client_id=k) for k in range(cfg.clients)]
    return Experiment(cfg, datasets, task, params, model, utility)


def federation_config(exp: Experiment, mechanism, seed: int | None = None) -> FederationConfig:
    c = exp.cfg
    return FederationConfig(exp.datasets, exp.model, mechanism, rounds=c.rounds, trials=c.trials,
                            seed=c.seed if seed is None else seed, local_steps=c.local_steps,
                            lr=c.lr, init_scale=c.init_scale, protect_every_round=c.protect_every_round)


def model_dim(exp: Experiment) -> int:
    return exp.model.dim(exp.datasets[0].features.shape[1])


def resolve_mechanism(exp: Experiment, mech):
    """Complete a sparsity mechanism's substitute Gaussian for its kept count.

    A substitute listed for all coordinates is cut to the withheld tail; a
    missing one is fitted to the withheld coordinates of a pilot run.
    """
    if not isinstance(mech, prot.Sparsity):
        return mech
    dim = model_dim(exp)
    if mech.d > dim:
        raise ValueError(f"mechanism.d: keeps {mech.d} of {dim} coordinates")
    if mech.d == dim:
        return prot.Sparsity(mech.d)
    if mech.mu_g is not None:
        if len(mech.mu_g) == dim:
            return prot.Sparsity(mech.d, mech.mu_g[mech.d:], mech.var_g[mech.d:])
        return mech
    pilot = run_federation(federation_config(exp, prot.NoOp(), _derived_seed(exp.cfg.seed, PILOT_TAG)))
    pooled = np.vstack([d.points for d in pilot.dist_O])[:, mech.d:]
    return prot.Sparsity(mech.d, tuple(pooled.mean(axis=0)),
                         tuple(np.maximum(pooled.var(axis=0, ddof=1), 1e-12)))


def _alternates(exp: Experiment):
    m = exp.cfg.universe.candidates
    rng = _rng(exp.cfg.seed, ALTERNATE_TAG)
    if exp.task is not None:
        return draw_alternates(exp.task, exp.params, m, rng)
    # csv data: bootstrap resamples of each client's own rows
    out = []
    for d in exp.datasets:
        alts = []
        for _ in range(m - 1):
            idx = rng.integers(0, d.n_samples, d.n_samples)
            alts.append(type(d)(d.features[idx], d.targets[idx], d.client_id))
        out.append(alts)
    return out


def evaluate_mechanism(exp: Experiment, mech, base: FederationResult | None = None):
    """Run the federation under ``mech`` and evaluate it; returns (result, report)."""
    cfg = exp.cfg
    mech = resolve_mechanism(exp, mech)
    try:
        result = run_federation(federation_config(exp, mech))
    except FloatingPointError as exc:
        raise RunError(str(exc)) from exc
    base = base or result
    setup = build_privacy_setup(exp.datasets, _alternates(exp), exp.model, base.final_global.mean(axis=0),
                                local_steps=cfg.local_steps, lr=cfg.lr,
                                sigma_obs=cfg.universe.sigma_obs, cap=cfg.universe.cap)
    ev = cfg.evaluation
    path = ev.path
    if isinstance(mech, (prot.SecretSharing, prot.ToyHE)):
        # releases of these mechanisms have no Gaussian law
        path = "empirical"
    ctx = EvaluationContext(exp.datasets, exp.model, exp.utility, mech, setup, path=path,
                            bins=ev.bins, grid_size=ev.grid_size, batches=ev.batches,
                            seed=cfg.seed, config_hash=cfg.config_hash(), lr=cfg.lr)
    return result, evaluate(result, ctx)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _dist_rows(dists, agg):
    trials = len(agg)
    for t in range(trials):
        for k, d in enumerate(dists):
            yield [t, k, *d.points[t]]
        yield [t, "aggregate", *agg.points[t]]


def _write_dists(run_dir: Path, result: FederationResult, suffix: str = "") -> None:
    n = result.agg_O.dim
    header = ["trial", "client", *[f"w_{i}" for i in range(n)]]
    if not suffix:
        write_csv(run_dir / "dist_O.csv", header, _dist_rows(result.dist_O, result.agg_O))
    write_csv(run_dir / f"dist_S{suffix}.csv", header, _dist_rows(result.dist_S, result.agg_S))


def _prepare(config_path, out, seed) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(config_path)
    if seed is not None:
        data = cfg.to_dict()
        data["seed"] = seed
        cfg = ExperimentConfig.from_dict(data)
    return cfg, output_root(out, cfg) / cfg.name


def cmd_simulate(config_path, out: str | None = None, seed: int | None = None, jobs: int = 1) -> Path:
    started = time.time()
    cfg, run_dir = _prepare(config_path, out, seed)
    exp = build_experiment(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in run_dir.rglob("*"):
        if stale.is_file():
            stale.unlink()
    (run_dir / "config.yaml").write_text(dump_config(cfg))

    mech = cfg.mechanism
    if isinstance(mech, prot.ToyHE):
        regimes = [(replace(mech, key_known=False), "report.json", ""),
                   (replace(mech, key_known=True), "report_known_key.json", "_known_key")]
    else:
        regimes = [(mech, "report.json", "")]
    for m, report_name, suffix in regimes:
        result, report = evaluate_mechanism(exp, m)
        if not suffix:
            write_csv(run_dir / "traces.csv", ["round", "loss_mean", "grad_norm_mean"],
                      ([t.round, t.loss_mean, t.grad_norm_mean] for t in result.traces))
        _write_dists(run_dir, result, suffix)
        write_json(run_dir / report_name, report.to_dict())
    write_manifest(run_dir, cfg, started)
    return run_dir


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------

ATTACK_COLUMNS = ["attack", "instance", "sigma", "error", "loss", "iterations", "converged",
                  "keyspace_size", "planted_index", "found_index", "decrypt_calls",
                  "true_index", "argmax_index", "inversion_index", "tie"]


def _row(**kw):
    return [kw.get(c) for c in ATTACK_COLUMNS]


def _recorded(run_dir: Path):
    rows = read_csv(run_dir / "dist_O.csv")
    cols = sorted((c for c in rows[0] if c.startswith("w_")), key=lambda c: int(c[2:]))
    agg = np.array([[float(r[c]) for c in cols] for r in rows if r["client"] == "aggregate"])
    first = np.array([[float(r[c]) for c in cols] for r in rows if r["trial"] == "0" and r["client"] != "aggregate"])
    return agg, first


def _data_points(exp: Experiment, count: int, rng: np.random.Generator):
    X = np.vstack([d.features for d in exp.datasets])
    y = np.concatenate([d.targets for d in exp.datasets])
    idx = rng.integers(0, len(y), count)
    return X[idx], y[idx]


def run_attack(exp: Experiment, spec: dict, agg: np.ndarray, first: np.ndarray) -> list:
    kind = spec["kind"]
    rng = _rng(spec.get("seed", 0), ATTACK_TAG)
    model = exp.model
    w_ref = agg.mean(axis=0)
    context = att.ModelContext(w_ref, model.kind, model.bias)
    rows = []
    if kind == "gradient-inversion":
        X, y = _data_points(exp, spec["instances"], rng)
        cfg = att.AttackConfig(prior=spec["prior"], weight=spec["weight"], max_iters=spec["max_iters"],
                               tol=spec["tol"], restarts=spec["restarts"], seed=spec["seed"],
                               label=0.0 if spec["prior"] == "label" else None)
        errs = att.inversion_errors_under_noise(context, X, y, spec["sigmas"], cfg, seed=spec["seed"])
        for i, s in enumerate(spec["sigmas"]):
            rows += [_row(attack=kind, instance=j, sigma=s, error=errs[i, j]) for j in range(len(y))]
    elif kind == "model-inversion":
        X, _ = _data_points(exp, spec["instances"], rng)
        ctx = att.ModelContext(first, model.kind, model.bias)
        cfg = att.AttackConfig(kind=kind, prior=spec["prior"], weight=spec["weight"],
                               max_iters=spec["max_iters"], tol=spec["tol"], restarts=spec["restarts"],
                               seed=spec["seed"])
        for j, x in enumerate(X):
            res = att.model_inversion(ctx.output(x), ctx, cfg)
            rows.append(_row(attack=kind, instance=j, error=float(np.linalg.norm(res.recovered - x)),
                             loss=res.loss, iterations=res.iterations, converged=res.converged))
    elif kind == "brute-force":
        params = prot.ToyHE(n=spec["n"], key_alphabet=tuple(spec["key_alphabet"]))
        space = prot.KeySpace(params)
        key = space[spec["planted_index"]]
        plaintext = float(prot.quantize(w_ref[0], params.scale))
        ct = prot.he_encrypt(plaintext, key, rng)
        res = att.brute_force_key((plaintext, ct), space)
        rows.append(_row(attack=kind, instance=0, keyspace_size=len(space),
                         planted_index=spec["planted_index"], found_index=res.details["index"],
                         decrypt_calls=res.details["decrypt_calls"], converged=res.converged))
    else:
        for j in range(spec["instances"]):
            X, y = _data_points(exp, spec["candidates"], rng)
            target = int(rng.integers(spec["candidates"]))
            cc = att.argmax_cross_check(context, X, y, target, spec["sigma_obs"])
            rows.append(_row(attack=kind, instance=j, true_index=target, argmax_index=cc.argmax_index,
                             inversion_index=cc.inversion_index, tie=cc.tie))
    return rows


def cmd_attack(config_path, out: str | None = None, seed: int | None = None, jobs: int = 1) -> Path:
    started = time.time()
    cfg, run_dir = _prepare(config_path, out, seed)
    if not run_dir.is_dir():
        raise RunError(f"run directory {run_dir} does not exist; run 'simulate' first")
    _require(run_dir, ["dist_O.csv", "manifest.json"])
    if not cfg.attacks:
        raise RunError("the config lists no attacks")
    exp = build_experiment(cfg)
    agg, first = _recorded(run_dir)
    rows = []
    for spec in cfg.attacks:
        rows += run_attack(exp, spec, agg, first)
    write_csv(run_dir / "attacks.csv", ATTACK_COLUMNS, rows)
    write_manifest(run_dir, cfg, started)
    return run_dir / "attacks.csv"


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _verdict_entry(source: str, check: bd.Check) -> dict:
    return {"source": source, **check.to_dict()}


def verify_reports(reports: dict[str, bd.TradeoffReport], sweep: list | None = None) -> list[dict]:
    entries = []
    for name, rep in reports.items():
        entries += [_verdict_entry(name, c) for c in bd.run_checks(rep)]
    if "report_known_key.json" in reports:
        unknown, known = bd.check_he(reports["report.json"], reports["report_known_key.json"])
        entries += [_verdict_entry("report.json", c) for c in unknown]
        entries += [_verdict_entry("report_known_key.json", c) for c in known]
    if sweep:
        kinds = {r.mechanism["type"] for r in sweep}
        paths = {r.path for r in sweep}
        if kinds == {"randomization"} and paths == {"parametric"}:
            sweep_checks = bd.check_randomization(sweep)[-1][-2:]
        elif kinds == {"sparsity"} and paths == {"parametric"}:
            sweep_checks = bd.check_sparsity(sweep)[-1][-1:]
        else:
            sweep_checks = []
        entries += [_verdict_entry("sweep", c) for c in sweep_checks]
    return entries


def cmd_verify(run_dir) -> tuple[int, Path]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise RunError(f"run directory {run_dir} does not exist")
    sweep = None
    if (run_dir / "curve.csv").exists():
        _require(run_dir, ["manifest.json", "reports"])
        names = sorted(p.name for p in (run_dir / "reports").glob("point_*.json"))
        if not names:
            raise RunError(f"incomplete run in {run_dir}: no sweep reports")
        reports = {f"reports/{n}": load_report(run_dir / "reports" / n) for n in names}
        sweep = list(reports.values())
    else:
        _require(run_dir, ["manifest.json", "report.json"])
        reports = {"report.json": load_report(run_dir / "report.json")}
        if (run_dir / "report_known_key.json").exists():
            reports["report_known_key.json"] = load_report(run_dir / "report_known_key.json")
    entries = verify_reports(reports, sweep)
    failed = [e for e in entries if e["gated"] and e["status"] == "fail"]
    verdict = {"schema_version": SCHEMA_VERSION, "passed": not failed, "checks": entries}
    path = run_dir / "verdict.json"
    write_json(path, verdict)
    return (EXIT_OK if not failed else EXIT_VERIFY), path


# ---------------------------------------------------------------------------
# curve
# ---------------------------------------------------------------------------

CURVE_COLUMNS = ["mechanism_id", "param_name", "param_value", "eps_p", "eps_u", "bound_privacy",
                 "bound_utility", "C1", "C2", "C3", "C4", "xi", "gamma", "delta", "h",
                 "feasible_at_budget"]


def _point_mechanism(cfg: ExperimentConfig, value):
    data = cfg.mechanism.to_dict()
    param = cfg.sweep.param
    data[param] = int(value) if param == "d" else float(value)
    return prot.mechanism_from_dict(data)


def _curve_point(cfg_dict: dict, index: int) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    exp = build_experiment(cfg)
    mech = _point_mechanism(cfg, cfg.sweep.values[index])
    _, report = evaluate_mechanism(exp, mech)
    return report.to_dict()


def bound_values(rep: bd.TradeoffReport) -> tuple[float, float, float | None]:
    """(privacy lower bound, utility upper bound, h) for a report."""
    kind = rep.mechanism["type"]
    e = rep.e2xi
    if kind == "randomization" and rep.parametric:
        s = rep.mechanism["sigma"]
        m = [bd.noise_scale_term(s, v) for v in rep.parametric["client_var_O"]]
        m_bar = sum(m) / len(m)
        return rep.c1 - 0.75 * e * m_bar, rep.c4 * m_bar, None
    if kind == "sparsity" and rep.parametric:
        h_bar, h_agg = bd.sparsity_h(rep)
        return rep.c1 - rep.c3 * 2 ** 0.5 * h_bar, 2 ** 0.5 * rep.c4 * h_agg, h_bar
    tv_bar = sum(rep.tv_clients) / len(rep.tv_clients)
    return rep.c1 - 0.5 * e * tv_bar, rep.c4 * rep.tv_aggregate, None


def cmd_curve(config_path, out: str | None = None, seed: int | None = None, jobs: int = 1) -> Path:
    started = time.time()
    cfg, run_dir = _prepare(config_path, out, seed)
    if cfg.sweep is None:
        raise ValueError("sweep: the config defines no sweep grid")
    exp = build_experiment(cfg)
    mech = cfg.mechanism
    if isinstance(mech, prot.Sparsity) and mech.mu_g is not None and len(mech.mu_g) != model_dim(exp):
        raise ValueError("mechanism.mu_g: a sparsity sweep needs the substitute for every coordinate")
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in run_dir.rglob("*"):
        if stale.is_file():
            stale.unlink()
    (run_dir / "reports").mkdir(exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    n = len(cfg.sweep.values)
    cfg_dict = cfg.to_dict()
    if jobs > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            dicts = list(pool.map(_curve_point, [cfg_dict] * n, range(n)))
    else:
        dicts = [_curve_point(cfg_dict, i) for i in range(n)]
    reports = [bd.TradeoffReport.from_dict(d) for d in dicts]
    for i, d in enumerate(dicts):
        write_json(run_dir / "reports" / f"point_{i:03d}.json", d)

    budgets = list(cfg.evaluation.budgets) or [float("inf")]
    solutions = []
    for b in budgets:
        ok, idx = bd.select_tradeoff(reports, b)
        solutions.append({"budget": b if b != float("inf") else "inf", "feasible": ok, "index": idx,
                          "param_value": cfg.sweep.values[idx] if ok else None})
    rows = []
    for i, rep in enumerate(reports):
        bp, bu, h = bound_values(rep)
        rows.append([rep.mechanism_id, cfg.sweep.param, cfg.sweep.values[i], rep.eps_p, rep.eps_u, bp, bu,
                     rep.c1, rep.c2, rep.c3, rep.c4, rep.xi, rep.gamma, rep.delta, h,
                     ";".join("1" if rep.eps_p <= b else "0" for b in budgets)])
    write_csv(run_dir / "curve.csv", CURVE_COLUMNS, rows)
    write_json(run_dir / "tradeoff.json", {"schema_version": SCHEMA_VERSION,
                                           "budgets": [s["budget"] for s in solutions],
                                           "solutions": solutions})
    write_manifest(run_dir, cfg, started)
    return run_dir / "curve.csv"
