"""Sweep Gaussian noise and watch privacy and utility trade off.

Runs the shipped randomization sweep through the library, prints the measured
leakage and utility loss at each noise level, checks the bounds, and picks the
lowest-loss setting that meets each privacy budget.

    python3 demos/tradeoff_curve.py
"""
from pathlib import Path

from privutil import bounds as bd
from privutil import harness as hs
from privutil import protection as prot
from privutil.config import load_config

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "randomization.yaml")
exp = hs.build_experiment(cfg)

reports = []
print(f"{'sigma':>6} {'eps_p':>8} {'eps_u':>8} {'C1':>8}")
for sigma in cfg.sweep.values:
    _, rep = hs.evaluate_mechanism(exp, prot.Randomization(sigma))
    reports.append(rep)
    print(f"{sigma:>6} {rep.eps_p:8.4f} {rep.eps_u:8.4f} {rep.c1:8.4f}")

failed = [c.name for point in bd.check_randomization(reports) for c in point
          if c.gated and c.status == "fail"]
print("all gated bounds hold" if not failed else f"failing checks: {failed}")

for budget in cfg.evaluation.budgets:
    ok, idx = bd.select_tradeoff(reports, budget)
    choice = f"sigma={cfg.sweep.values[idx]}" if ok else "no feasible setting"
    print(f"privacy budget {budget}: {choice}")
