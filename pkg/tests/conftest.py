import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from privutil import harness as hs
from privutil import protection as prot
from privutil.config import load_config

settings.register_profile("ci", deadline=None, derandomize=True, max_examples=100)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ci_config(name):
    return load_config(CONFIG_DIR / f"{name}.yaml")


def _sweep_reports(cfg):
    exp = hs.build_experiment(cfg)
    return [hs.evaluate_mechanism(exp, hs._point_mechanism(cfg, v))[1] for v in cfg.sweep.values]


def build_ci_reports():
    """Every pipeline configuration of the CI suite, keyed by family."""
    out = {}
    out["noop"] = [hs.evaluate_mechanism(hs.build_experiment(ci_config("noop")), prot.NoOp())[1]]
    out["randomization"] = _sweep_reports(ci_config("randomization"))
    cfg = ci_config("randomization_empirical")
    exp = hs.build_experiment(cfg)
    out["randomization_empirical"] = [
        hs.evaluate_mechanism(exp, prot.Randomization(s))[1] for s in (0.0, 0.1, 0.3, 1.0)]
    out["sparsity"] = _sweep_reports(ci_config("sparsity"))
    cfg = ci_config("secret_sharing")
    out["secret_sharing"] = [hs.evaluate_mechanism(hs.build_experiment(cfg), cfg.mechanism)[1]]
    cfg = ci_config("toy_he")
    exp = hs.build_experiment(cfg)
    out["he_unknown"] = [hs.evaluate_mechanism(exp, cfg.mechanism)[1]]
    out["he_known"] = [hs.evaluate_mechanism(exp, replace(cfg.mechanism, key_known=True))[1]]
    return out


@pytest.fixture(scope="session")
def ci_reports():
    return build_ci_reports()


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES.append((number, "PASS" if ok else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {detail}")
