import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from koopman_mpc import experiment as ex
from koopman_mpc import koopman
from koopman_mpc.neural_mass import DoubleColumnParams, JansenRitParams, generate_trace

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")

ROOT = Path(__file__).resolve().parents[1]

# acceptance outcomes, printed once at the end of the session
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def seizure_trace():
    return generate_trace(JansenRitParams(A=7.8), duration=42.0)


@pytest.fixture(scope="session")
def double_trace():
    return generate_trace(DoubleColumnParams(), duration=42.0)


@pytest.fixture(scope="session")
def single_model(seizure_trace):
    return koopman.train(seizure_trace.segment(0, 1000), koopman.LiftingConfig(seed=0))


@pytest.fixture(scope="session")
def double_model(double_trace):
    cfg = koopman.LiftingConfig(seed=0, n_channels=2, refit_period=10)
    return koopman.train(double_trace.segment(0, 1000), cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ablation_study(tmp_path_factory):
    """Full ablation pipeline (all variants, ten seeds) per case, run once."""
    out = tmp_path_factory.mktemp("ablation")
    results = {}
    for case in ("single", "double"):
        cfg = ex.load_config(ROOT / "configs" / f"{case}.yaml", {"out": str(out)})
        t0 = time.perf_counter()
        res = ex.run_ablate(cfg)
        results[case] = {"cfg": cfg, "result": res, "seconds": time.perf_counter() - t0}
    return results


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE
