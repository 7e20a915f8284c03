"""Shared fixtures. The expensive end-to-end runs are computed once per session."""

from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import settings

from safemark_lab.cli import run_pipeline, sweep_rows
from safemark_lab.config import ExperimentConfig

settings.register_profile("lab", deadline=None, max_examples=60)
settings.load_profile("lab")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_config() -> ExperimentConfig:
    return ExperimentConfig.from_document({})


# acceptance outcomes, echoed in the terminal summary: number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def timings() -> dict[str, float]:
    return {}


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory, default_config, timings):
    """The default end-to-end run: (output directory, summary dict)."""
    out = tmp_path_factory.mktemp("pipeline")
    t0 = time.perf_counter()
    summary = run_pipeline(default_config, out)
    timings["pipeline"] = time.perf_counter() - t0
    return out, summary


@pytest.fixture(scope="session")
def tau_sweep(default_config, timings):
    t0 = time.perf_counter()
    rows = sweep_rows(default_config, [0.8, 0.9, 1.0])
    timings["sweep"] = time.perf_counter() - t0
    return rows
