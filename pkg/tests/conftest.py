"""
Shared fixtures for the test suites.
"""
import copy
import os
import sys

import pytest

# Add repository root to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

MINIMAL_CONFIG = {
    "schema_version": 1,
    "seed": 7,
    "data": {"n": 50, "B": 1.0},
    "train": {"eta": 0.5},
    "perturb": {"generator": "retrain-perturbed", "r": 1, "count": 5},
    "profile": {"n_mc": 2_000, "n_test": 10, "n_boot": 200},
    "counterfactual": {"sample_negatives": 2, "margin_slacks": [0.0, 0.35]},
    "stability": {"k": 50, "sigma2": 0.01, "tau": 0.7},
    "bounds": {"theorems": ["T2"], "k": [50], "epsilon": [0.3], "ell": [3.0], "trials": 500,
               "kappa_n_mc": 5_000},
}


@pytest.fixture
def minimal_config():
    """Small end-to-end config: n=50, r=1, 5 members, 2 queries, 1 grid point."""
    return copy.deepcopy(MINIMAL_CONFIG)


@pytest.fixture(scope="session")
def completed_run(tmp_path_factory):
    """One full pipeline run of the minimal config, shared by the pipeline and CLI suites."""
    from robustness.pipeline import run_pipeline

    out = tmp_path_factory.mktemp("run")
    manifest = run_pipeline(copy.deepcopy(MINIMAL_CONFIG), str(out))
    return manifest
