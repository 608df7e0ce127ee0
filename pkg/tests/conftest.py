"""Shared simulation studies. They are expensive, so each runs once per session."""
import numpy as np
import pytest

from taglasso.simulation import DesignSpec, run_study

STUDY_REPS = 30
STUDY_SEED = 2024


class RefitAudit:
    """Checks the feasibility of every refit made during cross-validation."""

    def __init__(self):
        self.n = 0
        self.failures = []

    def __call__(self, est, am):
        self.n += 1
        z = est.constraints.z
        off = float(np.abs(est.omega[~est.constraints.pattern]).max(initial=0.0))
        rows = float(np.abs(est.gamma[~z]).max(initial=0.0))
        rec = float(np.abs((am.a * z) @ est.gamma + np.diag(est.d) - est.omega).max())
        if off > 1e-8 or rows != 0.0 or rec > 1e-6:
            self.failures.append((off, rows, rec))


def _study(kind):
    audit = RefitAudit()
    result = run_study(DesignSpec(kind), n=120, reps=STUDY_REPS,
                       estimators=("oracle", "taglasso_ideal", "glasso"),
                       seed=STUDY_SEED, on_refit=audit)
    return result, audit


@pytest.fixture(scope="session")
def chain_study():
    return _study("chain")


@pytest.fixture(scope="session")
def unstructured_study():
    return _study("unstructured")
