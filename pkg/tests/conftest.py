import pytest

ACCEPTANCE_SEED = 0


@pytest.fixture(scope="session")
def acceptance_run():
    """One full experiment-suite run shared by the acceptance criteria."""
    from cdisco import experiments
    report, artifacts = experiments.run_all(seed=ACCEPTANCE_SEED)
    return report, artifacts
