import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gsmeta.mpg import Dataset, build_mpg, split_properties

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

SMALL_SMILES = ["CCO", "CC(=O)O", "c1ccccc1", "CCN", "C1CC1", "OCC(O)CO", "CC#N", "NCC(=O)O",
                "c1ccncc1", "CCCC", "CC(C)C", "O=C=O", "CCOC", "C=CC=C", "ClCCl", "CS"]


def random_dataset(n_mol=50, n_prop=6, seed=0, missing=0.1, smiles=None):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=(n_mol, n_prop)).astype(float)
    labels[rng.random(labels.shape) < missing] = np.nan
    pool = SMALL_SMILES if smiles is None else smiles
    mols = tuple(pool[i % len(pool)] for i in range(n_mol))
    return Dataset(mols, tuple(f"p{j}" for j in range(n_prop)), labels)


@pytest.fixture
def small_graph():
    ds = random_dataset()
    mpg = build_mpg(ds, 8, rng=np.random.default_rng(0))
    return mpg, split_properties(mpg, 2)


# acceptance criteria report one line each at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[name] = (bool(passed), detail)
    print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
