import json

import pytest

from t2dm_screen.dataset import BuildConfig, build_dataset
from t2dm_screen.fixtures import FixtureConfig, generate_cohort


@pytest.fixture(scope="session")
def cohort20(tmp_path_factory):
    """The 20-patient edge-case cohort and its ground-truth manifest."""
    root = tmp_path_factory.mktemp("cohort20")
    expected = generate_cohort(FixtureConfig(n_patients=20, seed=0), root)
    return root, expected


@pytest.fixture(scope="session")
def cohort60(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort60")
    expected = generate_cohort(FixtureConfig(n_patients=60, seed=1), root)
    return root, expected


@pytest.fixture(scope="session")
def built60(cohort60):
    root, _ = cohort60
    return build_dataset(root, BuildConfig(seed=3))


def read_expected(root):
    return json.loads((root / "expected.json").read_text())
