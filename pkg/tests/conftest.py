import warnings

import numpy as np
import pytest

from binflow.targets import make_target
from binflow.poisson import relative_density

APP_FAMILIES = (
    "poisson", "poisson_mixture", "zip", "nbm", "bnb", "zipf", "yule_simon",
)


@pytest.fixture(scope="session")
def targets():
    """All seven experiment targets at their default parameters and caps."""
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for family in APP_FAMILIES:
            out[family] = make_target(family)
    return out


@pytest.fixture(scope="session")
def tables(targets):
    """Flow tables at T = 1 for every experiment target."""
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for family, pmf in targets.items():
            out[family] = relative_density(pmf, 1.0)
    return out


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
