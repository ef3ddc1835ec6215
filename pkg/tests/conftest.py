import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from flexvc.model import Dataset, ModelSpec, build_group_view  # noqa: E402

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


def design_a(link="identity"):
    """Columns ``1, X1 (0/1), X2, X3``; additive, varying and cross terms on X2, X3."""
    return ModelSpec(D=4, d=4, index_sets=((3, 4), (3, 4), (4,), (3,)), link=link,
                     covariate_types=("constant", "discrete", "continuous", "continuous"))


def additive_two(link="identity"):
    return ModelSpec(D=3, d=1, index_sets=((2, 3),), link=link,
                     covariate_types=("constant", "continuous", "continuous"))


def varying_two(link="identity"):
    """``f1(x3) + f2(x4) + x2 (g1(x3) + g2(x4))`` with a continuous, non-smoothed x2."""
    return ModelSpec(D=4, d=2, index_sets=((3, 4), (3, 4)), link=link,
                     covariate_types=("constant", "continuous", "continuous", "continuous"))


SMALL_SPECS = {"design_a": design_a, "additive": additive_two, "varying": varying_two}


def random_covariates(spec: ModelSpec, n: int, rng) -> np.ndarray:
    X = rng.uniform(size=(n, spec.D))
    for k, t in enumerate(spec.covariate_types):
        if t == "constant":
            X[:, k] = 1.0
        elif t == "discrete":
            X[:, k] = rng.binomial(1, 0.5, n)
    return X


def constant_coefficient_data(spec: ModelSpec, n: int, seed: int = 0):
    """Noise-free identity-link data with every ``f_jl`` a constant."""
    rng = np.random.default_rng(seed)
    X = random_covariates(spec, n, rng)
    view = build_group_view(spec)
    coefs = {(j, l): float(rng.uniform(-1, 1)) for _, _, j, l in view.components()}
    y = sum(X[:, j - 1] * c for (j, l), c in coefs.items())
    return Dataset(X, y, spec.covariate_types), coefs


@pytest.fixture
def spec_a():
    return design_a()


@pytest.fixture
def view_a(spec_a):
    return build_group_view(spec_a)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
