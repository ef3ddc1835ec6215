import numpy as np
import pytest

from conftest import design_a, random_covariates
from flexvc.family import get_family
from flexvc.model import Dataset, ModelSpec, build_group_view
from flexvc.sbf import constraint_residuals, predict
from flexvc.simulation import MODEL_A, compute_metrics, gen_model_a
from flexvc.spline import (
    build_basis,
    fit_sieve,
    fit_spline,
    spline_design,
    spline_layout,
)


def test_k1_basis():
    basis = build_basis(1)
    np.testing.assert_array_equal(basis.knots, [0.5])
    z = np.linspace(0, 1, 7)
    values = basis(z)
    np.testing.assert_allclose(values[0], 1.0)
    np.testing.assert_allclose(values[1], z - 0.5, atol=1e-14)


@pytest.mark.parametrize("K", [1, 2, 3, 5])
def test_gram_zero_blocks(K):
    gram = build_basis(K).gram()
    assert np.all(np.abs(gram[0, 1:]) < 1e-10)
    assert np.all(np.abs(gram[1, 2:]) < 1e-10)
    # independent of the quadrature used to build it
    z = np.linspace(0, 1, 200001)
    s = build_basis(K)(z)
    dense = (s[:, None, :] * s[None, :, :]).mean(axis=-1)
    assert np.all(np.abs(dense[:2, 2:]) < 1e-5)


@pytest.mark.parametrize("K", [1, 2, 3])
def test_dimension_for_simulation_layout(K):
    spec = MODEL_A.spec
    layout = spline_layout(spec, build_group_view(spec), build_basis(K))
    assert layout.dimension == 6 * K + 19


def _cubic_truth(spec, view, rng):
    coefs = {(j, l): rng.normal(size=4) for _, _, j, l in view.components()}

    def f(j, l, z):
        return np.polyval(coefs[(j, l)], z)

    return f


def test_exact_cubic_recovery():
    spec = design_a("identity")
    view = build_group_view(spec)
    rng = np.random.default_rng(0)
    f = _cubic_truth(spec, view, rng)
    X = random_covariates(spec, 400, rng)
    y = sum(X[:, j - 1] * f(j, l, X[:, l - 1]) for _, _, j, l in view.components())
    fit = fit_spline(Dataset(X, y, spec.covariate_types), spec, view, K=1)
    from flexvc.sbf import _normalize_levels

    levels = [np.array([f(j, view.axes[k], fit.grids[k]) for j in g])
              for k, g in enumerate(view.groups)]
    truth = _normalize_levels(levels, spec, view, fit.grids)
    for a, b in zip(fit.values, truth):
        np.testing.assert_allclose(a, b, atol=1e-8)
    lp, _ = predict(fit, spec, view, X[:5])
    # raw levels are exact cubics, the grid interpolation is not
    assert np.max(np.abs(lp - y[:5])) < 1e-3
    assert constraint_residuals(fit.values, spec, view, fit.grids) <= 1e-10


def test_identity_fit_equals_normal_equations():
    spec = design_a("identity")
    view = build_group_view(spec)
    rng = np.random.default_rng(1)
    X = random_covariates(spec, 300, rng)
    y = np.sin(4 * X[:, 2]) * X[:, 1] + X[:, 3] ** 2 + 0.2 * rng.normal(size=300)
    basis, layout, beta, _ = fit_sieve(Dataset(X, y), spec, view, get_family("identity"), K=2)
    B = spline_design(X, spec, view, basis, layout)
    ref = np.linalg.solve(B.T @ B, B.T @ y)
    np.testing.assert_allclose(beta, ref, atol=1e-10 * max(1.0, np.abs(ref).max()))


def test_logit_fit_is_stationary():
    spec = MODEL_A.spec
    view = build_group_view(spec)
    data = gen_model_a(500, 9)
    basis, layout, beta, steps = fit_sieve(data, spec, view, get_family("logit"), K=1)
    B = spline_design(data.covariates, spec, view, basis, layout)
    fam = get_family("logit")
    grad = B.T @ (data.response - fam.g_inv(B @ beta))
    assert np.max(np.abs(grad)) / data.n <= 1e-8
    assert 1 <= steps <= 50


def test_collinear_design_warns():
    spec = ModelSpec(D=4, d=2, index_sets=((3, 4), (3, 4)),
                     covariate_types=("constant", "continuous", "continuous", "continuous"))
    view = build_group_view(spec)
    rng = np.random.default_rng(2)
    X = random_covariates(spec, 200, rng)
    X[:, 1] = 1.0  # second coefficient covariate duplicates the intercept
    with pytest.warns(RuntimeWarning, match="nearly singular"):
        fit_spline(Dataset(X, rng.normal(size=200)), spec, view, K=1)


@pytest.mark.filterwarnings("ignore:spline design is nearly singular")
def test_more_knots_worsen_simulation_fit():
    spec = MODEL_A.spec
    view = build_group_view(spec)
    data = [gen_model_a(500, 20240101 + r) for r in range(60)]
    total = []
    for K in (1, 2, 3):
        fits = [fit_spline(d, spec, view, K=K) for d in data]
        table = compute_metrics(fits, MODEL_A)
        total.append(sum(r["IMSE"] for r in table.rows))
    assert total[0] < total[1] < total[2]
