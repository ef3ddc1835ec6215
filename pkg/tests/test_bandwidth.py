import numpy as np
import pytest

from conftest import design_a, random_covariates
from flexvc import bandwidth as bw
from flexvc.bandwidth import (
    PilotFit,
    SelectionConfig,
    bias_integrands,
    bias_system,
    estimate_bias_variance,
    pilot_fit,
    reflection_kde,
    select_bandwidths,
)
from flexvc.family import get_family
from flexvc.kernels import make_grid
from flexvc.model import Dataset, build_group_view
from flexvc.sbf import SmootherMatrices, constraint_residuals, _normalize_levels
from flexvc.simulation import MODEL_A, gen_model_a
from flexvc.spline import build_basis, spline_design, spline_layout

TWO_PI = 2 * np.pi


class Derivs:
    """Callable with a ``deriv(m)`` method built from explicit derivative lists."""

    def __init__(self, funcs):
        self.funcs = funcs

    def __call__(self, x):
        return self.funcs[0](np.asarray(x, dtype=float))

    def deriv(self, m=1):
        return Derivs(self.funcs[m:])


TRUE_A = {
    (1, 3): Derivs([lambda z: z**2, lambda z: 2 * z, lambda z: 2 + 0 * z]),
    (1, 4): Derivs([lambda z: 4 * (z - 0.5) ** 2, lambda z: 8 * (z - 0.5), lambda z: 8 + 0 * z]),
    (2, 3): Derivs([lambda z: z, lambda z: 1 + 0 * z, lambda z: 0 * z]),
    (2, 4): Derivs([lambda z: np.cos(TWO_PI * z), lambda z: -TWO_PI * np.sin(TWO_PI * z),
                    lambda z: -TWO_PI**2 * np.cos(TWO_PI * z)]),
    (4, 3): Derivs([lambda z: np.exp(2 * z - 1), lambda z: 2 * np.exp(2 * z - 1),
                    lambda z: 4 * np.exp(2 * z - 1)]),
    (3, 4): Derivs([lambda z: np.sin(TWO_PI * z), lambda z: TWO_PI * np.cos(TWO_PI * z),
                    lambda z: -TWO_PI**2 * np.sin(TWO_PI * z)]),
}


def truth_pilot(n, seed=5):
    """Pilot carrying the true functions and uniform densities of the logit design."""
    spec = MODEL_A.spec
    view = build_group_view(spec)
    data = gen_model_a(n, seed)
    grids = [make_grid(101)] * 2
    return PilotFit(spec, view, data, get_family("logit"), 3, TRUE_A, grids,
                    [np.ones(101)] * 2, [np.zeros(n)] * 2)


def _cubic_identity_data(n=400, seed=0, noise=0.0):
    spec = design_a("identity")
    view = build_group_view(spec)
    rng = np.random.default_rng(seed)
    coefs = {(j, l): rng.normal(size=4) for _, _, j, l in view.components()}
    X = random_covariates(spec, n, rng)
    y = sum(X[:, j - 1] * np.polyval(coefs[(j, l)], X[:, l - 1])
            for _, _, j, l in view.components())
    y = y + noise * rng.normal(size=n)
    return spec, view, Dataset(X, y, spec.covariate_types), coefs


def test_kde_of_uniform_sample():
    x = np.random.default_rng(0).uniform(size=20000)
    dens, slope = reflection_kde(x, np.linspace(0.1, 0.9, 9))
    np.testing.assert_allclose(dens, 1.0, atol=0.05)
    assert np.max(np.abs(slope)) < 1.0


def test_pilot_recovers_exact_cubics():
    spec, view, data, coefs = _cubic_identity_data()
    pilot = pilot_fit(data, spec, view)
    levels = [np.array([np.polyval(coefs[(j, view.axes[k])], pilot.grids[k]) for j in g])
              for k, g in enumerate(view.groups)]
    truth = _normalize_levels(levels, spec, view, pilot.grids)
    for a, b in zip(pilot.values, truth):
        np.testing.assert_allclose(a, b, atol=1e-8)
    np.testing.assert_allclose(pilot.linear_predictor(), data.response, atol=1e-8)
    assert pilot.dispersion < 1e-20


@pytest.mark.parametrize("degree", [0, 2, 3])
def test_pilot_is_least_squares(degree):
    spec, view, data, _ = _cubic_identity_data(noise=0.3, seed=3)
    pilot = pilot_fit(data, spec, view, degree=degree)
    basis = build_basis(0, degree=degree)
    B = spline_design(data.covariates, spec, view, basis, spline_layout(spec, view, basis))
    fitted = B @ np.linalg.lstsq(B, data.response, rcond=None)[0]
    np.testing.assert_allclose(pilot.linear_predictor(), fitted, atol=1e-10)
    if degree == 0:
        # constant components are removed entirely by normalisation
        assert max(np.abs(v).max() for v in pilot.values) < 1e-12
    assert constraint_residuals(pilot.values, spec, view, pilot.grids) < 1e-10


def test_identity_bias_integrand_simplifies():
    spec, view, data, _ = _cubic_identity_data(noise=0.5, seed=4)
    pilot = pilot_fit(data, spec, view)
    b = bias_integrands(pilot)
    X = data.covariates
    Xc = view.smoothing_covariates(X)
    designs = view.design(X)
    for k in range(view.p):
        a = view.axes[k]
        d1 = sum(X[:, j - 1] * pilot.component(j, a, Xc[:, k], 1) for j in view.groups[k])
        d2 = sum(X[:, j - 1] * pilot.component(j, a, Xc[:, k], 2) for j in view.groups[k])
        # g' = 1, g'' = V' = 0: only the density-slope, Delta and curvature terms stay
        for j in range(view.p):
            expected = (d1[:, None] * (designs[j] * pilot.log_density_slope[k][:, None]
                                       + view.delta[(j, k)][None, :])
                        + 0.5 * designs[j] * d2[:, None])
            np.testing.assert_allclose(b[(j, k)], expected, atol=1e-10)


def test_decoupled_bias_system(monkeypatch):
    pilot = truth_pilot(2000)
    original = bw.population_blocks

    def decoupled(*args, **kwargs):
        W, kmats = original(*args, **kwargs)
        off = {key: np.zeros_like(v) for key, v in W.off.items()}
        return SmootherMatrices(W.diag, off, W.grids), kmats

    monkeypatch.setattr(bw, "population_blocks", decoupled)
    system = bias_system(pilot)
    for tilde, star in zip(system.tilde_unit, system.star_unit):
        for a, b in zip(tilde, star):
            np.testing.assert_allclose(b, a, atol=1e-12, rtol=0)


@pytest.fixture(scope="module")
def truth_system():
    pilot = truth_pilot(3000)
    return pilot, bias_system(pilot)


def test_variance_scaling_and_independence(truth_system):
    pilot, system = truth_system
    base = estimate_bias_variance(pilot, c=(1.0, 0.8), system=system)
    double = estimate_bias_variance(pilot, c=(2.0, 0.8), system=system)
    tr_base = np.trace(base.sigma[0], axis1=1, axis2=2)
    tr_double = np.trace(double.sigma[0], axis1=1, axis2=2)
    np.testing.assert_allclose(tr_double, tr_base / 2, rtol=1e-12, atol=0)
    # Sigma_1 ignores c_1; the bias of every axis moves with it
    assert np.array_equal(double.sigma[1], base.sigma[1])
    assert not np.allclose(double.beta[1], base.beta[1])
    # and the tilde and star terms scale by the squared constant
    np.testing.assert_allclose(
        estimate_bias_variance(pilot, c=(2.0, 1.6), system=system).beta_star[0],
        4 * estimate_bias_variance(pilot, c=(1.0, 0.8), system=system).beta_star[0],
        rtol=1e-12, atol=1e-14)


def test_normalised_bias_satisfies_constraints(truth_system):
    pilot, system = truth_system
    est = estimate_bias_variance(pilot, c=(1.3, 0.9), system=system)
    assert constraint_residuals(est.beta, pilot.spec, pilot.view, est.grids) <= 1e-10
    for s in est.sigma:
        assert np.all(np.linalg.eigvalsh(0.5 * (s + s.transpose(0, 2, 1)))[:, 0] >= -1e-12)


def test_objective_matches_parts(truth_system):
    pilot, system = truth_system
    c = (1.2, 0.7)
    est = estimate_bias_variance(pilot, c=c, system=system)
    gram, var = bw._objective_parts(system)
    c2 = np.square(c)
    assert est.objective(system.density) == pytest.approx(c2 @ gram @ c2 + np.sum(var / c),
                                                          rel=1e-12)


def test_variance_only_objective_hits_upper_bound(truth_system):
    pilot, _ = truth_system
    cfg = SelectionConfig(include_bias=False)
    h, diag = select_bandwidths(pilot.data, pilot.spec, pilot.view, config=cfg, pilot=pilot)
    assert diag["c"] == pytest.approx((cfg.c_max, cfg.c_max))
    assert diag["at_bound"] == [0, 1]


def test_true_model_constants():
    pilot = truth_pilot(20000)
    h, diag = select_bandwidths(pilot.data, pilot.spec, pilot.view, pilot=pilot)
    # constants implied by the reference bandwidths at n = 500
    reference = np.array([0.4328, 0.2789]) * 500**0.2
    np.testing.assert_allclose(diag["c"], reference, rtol=0.1)
    assert diag["at_bound"] == []
    grid_values = [s for s in diag["surface"] if s[0] == 2]
    assert diag["objective"] <= min(v for *_, v in grid_values) + 1e-12


def test_estimate_requires_curvature():
    spec, view, data, _ = _cubic_identity_data(noise=0.3)
    pilot = pilot_fit(data, spec, view, degree=1)
    with pytest.raises(ValueError, match="degree"):
        estimate_bias_variance(pilot, c=(1.0, 1.0))

