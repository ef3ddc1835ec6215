"""Plug-in bandwidth selection from the asymptotic bias and variance.

With ``h_j = c_j n^(-1/5)`` the scaled bias of the backfitting estimator is
``beta(c) = sum_k c_k^2 beta^(k)``, where each ``beta^(k)`` solves the same
linear backfitting system as the estimator itself (population curvature
blocks in place of the empirical ones), and the scaled variance of axis j is
``Sigma_j / c_j``.  Both are estimated from a polynomial pilot fit, and the
bandwidth constants minimise

    J(c) = sum_j int (|beta_j(z, c)|^2 + trace Sigma_j(z, c_j)) p_j(z) dz.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy.optimize import minimize_scalar

from .family import QLFamily, get_family
from .kernels import KERNELS, make_grid, normalized_kernel_matrix, trapezoid_weights
from .model import Dataset, GroupView, ModelSpec
from .sbf import (SBFConfig, SmootherMatrices, _normalize_levels, inner_solve, invert_diagonal,
                  parametric_directions)
from .spline import SplineFitError, fit_sieve, component_coefficients


class PilotError(RuntimeError):
    pass


class BiasSystemError(RuntimeError):
    pass


class SelectionError(RuntimeError):
    pass


# --------------------------------------------------------------------------- #
# Densities
# --------------------------------------------------------------------------- #


def _gauss(u):
    return np.exp(-0.5 * u * u) / np.sqrt(2 * np.pi)


def reflection_kde(sample, points, bandwidth: float | None = None):
    """Gaussian KDE on [0, 1] with reflection at both ends.

    Returns ``(density, derivative)`` at ``points``.  The default bandwidth is
    the normal-reference rule ``1.06 sigma n^(-1/5)``.
    """
    x = np.asarray(sample, dtype=float)
    t = np.asarray(points, dtype=float)
    if bandwidth is None:
        bandwidth = 1.06 * np.std(x) * len(x) ** -0.2
    b = float(bandwidth)
    dens = np.zeros_like(t)
    slope = np.zeros_like(t)
    step = max(1, 2_000_000 // max(len(x), 1))
    for lo in range(0, len(t), step):
        part = t[lo:lo + step]
        for centre in (x, -x, 2.0 - x):
            u = (part[:, None] - centre[None, :]) / b
            k = _gauss(u)
            dens[lo:lo + step] += k.sum(axis=1)
            slope[lo:lo + step] -= (u * k).sum(axis=1)
    n = len(x)
    return dens / (n * b), slope / (n * b * b)


def rule_of_thumb(sample) -> float:
    """Epanechnikov normal-reference bandwidth ``2.34 sigma n^(-1/5)``, capped at 0.5."""
    x = np.asarray(sample, dtype=float)
    return float(min(0.5, 2.34 * np.std(x) * len(x) ** -0.2))


# --------------------------------------------------------------------------- #
# Pilot
# --------------------------------------------------------------------------- #


@dataclass
class PilotFit:
    """Parametric pilot estimate of the model and the covariate densities.

    Attributes
    ----------
    functions : dict
        ``(j, l) -> callable`` with a ``deriv(m)`` method (``numpy`` polynomials
        for a fitted pilot).  Parametric terms are folded into the components.
    density : list of ndarray
        Marginal density of each smoothing covariate on ``grids``.
    log_density_slope : list of ndarray
        ``p_k'(x) / p_k(x)`` at the sample values of axis k (product-density
        approximation of the joint density derivative).
    dispersion : float
        ``phi`` with ``Var(Y | X) = phi V(m(X))``.
    """

    spec: ModelSpec
    view: GroupView
    data: Dataset
    family: QLFamily
    degree: int
    functions: dict
    grids: list
    density: list
    log_density_slope: list
    dispersion: float = 1.0
    values: list = field(default_factory=list)

    def component(self, j, l, x, deriv: int = 0):
        f = self.functions[(j, l)]
        return (f.deriv(deriv) if deriv else f)(np.asarray(x, dtype=float))

    def linear_predictor(self, X=None) -> np.ndarray:
        X = self.data.covariates if X is None else np.atleast_2d(X)
        eta = np.zeros(X.shape[0])
        for _, _, j, l in self.view.components():
            eta += X[:, j - 1] * self.component(j, l, X[:, l - 1])
        return eta


def pilot_fit(data: Dataset, spec: ModelSpec, view: GroupView, family: QLFamily | None = None,
              degree: int = 3, grid_size: int = 101) -> PilotFit:
    """Quasi-likelihood fit with polynomial components of the given degree."""
    family = family or get_family(spec.link)
    if degree < 0:
        raise ValueError(f"pilot degree must be non-negative, got {degree}")
    try:
        basis, layout, beta, _ = fit_sieve(data, spec, view, family, K=0, degree=degree)
    except (SplineFitError, np.linalg.LinAlgError) as exc:
        raise PilotError(f"pilot fit of degree {degree} failed ({exc}); try a lower degree") from exc
    coefs = component_coefficients(spec, view, basis, layout, beta)
    functions = {key: Polynomial(c) for key, c in coefs.items()}
    grids = [make_grid(grid_size) for _ in view.axes]
    Xc = view.smoothing_covariates(data.covariates)
    density, slope = [], []
    for k in range(view.p):
        dens, _ = reflection_kde(Xc[:, k], grids[k])
        p_at, dp_at = reflection_kde(Xc[:, k], Xc[:, k])
        density.append(dens)
        slope.append(dp_at / p_at)
    pilot = PilotFit(spec, view, data, family, degree, functions, grids, density, slope)
    eta = pilot.linear_predictor()
    if not np.all(np.isfinite(eta)):
        raise PilotError("pilot linear predictor is not finite")
    if family.name == "identity":
        dof = max(data.n - layout.dimension, 1)
        pilot.dispersion = float(np.sum((data.response - eta) ** 2) / dof)
    levels = [
        np.array([functions[(j, view.axes[k])](grids[k]) for j in g])
        for k, g in enumerate(view.groups)
    ]
    pilot.values = _normalize_levels(levels, spec, view, grids)
    return pilot


# --------------------------------------------------------------------------- #
# Bias system
# --------------------------------------------------------------------------- #


def bias_integrands(pilot: PilotFit, family: QLFamily | None = None) -> dict:
    """``b_jk(X_i)`` at every observation: ``{(j, k): (n, d_j)}`` (0-based axes).

    Each pilot quantity (components and their derivatives, link derivatives,
    the log-density slope) is plugged into the closed-form bias integrand.
    """
    family = family or pilot.family
    view = pilot.view
    X = pilot.data.covariates
    Xc = view.smoothing_covariates(X)
    designs = view.design(X)
    mu = family.g_inv(family.clamp(pilot.linear_predictor()))
    g1, g2 = family.g1(mu), family.g2(mu)
    V, V1 = family.V(mu), family.V1(mu)
    vg = V * g1
    vals, d1, d2 = [], [], []
    for k, g in enumerate(view.groups):
        a = view.axes[k]
        vals.append(np.column_stack([pilot.component(j, a, Xc[:, k]) for j in g]))
        d1.append(np.column_stack([pilot.component(j, a, Xc[:, k], 1) for j in g]))
        d2.append(np.column_stack([pilot.component(j, a, Xc[:, k], 2) for j in g]))
    out = {}
    for k in range(view.p):
        # Delta_k^T f(X^c): functions whose multiplying covariate is axis k
        df = sum(vals[m] @ view.delta[(m, k)] for m in range(view.p))
        s1 = np.sum(designs[k] * d1[k], axis=1)
        s2 = np.sum(designs[k] * d2[k], axis=1)
        m1 = (s1 + df) / g1
        m2 = s2 / g1 - g2 * (s1 + df) ** 2 / g1**3
        lead = m1 - df / g1
        curv = V1 / (V**2 * g1**2) + g2 / (V * g1**3)
        for j in range(view.p):
            xj = designs[j]
            bracket = (
                xj * (pilot.log_density_slope[k] / vg)[:, None]
                - xj * (df * curv)[:, None]
                + view.delta[(j, k)][None, :] / vg[:, None]
            )
            second = 0.5 * xj * ((m2 + g2 * df**2 / g1**3) / vg)[:, None]
            out[(j, k)] = lead[:, None] * bracket + second
    return out


@dataclass
class BiasSystem:
    """Precomputed pieces of the plug-in bias and variance.

    ``beta_unit[k]`` is the normalised bias with ``c = e_k`` (unit constant on
    axis k, zero elsewhere), ``tilde_unit[k]`` the matching right-hand side and
    ``sigma_unit[j]`` the variance of axis j at ``c_j = 1``.
    """

    W: SmootherMatrices
    tilde_unit: list
    star_unit: list
    beta_unit: list
    sigma_unit: list
    density: list
    grids: list
    expectations: dict
    inner_sweeps: list


def population_blocks(pilot: PilotFit, bandwidths=None, family: QLFamily | None = None):
    """Kernel estimates of ``W_jj(z)`` and ``W_jk(z_j, z_k)`` at the pilot.

    ``W_jj(z) = E[x_j x_j^T / (V g'^2) | X_j = z] p_j(z)`` is estimated by the
    kernel-weighted sample average (and likewise the pairwise blocks).  Returns
    the blocks and the kernel matrices used.
    """
    family = family or pilot.family
    view = pilot.view
    X = pilot.data.covariates
    Xc = view.smoothing_covariates(X)
    n = X.shape[0]
    if bandwidths is None:
        bandwidths = [rule_of_thumb(Xc[:, k]) for k in range(view.p)]
    kmats = [normalized_kernel_matrix(Xc[:, k], z, h)
             for k, (z, h) in enumerate(zip(pilot.grids, bandwidths))]
    mu = family.g_inv(family.clamp(pilot.linear_predictor()))
    w = 1.0 / (family.V(mu) * family.g1(mu) ** 2)
    designs = view.design(X)
    diag = [np.einsum("ia,ib,ig->gab", x * w[:, None], x, K) / n for x, K in zip(designs, kmats)]
    off = {}
    for j in range(view.p):
        left = (designs[j] * w[:, None])[:, :, None] * kmats[j][:, None, :]
        for k in range(j + 1, view.p):
            right = designs[k][:, :, None] * kmats[k][:, None, :]
            blk = np.tensordot(left, right, axes=(0, 0)) / n      # (a, g, b, h)
            off[(j, k)] = blk.transpose(1, 3, 0, 2)
            off[(k, j)] = blk.transpose(3, 1, 2, 0)
    return SmootherMatrices(diag=diag, off=off, grids=list(pilot.grids)), kmats


def bias_system(pilot: PilotFit, family: QLFamily | None = None, kernel: str = "epanechnikov",
                bandwidths=None, config: SBFConfig | None = None) -> BiasSystem:
    """Solve the bias equations once per axis and tabulate the unit variances."""
    family = family or pilot.family
    view, spec = pilot.view, pilot.spec
    _, mu2, roughness = KERNELS[kernel]
    W, kmats = population_blocks(pilot, bandwidths, family)
    inverses, _ = invert_diagonal(W)
    n = pilot.data.n
    b = bias_integrands(pilot, family)
    expectations = {key: np.einsum("ia,ig->ag", val, kmats[key[0]]) / n for key, val in b.items()}
    config = config or SBFConfig()
    directions = parametric_directions(spec, view, pilot.grids)

    def normalize(blocks):
        return _normalize_levels(blocks, spec, view, pilot.grids)

    tilde_unit, star_unit, beta_unit, sweeps = [], [], [], []
    for k in range(view.p):
        tilde = [mu2 * np.einsum("gab,bg->ag", inverses[j], expectations[(j, k)])
                 for j in range(view.p)]
        try:
            star, info = inner_solve(W, tilde, config, normalize=normalize, inverses=inverses,
                                     subspace=directions)
        except Exception as exc:
            raise BiasSystemError(f"bias equations for axis {k} did not contract: {exc}") from exc
        tilde_unit.append(tilde)
        star_unit.append(star)
        beta_unit.append(normalize(star))
        sweeps.append(info.sweeps)
    sigma_unit = [roughness * pilot.dispersion * inv for inv in inverses]
    return BiasSystem(W, tilde_unit, star_unit, beta_unit, sigma_unit, list(pilot.density),
                      list(pilot.grids), expectations, sweeps)


@dataclass
class BiasVariance:
    """Plug-in bias and variance at bandwidth constants ``c``."""

    c: tuple
    beta_tilde: list
    beta_star: list
    beta: list
    sigma: list
    b_terms: dict
    grids: list

    def objective(self, density) -> float:
        total = 0.0
        for bj, sj, pj, z in zip(self.beta, self.sigma, density, self.grids):
            q = trapezoid_weights(z) * pj
            total += float((bj * bj).sum(axis=0) @ q + np.trace(sj, axis1=1, axis2=2) @ q)
        return total


def estimate_bias_variance(pilot: PilotFit, view: GroupView | None = None,
                           family: QLFamily | None = None, c=None, grid=None,
                           system: BiasSystem | None = None) -> BiasVariance:
    """Bias ``beta_j(., c)`` and variance ``Sigma_j(., c_j)`` on the pilot grids.

    ``grid`` is accepted for interface symmetry; the pilot grids are used.
    """
    if pilot.degree < 2:
        raise ValueError("bias estimation needs a pilot of degree at least 2")
    system = system or bias_system(pilot, family)
    view = view or pilot.view
    c = np.asarray(c, dtype=float)
    if c.shape != (view.p,) or np.any(c <= 0):
        raise ValueError(f"need {view.p} positive bandwidth constants, got {c}")
    c2 = c**2

    def combine(units):
        return [sum(c2[k] * units[k][j] for k in range(view.p)) for j in range(view.p)]

    sigma = [s / cj for s, cj in zip(system.sigma_unit, c)]
    return BiasVariance(tuple(c), combine(system.tilde_unit), combine(system.star_unit),
                        combine(system.beta_unit), sigma, system.expectations, system.grids)


# --------------------------------------------------------------------------- #
# Selection
# --------------------------------------------------------------------------- #


@dataclass
class SelectionConfig:
    """Coordinate-descent settings for the bandwidth constants.

    After ``sweeps`` passes over the log-spaced grid each coordinate is refined
    by a bounded scalar search between the neighbouring grid points (set
    ``refine=False`` to return the grid optimum).
    """

    degree: int = 3
    c_min: float = 0.1
    c_max: float = 3.0
    points: int = 15
    sweeps: int = 3
    refine: bool = True
    include_bias: bool = True

    @property
    def c_grid(self) -> np.ndarray:
        return np.geomspace(self.c_min, self.c_max, self.points)


def _objective_parts(system: BiasSystem):
    """``J(c) = (c^2)^T G (c^2) + sum_j v_j / c_j`` from the unit solutions."""
    p = len(system.beta_unit)
    q = [trapezoid_weights(z) * d for z, d in zip(system.grids, system.density)]
    gram = np.array([
        [sum(float((system.beta_unit[a][j] * system.beta_unit[b][j]).sum(axis=0) @ q[j])
             for j in range(p)) for b in range(p)]
        for a in range(p)
    ])
    var = np.array([float(np.trace(s, axis1=1, axis2=2) @ qj)
                    for s, qj in zip(system.sigma_unit, q)])
    return gram, var


def select_bandwidths(data: Dataset, spec: ModelSpec, view: GroupView,
                      family: QLFamily | None = None, config: SelectionConfig | None = None,
                      pilot: PilotFit | None = None):
    """Plug-in bandwidths ``h_j = c_j n^(-1/5)``.

    Returns ``(h, diagnostics)``; ``diagnostics`` holds the constants, the
    objective value, the evaluated surface ``[(sweep, axis, c, J), ...]`` and
    the axes whose constant ended on a grid bound.
    """
    config = config or SelectionConfig()
    family = family or get_family(spec.link)
    pilot = pilot or pilot_fit(data, spec, view, family, config.degree)
    system = bias_system(pilot, family)
    gram, var = _objective_parts(system)
    if not config.include_bias:
        gram = np.zeros_like(gram)

    def J(c):
        c2 = np.asarray(c) ** 2
        return float(c2 @ gram @ c2 + np.sum(var / np.asarray(c)))

    grid = config.c_grid
    c = np.full(view.p, grid[len(grid) // 2])
    surface = []
    for sweep in range(config.sweeps):
        for k in range(view.p):
            values = []
            for value in grid:
                trial = c.copy()
                trial[k] = value
                values.append(J(trial))
                surface.append((sweep, k, float(value), values[-1]))
            values = np.array(values)
            if not np.any(np.isfinite(values)):
                raise SelectionError(f"objective is not finite anywhere on the grid for axis {k}")
            c[k] = grid[int(np.nanargmin(values))]   # first minimum = smallest c
    at_bound = [k for k in range(view.p) if c[k] in (grid[0], grid[-1])]
    if config.refine:
        for _ in range(20):
            old = c.copy()
            for k in range(view.p):
                i = int(np.argmin(np.abs(grid - c[k])))
                lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]

                def along(v, k=k):
                    trial = c.copy()
                    trial[k] = v
                    return J(trial)

                res = minimize_scalar(along, bounds=(lo, hi), method="bounded",
                                      options={"xatol": 1e-6})
                if res.fun <= along(c[k]):
                    c[k] = res.x
            if np.max(np.abs(c - old)) < 1e-6:
                break
    h = c * data.n ** -0.2
    diagnostics = {
        "c": tuple(float(v) for v in c),
        "h": tuple(float(v) for v in h),
        "objective": J(c),
        "surface": surface,
        "at_bound": at_bound,
        "bias_gram": gram,
        "variance": var,
        "dispersion": pilot.dispersion,
        "pilot": pilot,
        "system": system,
    }
    return h, diagnostics
