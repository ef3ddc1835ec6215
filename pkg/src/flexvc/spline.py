"""Cubic-spline sieve estimator with an orthogonalised truncated power basis.

The raw basis on [0, 1] is ``1, z, ..., z^degree, (z - xi_k)_+^degree`` with
equispaced interior knots.  It is adjusted so that ``s_1`` is orthogonal to
``s_0`` and every later function is orthogonal to both ``s_0`` and ``s_1``
(inner product of ``L^2([0, 1])`` under the constraint weight).  Centred
components are spanned by ``s_1, s_2, ...`` and components with the
first-moment constraint by ``s_2, s_3, ...``; the constants and linear trends
they cannot carry are collected into a small parametric design.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .family import QLFamily, get_family
from .kernels import make_grid
from .model import Dataset, GroupView, ModelSpec
from .sbf import FitResult, _normalize_levels, affine_parts


class SplineFitError(RuntimeError):
    """Newton iteration for the spline fit failed."""


def _raw_basis(z, knots, degree):
    z = np.asarray(z, dtype=float)
    rows = [z**m for m in range(degree + 1)]
    rows += [np.clip(z - xi, 0.0, None) ** degree for xi in knots]
    return np.array(rows)


@dataclass(frozen=True)
class SplineBasis:
    """Adjusted basis ``s = transform @ raw(z)``.

    Attributes
    ----------
    K : int
        Number of interior knots.
    knots : ndarray
        ``xi_k = k / (K + 1)``.
    degree : int
    transform : ndarray
        Lower-triangular map from the raw power basis to ``s_0..s_{K+degree}``.
    """

    K: int
    knots: np.ndarray
    degree: int
    transform: np.ndarray

    @property
    def size(self) -> int:
        return self.K + self.degree + 1

    def __call__(self, z) -> np.ndarray:
        """Basis values, shape ``(size, len(z))``."""
        return self.transform @ _raw_basis(z, self.knots, self.degree)

    def gram(self) -> np.ndarray:
        return _gram(self, lambda v: v)


def _quadrature(knots, degree):
    """Gauss-Legendre nodes/weights exact for piecewise polynomials of degree 2*degree."""
    edges = np.concatenate([[0.0], knots, [1.0]])
    t, w = leggauss(degree + 1)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (b - a) * t + 0.5 * (a + b))
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _gram(basis, f):
    z, w = _quadrature(basis.knots, basis.degree)
    v = f(basis(z))
    return (v * w) @ v.T


def build_basis(K: int, weight: str = "uniform", degree: int = 3) -> SplineBasis:
    """Orthogonalised truncated power basis with ``K`` equispaced knots.

    ``K = 0`` gives a plain polynomial basis (used for pilot fits).
    """
    if K < 0:
        raise ValueError(f"knot count must be non-negative, got {K}")
    if weight != "uniform":
        raise ValueError(f"unsupported weight {weight!r}")
    knots = np.arange(1, K + 1) / (K + 1)
    size = K + degree + 1
    z, w = _quadrature(knots, degree)
    raw = _raw_basis(z, knots, degree)
    T = np.eye(size)
    # s_1 <- z - <z, s_0>/<s_0, s_0>, then every later function loses its
    # projection on span{s_0, s_1} (an orthogonal pair by construction).
    for m in range(1, size):
        for ref in (0, 1) if m > 1 else (0,):
            s_ref = T[ref] @ raw
            s_m = T[m] @ raw
            T[m] = T[m] - (s_m * s_ref) @ w / ((s_ref * s_ref) @ w) * T[ref]
    return SplineBasis(K=K, knots=knots, degree=degree, transform=T)


@dataclass(frozen=True)
class SplineLayout:
    """Column layout of the spline design.

    ``monomials`` are the parametric terms, each a sorted tuple of covariate
    indices (empty for the intercept).  ``columns[(j, l)]`` is the slice of the
    coefficient vector belonging to ``f_jl`` and ``first[(j, l)]`` the index of
    its first basis function (1 or 2).
    """

    monomials: tuple
    columns: dict
    first: dict
    dimension: int


def spline_layout(spec: ModelSpec, view: GroupView, basis: SplineBasis) -> SplineLayout:
    monomials = []

    def add(term):
        term = tuple(sorted(term))
        if term not in monomials:
            monomials.append(term)

    for _, _, j, l in view.components():
        own = () if spec.covariate_types[j - 1] == "constant" else (j,)
        add(own)
        if spec.needs_linear_constraint(j, l):
            add(own + (l,))
    columns, first = {}, {}
    pos = len(monomials)
    for _, _, j, l in view.components():
        start = 2 if spec.needs_linear_constraint(j, l) else 1
        width = basis.size - start
        columns[(j, l)] = slice(pos, pos + width)
        first[(j, l)] = start
        pos += width
    return SplineLayout(tuple(monomials), columns, first, pos)


def spline_design(X, spec: ModelSpec, view: GroupView, basis: SplineBasis,
                  layout: SplineLayout | None = None) -> np.ndarray:
    """Design matrix with parametric columns first, then one block per ``f_jl``."""
    layout = layout or spline_layout(spec, view, basis)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cols = [np.prod(X[:, [t - 1 for t in term]], axis=1) for term in layout.monomials]
    for _, _, j, l in view.components():
        s = basis(X[:, l - 1])[layout.first[(j, l)]:]
        cols.extend(X[:, j - 1] * s)
    return np.column_stack(cols)


def _newton(B, y, family: QLFamily, max_steps=50, grad_tol=1e-8, jitter=1e-8):
    n, m = B.shape
    beta = np.zeros(m)
    warned = False

    def objective(b):
        return float(np.sum(family.Q(family.g_inv(family.clamp(B @ b)), y)))

    value = objective(beta)
    for step in range(1, max_steps + 1):
        q1, q2 = family.q_derivs(B @ beta, y)
        grad = B.T @ q1
        if np.max(np.abs(grad)) / n <= grad_tol:
            return beta, step - 1
        H = (B * (-q2)[:, None]).T @ B
        if np.linalg.cond(H) > 1e12:
            if not warned:
                warnings.warn("spline design is nearly singular; adding a ridge", RuntimeWarning,
                              stacklevel=3)
                warned = True
            H = H + jitter * np.trace(H) / m * np.eye(m)
        direction = np.linalg.solve(H, grad)
        t = 1.0
        for _ in range(30):
            trial = beta + t * direction
            new = objective(trial)
            if np.isfinite(new) and new >= value - 1e-12 * abs(value):
                break
            t *= 0.5
        else:
            raise SplineFitError(f"step halving failed at Newton step {step}")
        beta, value = trial, new
        if not np.all(np.isfinite(beta)):
            raise SplineFitError("non-finite spline coefficients")
    q1, _ = family.q_derivs(B @ beta, y)
    if np.max(np.abs(B.T @ q1)) / n <= grad_tol:
        return beta, max_steps
    raise SplineFitError(f"no convergence in {max_steps} Newton steps")


def component_coefficients(spec: ModelSpec, view: GroupView, basis: SplineBasis,
                           layout: SplineLayout, beta) -> dict:
    """Raw-basis coefficients of every ``f_jl`` with the parametric terms folded in.

    Each parametric monomial is attributed to the first component that can
    carry it (as a constant, or as the linear function of that component's
    axis), so that ``sum_j x_j sum_l f_jl(x_l)`` reproduces the fitted predictor.
    Coefficients refer to :func:`_raw_basis` (powers first, then truncated powers)
    and have at least two entries.
    """
    beta = np.asarray(beta, dtype=float)
    coef = dict(zip(layout.monomials, beta[: len(layout.monomials)]))
    assigned = set()
    out = {}
    for _, _, j, l in view.components():
        first = layout.first[(j, l)]
        c = beta[layout.columns[(j, l)]] @ basis.transform[first:]
        if len(c) < 2:  # degree-0 bases still carry attributed linear trends
            c = np.pad(c, (0, 2 - len(c)))
        own = () if spec.covariate_types[j - 1] == "constant" else (j,)
        terms = [(own, 0)]
        if spec.needs_linear_constraint(j, l):
            terms.append((tuple(sorted(own + (l,))), 1))
        for term, power in terms:
            if term not in assigned:
                assigned.add(term)
                c[power] += coef[term]
        out[(j, l)] = c
    return out


def fit_sieve(data: Dataset, spec: ModelSpec, view: GroupView, family: QLFamily,
              K: int = 1, degree: int = 3):
    """Maximise the sample quasi-likelihood over the spline span.

    Returns ``(basis, layout, coefficients, newton_steps)``.
    """
    basis = build_basis(K, degree=degree)
    layout = spline_layout(spec, view, basis)
    B = spline_design(data.covariates, spec, view, basis, layout)
    beta, steps = _newton(B, data.response, family)
    return basis, layout, beta, steps


def fit_spline(data: Dataset, spec: ModelSpec, view: GroupView, family: QLFamily | None = None,
               K: int = 1, grid_size: int = 101, degree: int = 3) -> FitResult:
    """Quasi-likelihood spline sieve fit.

    Returns a :class:`FitResult` of kind ``"spline"`` whose ``values`` are the
    normalised components on the standard grids.  ``raw`` carries the
    parametric terms as well (see :func:`component_coefficients`), so it
    reproduces the fitted predictor up to grid interpolation.
    """
    if degree < 1:
        raise ValueError(f"spline degree must be at least 1, got {degree}")
    family = family or get_family(spec.link)
    basis, layout, beta, steps = fit_sieve(data, spec, view, family, K, degree)
    grids = [make_grid(grid_size) for _ in view.axes]
    coefs = component_coefficients(spec, view, basis, layout, beta)
    levels = [np.zeros((dk, grid_size)) for dk in view.sizes]
    for k, slot, j, l in view.components():
        levels[k][slot] = coefs[(j, l)] @ _raw_basis(grids[k], basis.knots, basis.degree)
    consts, lins = affine_parts(levels, spec, view, grids)
    return FitResult(
        kind="spline",
        values=_normalize_levels(levels, spec, view, grids),
        grids=grids,
        view=view,
        raw=levels,
        converged=True,
        parametric={"const": consts, "linear": lins, "coefficients": beta, "newton_steps": steps},
    )
