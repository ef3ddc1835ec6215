"""Smooth backfitting for flexible generalized varying coefficient models.

The estimator maximises the integrated kernel-weighted quasi-likelihood over
tuples of univariate coefficient functions stored on per-axis grids.  Every
integral is a trapezoid sum on those grids.  The root of the estimating
equations is found by an outer Newton-Raphson loop; each Newton step solves a
coupled system of linear integral equations by Gauss-Seidel backfitting sweeps.

Internally a tuple is a list of ``(D_k, G_k)`` arrays, one per smoothing axis.
For Nadaraya-Watson fits ``D_k = d_k``; for local-linear fits the first
``d_k`` rows hold the levels and the last ``d_k`` rows the scaled slopes
``h_k f'``.  Iterates are kept in raw (unconstrained) form: the identifiability
constraints are imposed by :func:`normalize_tuple`, which only changes the
representation, never the fitted linear predictor (the removed constant and
linear parts are kept alongside).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .family import QLFamily, get_family
from .kernels import (
    KernelSpec,
    make_grid,
    normalized_kernel_matrix,
    trapezoid_weights,
)
from .model import Dataset, GroupView, ModelSpec, build_group_view

KINDS = ("nw", "ll")


class NormalizationError(ValueError):
    pass


class InnerDivergenceError(RuntimeError):
    """Backfitting sweeps stopped contracting."""

    def __init__(self, message, ratios):
        super().__init__(message)
        self.ratios = list(ratios)


# --------------------------------------------------------------------------- #
# Function tuples and normalisation
# --------------------------------------------------------------------------- #


@dataclass
class FunctionTuple:
    """Coefficient functions on per-axis grids.

    ``values[k]`` is ``(d_k, G_k)``: row ``slot`` holds ``f_jl`` with
    ``j = view.groups[k][slot]`` and ``l = view.axes[k]``.  ``slopes`` has the
    same layout and is only present for local-linear tuples.
    """

    values: list
    grids: list
    slopes: list | None = None

    @classmethod
    def zeros(cls, view: GroupView, grid_size: int = 101, local_linear: bool = False):
        grids = [make_grid(grid_size) for _ in view.axes]
        vals = [np.zeros((dk, len(g))) for dk, g in zip(view.sizes, grids)]
        slopes = [v.copy() for v in vals] if local_linear else None
        return cls(vals, grids, slopes)

    @property
    def local_linear(self) -> bool:
        return self.slopes is not None

    def stacked(self) -> list[np.ndarray]:
        if self.slopes is None:
            return [np.array(v, dtype=float) for v in self.values]
        return [np.vstack([v, s]) for v, s in zip(self.values, self.slopes)]

    @classmethod
    def from_stacked(cls, blocks, grids, local_linear: bool):
        if not local_linear:
            return cls([np.array(b) for b in blocks], list(grids))
        half = [b.shape[0] // 2 for b in blocks]
        return cls(
            [b[:h].copy() for b, h in zip(blocks, half)],
            list(grids),
            [b[h:].copy() for b, h in zip(blocks, half)],
        )


def weight_values(spec: ModelSpec, grid) -> np.ndarray:
    """Constraint weight on the grid, scaled to integrate to one."""
    w = np.ones_like(np.asarray(grid, dtype=float))
    return w / (w @ trapezoid_weights(grid))


def affine_parts(levels, spec: ModelSpec, view: GroupView, grids):
    """Constant ``a`` and slope ``b`` removed from each component by normalisation.

    Returns two lists of ``(d_k,)`` arrays; ``b`` is zero for components
    without the first-moment constraint.
    """
    consts, lins = [], []
    for k, (eta, z) in enumerate(zip(levels, grids)):
        q = trapezoid_weights(z) * weight_values(spec, z)
        mean = eta @ q
        zbar = z @ q
        var = (z - zbar) ** 2 @ q
        if var <= 0:
            raise NormalizationError(f"weight on axis x{view.axes[k]} has zero variance")
        b = ((z - zbar) * eta) @ q / var
        mask = np.array(
            [spec.needs_linear_constraint(j, view.axes[k]) for j in view.groups[k]], dtype=bool
        )
        b = np.where(mask, b, 0.0)
        consts.append(mean - b * zbar)
        lins.append(b)
    return consts, lins


def _normalize_levels(levels, spec, view, grids):
    consts, lins = affine_parts(levels, spec, view, grids)
    return [
        eta - a[:, None] - b[:, None] * z[None, :]
        for eta, a, b, z in zip(levels, consts, lins, grids)
    ]


def normalize_tuple(eta: FunctionTuple, spec: ModelSpec, view: GroupView | None = None):
    """Project a tuple onto the identifiability constraints.

    Every component is centred under its weight; components flagged by
    :meth:`ModelSpec.needs_linear_constraint` additionally lose their weighted
    linear trend.
    Slopes of local-linear tuples are returned unchanged.
    """
    view = view or build_group_view(spec)
    vals = _normalize_levels(eta.values, spec, view, eta.grids)
    slopes = None if eta.slopes is None else [s.copy() for s in eta.slopes]
    return FunctionTuple(vals, list(eta.grids), slopes)


def constraint_residuals(values, spec, view, grids) -> float:
    """Largest absolute constraint integral over all components."""
    worst = 0.0
    for k, (eta, z) in enumerate(zip(values, grids)):
        q = trapezoid_weights(z) * weight_values(spec, z)
        worst = max(worst, float(np.max(np.abs(eta @ q), initial=0.0)))
        for slot, j in enumerate(view.groups[k]):
            if spec.needs_linear_constraint(j, view.axes[k]):
                worst = max(worst, abs(float((z * eta[slot]) @ q)))
    return worst


# --------------------------------------------------------------------------- #
# Smoother matrices
# --------------------------------------------------------------------------- #


@dataclass
class SmootherMatrices:
    """Empirical curvature blocks.

    ``diag[j]`` is ``(G_j, D_j, D_j)``; ``off[(j, k)]`` is
    ``(G_j, G_k, D_j, D_k)`` for ``j != k``.
    """

    diag: list
    off: dict
    grids: list

    @property
    def p(self) -> int:
        return len(self.diag)

    @property
    def weights(self) -> list:
        return [trapezoid_weights(z) for z in self.grids]


class _Smoother:
    """Kernel matrices and data for one fit; evaluates F and W at a tuple."""

    chunk_cells = 1_500_000

    def __init__(self, data, view, kernel, family, grids, kind="nw"):
        if kind not in KINDS:
            raise ValueError(f"unknown estimator kind {kind!r}")
        h = np.broadcast_to(np.asarray(kernel.bandwidths, dtype=float), (view.p,))
        self.view = view
        self.family = family
        self.kind = kind
        self.grids = [np.asarray(z, dtype=float) for z in grids]
        self.q = [trapezoid_weights(z) for z in self.grids]
        self.y = np.asarray(data.response, dtype=float)
        self.n = len(self.y)
        self.Xt = view.design(data.covariates)
        Xc = view.smoothing_covariates(data.covariates)
        self.K = [
            normalized_kernel_matrix(Xc[:, k], z, h[k], kernel.name)
            for k, z in enumerate(self.grids)
        ]
        self.Kq = [K * q for K, q in zip(self.K, self.q)]
        self.A = None
        if kind == "ll":
            self.A = [(Xc[:, k, None] - z[None, :]) / h[k] for k, z in enumerate(self.grids)]
        self.additive = family.name == "identity"

    @property
    def p(self):
        return self.view.p

    def nbasis(self):
        return 2 if self.kind == "ll" else 1

    def _basis(self, k, s, idx):
        if s == 0:
            return 1.0
        return self.A[k][idx]

    def _parts(self, coef, idx):
        parts = []
        for k in range(self.p):
            X = self.Xt[k][idx]
            dk = X.shape[1]
            P = X @ coef[k][:dk]
            if self.kind == "ll":
                P = P + (X @ coef[k][dk:]) * self.A[k][idx]
            parts.append(P)
        return parts

    def evaluate(self, coef, want_F=True, want_W=True):
        p = self.p
        G = [len(z) for z in self.grids]
        dims = [X.shape[1] * self.nbasis() for X in self.Xt]
        F = [np.zeros((dims[k], G[k])) for k in range(p)] if want_F else None
        diag = [np.zeros((G[k], dims[k], dims[k])) for k in range(p)] if want_W else None
        off = {}
        if want_W:
            for j in range(p):
                for k in range(j + 1, p):
                    off[(j, k)] = np.zeros((G[j], G[k], dims[j], dims[k]))
        if self.additive:
            chunks = [np.arange(self.n)]
        else:
            size = max(1, self.chunk_cells // int(np.prod(G)))
            chunks = [np.arange(s, min(s + size, self.n)) for s in range(0, self.n, size)]
        for idx in chunks:
            parts = self._parts(coef, idx)
            if self.additive:
                R, S, T = self._additive_marginals(parts, idx, want_F, want_W)
            else:
                R, S, T = self._dense_marginals(parts, idx, want_F, want_W)
            if want_F:
                for j in range(p):
                    self._accumulate_F(F[j], j, idx, R[j])
            if want_W:
                for j in range(p):
                    self._accumulate_diag(diag[j], j, idx, S[j])
                    for k in range(j + 1, p):
                        self._accumulate_off(off[(j, k)], j, k, idx, T[(j, k)])
        if want_F:
            F = [f / self.n for f in F]
        W = None
        if want_W:
            diag = [-w / self.n for w in diag]
            full = {}
            for (j, k), blk in off.items():
                blk = -blk / self.n
                full[(j, k)] = blk
                full[(k, j)] = blk.transpose(1, 0, 3, 2)
            W = SmootherMatrices(diag, full, self.grids)
        return F, W

    # marginals over the other axes of Q1 * prod K q (R), Q2 * prod K q (S, T)

    def _dense_marginals(self, parts, idx, want_F, want_W):
        p = self.p
        c = len(idx)
        letters = "abcdefgh"[:p]
        U = np.zeros((c,) + tuple(len(z) for z in self.grids))
        for k, P in enumerate(parts):
            shape = [c] + [1] * p
            shape[k + 1] = P.shape[1]
            U = U + P.reshape(shape)
        y = self.y[idx].reshape((c,) + (1,) * p)
        q1, q2 = self.family.q_derivs(U, y)
        if not (np.all(np.isfinite(q1)) and np.all(np.isfinite(q2))):
            bad = np.argwhere(~np.isfinite(q1 + q2))[0]
            raise FloatingPointError(f"non-finite Q derivative at observation {idx[bad[0]]}")
        Kq = [K[idx] for K in self.Kq]

        def marginal(arr, keep):
            summed = [k for k in range(p) if k not in keep]
            if not summed:
                return arr
            sub = "i" + letters
            ops = ",".join("i" + letters[k] for k in summed)
            out = "i" + "".join(letters[k] for k in keep)
            return np.einsum(f"{sub},{ops}->{out}", arr, *[Kq[k] for k in summed], optimize=True)

        R = [marginal(q1, [j]) for j in range(p)] if want_F else None
        S = T = None
        if want_W:
            S = [marginal(q2, [j]) for j in range(p)]
            T = {(j, k): marginal(q2, [j, k]) for j in range(p) for k in range(j + 1, p)}
        return R, S, T

    def _additive_marginals(self, parts, idx, want_F, want_W):
        # Q1 = y - sum_k P_k and Q2 = -1 separate across axes
        p = self.p
        Kq = [K[idx] for K in self.Kq]
        mass = [K.sum(axis=1) for K in Kq]
        M = [(K * P).sum(axis=1) for K, P in zip(Kq, parts)]
        y = self.y[idx]

        def prod_except(excl):
            out = np.ones(len(idx))
            for k in range(p):
                if k not in excl:
                    out = out * mass[k]
            return out

        R = S = T = None
        if want_F:
            R = []
            for j in range(p):
                r = (y[:, None] - parts[j]) * prod_except({j})[:, None]
                for k in range(p):
                    if k != j:
                        r = r - (M[k] * prod_except({j, k}))[:, None]
                R.append(r)
        if want_W:
            S = [np.broadcast_to(-prod_except({j})[:, None], parts[j].shape) for j in range(p)]
            T = {(j, k): -prod_except({j, k}) for j in range(p) for k in range(j + 1, p)}
        return R, S, T

    def _accumulate_F(self, out, j, idx, R):
        X = self.Xt[j][idx]
        dj = X.shape[1]
        base = self.K[j][idx] * R
        for s in range(self.nbasis()):
            out[s * dj:(s + 1) * dj] += X.T @ (self._basis(j, s, idx) * base)

    def _accumulate_diag(self, out, j, idx, S):
        X = self.Xt[j][idx]
        dj = X.shape[1]
        XX = (X[:, :, None] * X[:, None, :]).reshape(len(idx), -1)
        base = self.K[j][idx] * S
        nb = self.nbasis()
        for s in range(nb):
            for t in range(s, nb):
                wgt = base * self._basis(j, s, idx) * self._basis(j, t, idx)
                blk = (wgt.T @ XX).reshape(-1, dj, dj)
                out[:, s * dj:(s + 1) * dj, t * dj:(t + 1) * dj] += blk
                if t != s:
                    out[:, t * dj:(t + 1) * dj, s * dj:(s + 1) * dj] += blk.transpose(0, 2, 1)

    def _accumulate_off(self, out, j, k, idx, T):
        Xj, Xk = self.Xt[j][idx], self.Xt[k][idx]
        dj, dk = Xj.shape[1], Xk.shape[1]
        c = len(idx)
        Gj, Gk = len(self.grids[j]), len(self.grids[k])
        Kj, Kk = self.K[j][idx], self.K[k][idx]
        nb = self.nbasis()
        if T.ndim == 1:
            for s in range(nb):
                for t in range(nb):
                    left = (T[:, None] * Kj * self._basis(j, s, idx))[:, :, None] * Xj[:, None, :]
                    right = (Kk * self._basis(k, t, idx))[:, :, None] * Xk[:, None, :]
                    blk = left.reshape(c, -1).T @ right.reshape(c, -1)
                    blk = blk.reshape(Gj, dj, Gk, dk).transpose(0, 2, 1, 3)
                    out[:, :, s * dj:(s + 1) * dj, t * dk:(t + 1) * dk] += blk
            return
        XX = (Xj[:, :, None] * Xk[:, None, :]).reshape(c, -1)
        base = Kj[:, :, None] * Kk[:, None, :] * T
        for s in range(nb):
            for t in range(nb):
                wgt = base
                if s:
                    wgt = wgt * self._basis(j, s, idx)[:, :, None]
                if t:
                    wgt = wgt * self._basis(k, t, idx)[:, None, :]
                blk = (wgt.reshape(c, -1).T @ XX).reshape(Gj, Gk, dj, dk)
                out[:, :, s * dj:(s + 1) * dj, t * dk:(t + 1) * dk] += blk


def _grids_of(eta: FunctionTuple):
    return [np.asarray(z, dtype=float) for z in eta.grids]


def compute_F(eta: FunctionTuple, data: Dataset, view: GroupView, kernel: KernelSpec,
              family: QLFamily) -> list[np.ndarray]:
    """Estimating-equation residual ``F_j(eta)(z_j)`` for every axis.

    Returns ``(D_j, G_j)`` arrays; local-linear tuples give level rows
    followed by slope rows.
    """
    kind = "ll" if eta.local_linear else "nw"
    sm = _Smoother(data, view, kernel, family, _grids_of(eta), kind)
    F, _ = sm.evaluate(eta.stacked(), want_F=True, want_W=False)
    return F


def compute_W(eta: FunctionTuple, data: Dataset, view: GroupView, kernel: KernelSpec,
              family: QLFamily, kind: str = "nw") -> SmootherMatrices:
    """Curvature blocks ``W_jj(z_j)`` and ``W_jk(z_j, z_k)`` at ``eta``."""
    if kind == "ll" and not eta.local_linear:
        eta = FunctionTuple(eta.values, eta.grids, [np.zeros_like(v) for v in eta.values])
    coef = eta.stacked()
    if kind == "nw":
        coef = [np.asarray(v, dtype=float) for v in eta.values]
    sm = _Smoother(data, view, kernel, family, _grids_of(eta), kind)
    _, W = sm.evaluate(coef, want_F=False, want_W=True)
    return W


# --------------------------------------------------------------------------- #
# Inner backfitting
# --------------------------------------------------------------------------- #


@dataclass
class SBFConfig:
    """Solver settings.

    ``outer_tol`` bounds the summed squared L2 norm of the normalised Newton
    update.  The inner sweeps stop once the squared L2 norm of the normalised
    sweep-to-sweep change falls below ``inner_tol`` times that of the current
    iterate, or below the absolute floor ``inner_abs`` (which matters only
    when the normalised update is itself essentially zero).  ``residual_tol``
    (sup norm of the estimating equations) defaults to ten times ``outer_tol``.
    """

    grid_size: int = 101
    outer_tol: float = 1e-4
    inner_tol: float = 1e-6
    inner_abs: float = 1e-20
    max_outer: int = 50
    max_inner: int = 200
    jitter: float = 1e-8
    residual_tol: float | None = None
    warm_start: bool = False
    subspace: bool = True
    kind: str = "nw"
    initial: FunctionTuple | None = None

    def __post_init__(self):
        if self.outer_tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.residual_tol is None:
            self.residual_tol = 10 * self.outer_tol


@dataclass
class InnerInfo:
    sweeps: int
    ratios: list
    differences: list
    jittered: int = 0


def invert_diagonal(W: SmootherMatrices, jitter: float = 1e-8):
    """Inverses of the diagonal blocks; ill-conditioned blocks get a ridge.

    Returns the inverses and the number of grid points that needed the ridge.
    """
    out, count = [], 0
    for blk in W.diag:
        blk = 0.5 * (blk + blk.transpose(0, 2, 1))
        cond = np.linalg.cond(blk)
        bad = ~np.isfinite(cond) | (cond > 1e10)
        if np.any(bad):
            count += int(bad.sum())
            dim = blk.shape[1]
            scale = np.trace(blk, axis1=1, axis2=2) / dim
            scale = np.where(scale > 0, scale, 1.0)
            ridge = jitter * scale[:, None, None] * np.eye(dim)
            blk = np.where(bad[:, None, None], blk + ridge, blk)
        out.append(np.linalg.inv(blk))
    return out, count


def _l2(blocks, weights):
    return float(np.sqrt(sum(float((b * b).sum(axis=0) @ q) for b, q in zip(blocks, weights))))


def _inner(u, v, weights) -> float:
    return float(sum((a * b).sum(axis=0) @ q for a, b, q in zip(u, v, weights)))


def apply_W(W: SmootherMatrices, blocks) -> list:
    """``(W delta)_j = W_jj delta_j + sum_{k != j} int W_jk delta_k dz_k`` on the grid."""
    q = W.weights
    out = []
    for j in range(W.p):
        acc = np.einsum("gab,bg->ag", W.diag[j], blocks[j])
        for k in range(W.p):
            if k != j:
                acc = acc + np.einsum("ghab,bh,h->ag", W.off[(j, k)], blocks[k], q[k])
        out.append(acc)
    return out


def parametric_directions(spec: ModelSpec, view: GroupView, grids, local_linear=False) -> list:
    """Constant and linear directions removed by normalisation, as block tuples.

    One constant per component plus one linear function for each component
    carrying the first-moment constraint.  Local-linear tuples get the
    matching slope (zero or one) in their slope rows.
    """
    sizes = view.sizes
    nb = 2 if local_linear else 1
    out = []
    for k, slot, j, l in view.components():
        z = grids[k]
        shapes = [np.zeros((dk * nb, len(g))) for dk, g in zip(sizes, grids)]
        shapes[k][slot] = 1.0
        out.append(shapes)
        if spec.needs_linear_constraint(j, l):
            lin = [np.zeros_like(b) for b in shapes]
            lin[k][slot] = z
            if local_linear:
                lin[k][sizes[k] + slot] = 1.0
            out.append(lin)
    return out


def inner_solve(W: SmootherMatrices, delta_tilde, config: SBFConfig | None = None,
                start=None, normalize=None, inverses=None, subspace=None):
    """Solve the linearised backfitting system by Gauss-Seidel sweeps.

    Solves ``delta_j = delta_tilde_j - sum_{k != j} int W_jj^-1 W_jk delta_k dz_k``
    for all axes.  ``normalize`` maps a list of blocks to its constrained
    version and is used for the convergence measure only.

    ``subspace`` is an optional list of block tuples (typically
    :func:`parametric_directions`).  After every sweep the iterate is corrected
    exactly within their span, which is one more Gauss-Seidel block for the
    same symmetric system and leaves the fixed point unchanged.  It removes
    the slowly contracting constant/linear modes that normalisation discards.

    Returns ``(delta, InnerInfo)``.
    """
    config = config or SBFConfig()
    p = W.p
    q = W.weights
    if inverses is None:
        inverses, jittered = invert_diagonal(W, config.jitter)
    else:
        jittered = 0
    delta = [np.array(b, dtype=float) for b in (start if start is not None else delta_tilde)]
    norm = normalize or (lambda blocks: blocks)
    correct = None
    if subspace and p > 1:
        HB = [apply_W(W, b) for b in subspace]
        gram = np.array([[_inner(bi, hj, q) for hj in HB] for bi in subspace])
        gram = 0.5 * (gram + gram.T)
        rhs = [np.einsum("gab,bg->ag", blk, dt) for blk, dt in zip(W.diag, delta_tilde)]
        target = np.array([_inner(b, rhs, q) for b in subspace])
        pinv = np.linalg.pinv(gram, rcond=1e-10, hermitian=True)

        def correct(blocks):
            alpha = pinv @ (target - np.array([_inner(h, blocks, q) for h in HB]))
            for a, b in zip(alpha, subspace):
                for out, piece in zip(blocks, b):
                    out += a * piece

    ratios, diffs = [], []
    streak = 0
    sweeps = 0
    for sweeps in range(1, config.max_inner + 1):
        previous = [b.copy() for b in delta]
        for j in range(p):
            coupling = np.zeros_like(delta[j])
            for k in range(p):
                if k != j:
                    coupling += np.einsum("ghab,bh,h->ag", W.off[(j, k)], delta[k], q[k])
            delta[j] = delta_tilde[j] - np.einsum("gab,bg->ag", inverses[j], coupling)
        if correct is not None:
            correct(delta)
        change = _l2(norm([a - b for a, b in zip(delta, previous)]), q)
        size = _l2(norm(delta), q)
        if diffs and diffs[-1] > 0:
            ratios.append(change / diffs[-1])
            streak = streak + 1 if ratios[-1] >= 1 else 0
            if streak >= 10:
                raise InnerDivergenceError(
                    f"backfitting sweeps not contracting after {sweeps} sweeps", ratios
                )
        diffs.append(change)
        if not np.isfinite(change):
            raise InnerDivergenceError("non-finite backfitting update", ratios)
        if change * change <= config.inner_tol * size * size + config.inner_abs or p == 1:
            break
    return delta, InnerInfo(sweeps, ratios, diffs, jittered)


# --------------------------------------------------------------------------- #
# Outer Newton-Raphson
# --------------------------------------------------------------------------- #


@dataclass
class FitResult:
    """Fitted coefficient functions and solver diagnostics.

    ``values`` are normalised; ``raw`` adds back the constant/linear parts so
    that ``raw`` reproduces the fitted linear predictor.  Local-linear
    ``slopes`` (``h_k`` times the derivative) match the normalised levels.
    """

    kind: str
    values: list
    grids: list
    view: GroupView
    bandwidths: tuple | None = None
    raw: list | None = None
    slopes: list | None = None
    criteria: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    inner_sweeps: list = field(default_factory=list)
    inner_ratios: list = field(default_factory=list)
    converged: bool = False
    warnings: list = field(default_factory=list)
    parametric: dict = field(default_factory=dict)

    @property
    def outer_iterations(self) -> int:
        return len(self.criteria)

    def component(self, j: int, l: int) -> np.ndarray:
        """Normalised ``f_jl`` on the grid of axis ``x_l``."""
        k = self.view.axes.index(l)
        return self.values[k][self.view.groups[k].index(j)]

    def components(self) -> dict:
        return {(j, l): self.values[k][slot] for k, slot, j, l in self.view.components()}

    def as_tuple(self) -> FunctionTuple:
        return FunctionTuple(self.values, self.grids, self.slopes)


def _criterion(levels_delta, spec, view, grids):
    normed = _normalize_levels(levels_delta, spec, view, grids)
    return _l2(normed, [trapezoid_weights(z) for z in grids]) ** 2


def fit_sbf(data: Dataset, spec: ModelSpec, view: GroupView, kernel: KernelSpec,
            family: QLFamily | None = None, config: SBFConfig | None = None) -> FitResult:
    """Smooth backfitting estimate (Nadaraya-Watson or local linear per ``config.kind``)."""
    config = config or SBFConfig()
    family = family or get_family(spec.link)
    kind = config.kind
    grids = [make_grid(config.grid_size) for _ in view.axes]
    sm = _Smoother(data, view, kernel, family, grids, kind)
    sizes = view.sizes
    if config.initial is not None:
        init = config.initial
        coef = init.stacked() if kind == "ll" and init.local_linear else [
            np.asarray(v, dtype=float) for v in init.values
        ]
        if kind == "ll" and not init.local_linear:
            coef = [np.vstack([c, np.zeros_like(c)]) for c in coef]
    else:
        coef = [np.zeros((dk * sm.nbasis(), len(z))) for dk, z in zip(sizes, grids)]

    def levels(blocks):
        return [b[:dk] for b, dk in zip(blocks, sizes)]

    directions = parametric_directions(spec, view, grids, local_linear=kind == "ll")

    def normalize_blocks(blocks):
        normed = _normalize_levels(levels(blocks), spec, view, grids)
        if kind == "nw":
            return normed
        return [np.vstack([lv, b[dk:]]) for lv, b, dk in zip(normed, blocks, sizes)]

    result = FitResult(kind=kind, values=[], grids=grids, view=view,
                       bandwidths=tuple(kernel.bandwidths))
    previous = None
    criterion = np.inf
    for _ in range(config.max_outer + 1):
        # F and W share the per-cell link derivatives, so one pass yields both
        F, W = sm.evaluate(coef, want_F=True, want_W=True)
        residual = max(float(np.max(np.abs(f))) for f in F)
        result.residuals.append(residual)
        if criterion <= config.outer_tol and residual <= config.residual_tol:
            result.converged = True
            break
        if len(result.criteria) >= config.max_outer:
            break
        inverses, jittered = invert_diagonal(W, config.jitter)
        if jittered:
            result.warnings.append(f"ridge added to {jittered} ill-conditioned diagonal blocks")
        delta_tilde = [np.einsum("gab,bg->ag", inv, f) for inv, f in zip(inverses, F)]
        start = previous if (config.warm_start and previous is not None) else None
        delta, info = inner_solve(W, delta_tilde, config, start=start,
                                  normalize=normalize_blocks, inverses=inverses,
                                  subspace=directions if config.subspace else None)
        if not all(np.all(np.isfinite(d)) for d in delta):
            raise FloatingPointError("non-finite Newton update")
        coef = [c + d for c, d in zip(coef, delta)]
        previous = delta
        criterion = _criterion(levels(delta), spec, view, grids)
        result.criteria.append(criterion)
        result.inner_sweeps.append(info.sweeps)
        result.inner_ratios.append(info.ratios)
    if not result.converged:
        warnings.warn(
            f"smooth backfitting stopped after {len(result.criteria)} outer steps "
            f"(criterion {criterion:.3g}, residual {result.residuals[-1]:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    raw_levels = [b[:dk].copy() for b, dk in zip(coef, sizes)]
    consts, lins = affine_parts(raw_levels, spec, view, grids)
    result.raw = raw_levels
    result.values = _normalize_levels(raw_levels, spec, view, grids)
    result.parametric = {"const": consts, "linear": lins}
    if kind == "ll":
        # slope rows are h * derivative; drop the part belonging to the removed trend
        h = np.broadcast_to(np.asarray(kernel.bandwidths, dtype=float), (view.p,))
        result.slopes = [b[dk:] - hk * lin[:, None]
                         for b, dk, hk, lin in zip(coef, sizes, h, lins)]
        result.parametric["raw_slopes"] = [b[dk:].copy() for b, dk in zip(coef, sizes)]
    return result


def fit_sbf_local_linear(data, spec, view, kernel, family=None, config=None) -> FitResult:
    """Local-linear smooth backfitting; ``values`` are the normalised levels."""
    config = config or SBFConfig()
    cfg = SBFConfig(**{**config.__dict__, "kind": "ll"})
    return fit_sbf(data, spec, view, kernel, family, cfg)


def predict(fit: FitResult, spec: ModelSpec, view: GroupView, x, family=None):
    """Linear predictor and mean at covariate vector(s) ``x``.

    Coefficient functions are linearly interpolated between grid points.
    """
    family = family or get_family(spec.link)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    Xc = view.smoothing_covariates(X)
    if np.any((Xc < 0) | (Xc > 1)):
        raise ValueError("smoothing covariates must lie in [0, 1]")
    tables = fit.raw if fit.raw is not None else fit.values
    designs = view.design(X)
    lp = np.zeros(X.shape[0])
    for k, (table, z) in enumerate(zip(tables, fit.grids)):
        vals = np.stack([np.interp(Xc[:, k], z, row) for row in table], axis=1)
        lp += np.sum(designs[k] * vals, axis=1)
    mean = family.g_inv(lp)
    if np.ndim(x) == 1:
        return float(lp[0]), float(mean[0])
    return lp, mean
