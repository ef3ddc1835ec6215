"""Model specification, smoothing-group rearrangement and design checks.

A flexible varying coefficient model is written as

    g(m(x)) = sum_j x_j * sum_{l in I_j} f_jl(x_l),    j = 1..d

with covariate indices 1-based throughout the public API.  The covariates
entering some coefficient function (the set ``C``) are the smoothing axes;
:func:`build_group_view` collects, for each axis, every covariate that
multiplies a function of that axis.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml


class SpecificationError(ValueError):
    """Raised for an inconsistent model specification."""


LINKS = ("identity", "logit")
COVARIATE_TYPES = ("continuous", "discrete", "constant")


@dataclass(frozen=True)
class ModelSpec:
    """Flexible varying coefficient model.

    Parameters
    ----------
    D : int
        Total number of covariates.
    d : int
        Number of coefficient-bearing covariates (``x_1..x_d``).
    index_sets : tuple of tuple of int
        ``index_sets[j-1]`` is ``I_j``, 1-based covariate indices.
    link : {"identity", "logit"}
        Link/variance family.
    covariate_types : tuple of str
        ``"continuous"``, ``"discrete"`` or ``"constant"`` per covariate.  A
        ``"constant"`` covariate is identically one and carries the additive
        (intercept-type) functions.
    weights : str
        Constraint weight family; only ``"uniform"`` (indicator of [0, 1]).
    """

    D: int
    d: int
    index_sets: tuple[tuple[int, ...], ...]
    link: str = "identity"
    covariate_types: tuple[str, ...] = ()
    weights: str = "uniform"

    def __post_init__(self):
        sets = tuple(tuple(int(k) for k in s) for s in self.index_sets)
        object.__setattr__(self, "index_sets", sets)
        types = tuple(self.covariate_types) or ("continuous",) * self.D
        object.__setattr__(self, "covariate_types", types)
        if self.D < 1 or not 1 <= self.d <= self.D:
            raise SpecificationError(f"need 1 <= d <= D, got d={self.d}, D={self.D}")
        if len(sets) != self.d:
            raise SpecificationError(f"expected {self.d} index sets, got {len(sets)}")
        if len(types) != self.D:
            raise SpecificationError(f"expected {self.D} covariate types, got {len(types)}")
        if any(t not in COVARIATE_TYPES for t in types):
            raise SpecificationError(f"covariate types must be in {COVARIATE_TYPES}")
        if self.link not in LINKS:
            raise SpecificationError(f"unknown link {self.link!r}; expected one of {LINKS}")
        if self.weights != "uniform":
            raise SpecificationError(f"unsupported weights {self.weights!r}")
        for j, s in enumerate(sets, start=1):
            if len(set(s)) != len(s):
                raise SpecificationError(f"I_{j} has repeated indices")
            for k in s:
                if not 1 <= k <= self.D:
                    raise SpecificationError(f"I_{j} contains {k} outside 1..{self.D}")
            if j in s:
                raise SpecificationError(f"I_{j} must not contain {j}")
        axes = self.axes
        if len(axes) < 2:
            raise SpecificationError(f"need at least two smoothing covariates, got C={list(axes)}")
        for k in axes:
            if types[k - 1] != "continuous":
                raise SpecificationError(f"smoothing covariate x{k} must be continuous")

    @property
    def axes(self) -> tuple[int, ...]:
        """Sorted smoothing covariates ``C``; axis k (0-based) is ``axes[k]``."""
        return tuple(sorted(set().union(*map(set, self.index_sets))))

    @property
    def p(self) -> int:
        return len(self.axes)

    @property
    def r(self) -> int:
        return self.D - self.p

    @property
    def c0(self) -> tuple[int, ...]:
        return tuple(k for k in self.axes if k <= self.d)

    def needs_linear_constraint(self, j: int, l: int) -> bool:
        """Whether ``f_jl`` carries the second (first-moment) constraint.

        True for pairs inside ``C_0`` and for additive functions of a ``C_0``
        covariate, whose linear trend is otherwise confounded with the
        parametric term ``alpha_l x_l``.
        """
        c0 = self.c0
        return l in c0 and (j in c0 or self.covariate_types[j - 1] == "constant")

    @classmethod
    def from_config(cls, config: dict) -> "ModelSpec":
        D = int(config["D"])
        return cls(
            D=D,
            d=int(config["d"]),
            index_sets=tuple(tuple(s) for s in config["index_sets"]),
            link=config.get("link", "identity"),
            covariate_types=tuple(config.get("covariate_types", ("continuous",) * D)),
            weights=config.get("weights", "uniform"),
        )

    def to_config(self) -> dict:
        return {
            "D": self.D,
            "d": self.d,
            "index_sets": [list(s) for s in self.index_sets],
            "link": self.link,
            "weights": self.weights,
            "covariate_types": list(self.covariate_types),
        }


def load_model(path) -> ModelSpec:
    """Read a :class:`ModelSpec` from a YAML (or JSON) config file."""
    with open(path) as fh:
        return ModelSpec.from_config(yaml.safe_load(fh))


def save_model(spec: ModelSpec, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(spec.to_config(), fh, sort_keys=False)


@dataclass(frozen=True)
class GroupView:
    """Covariates regrouped by smoothing axis.

    ``groups[k]`` lists (ascending) every ``j`` with ``axes[k] in I_j``;
    these covariates form the vector ``x~_k`` multiplying ``f_k(x_{axes[k]})``.
    ``delta[(k, m)]`` is the 0/1 vector of length ``d_k`` marking the slot of
    ``x~_k`` that equals ``x_{axes[m]}``.
    """

    axes: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]
    delta: dict = field(repr=False, compare=False)

    @property
    def p(self) -> int:
        return len(self.axes)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.groups)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(int))

    def stacked_delta(self, m: int) -> np.ndarray:
        """``Delta_m``: stacked ``delta[(k, m)]`` over all groups k."""
        return np.concatenate([self.delta[(k, m)] for k in range(self.p)])

    def components(self):
        """Yield ``(k, slot, j, l)`` for every coefficient function ``f_jl``."""
        for k, group in enumerate(self.groups):
            for slot, j in enumerate(group):
                yield k, slot, j, self.axes[k]

    def design(self, X: np.ndarray) -> list[np.ndarray]:
        """Per-axis matrices ``x~_k`` of shape (n, d_k) from an (n, D) covariate matrix."""
        X = np.atleast_2d(X)
        return [X[:, [j - 1 for j in g]] for g in self.groups]

    def smoothing_covariates(self, X: np.ndarray) -> np.ndarray:
        """The (n, p) matrix of smoothing covariates ``X^c``."""
        X = np.atleast_2d(X)
        return X[:, [a - 1 for a in self.axes]]


def build_group_view(spec: ModelSpec) -> GroupView:
    """Rearrange the model into one additive block per smoothing covariate."""
    axes = spec.axes
    if not axes:
        raise SpecificationError("no smoothing covariates")
    groups = tuple(
        tuple(j for j in range(1, spec.d + 1) if a in spec.index_sets[j - 1]) for a in axes
    )
    delta = {}
    for k, group in enumerate(groups):
        for m, a in enumerate(axes):
            delta[(k, m)] = np.array([1.0 if j == a else 0.0 for j in group])
    return GroupView(axes=axes, groups=groups, delta=delta)


@dataclass(frozen=True)
class Dataset:
    """Observations ``(Y^i, X^i)``; ``covariates`` is (n, D)."""

    covariates: np.ndarray
    response: np.ndarray
    column_types: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.array(self.covariates, dtype=float, ndmin=2)
        y = np.array(self.response, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} covariate rows but {y.shape[0]} responses")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(
            self, "column_types", tuple(self.column_types) or ("continuous",) * X.shape[1]
        )

    @property
    def n(self) -> int:
        return self.response.shape[0]

    @property
    def D(self) -> int:
        return self.covariates.shape[1]

    def subset(self, columns) -> "Dataset":
        """Dataset restricted to the given 1-based covariate columns."""
        idx = [c - 1 for c in columns]
        return Dataset(
            self.covariates[:, idx], self.response, tuple(self.column_types[i] for i in idx)
        )


def read_csv(path, spec: ModelSpec | None = None) -> Dataset:
    """Read a ``y,x1,...,xD`` CSV file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in row] for row in reader if row]
    if not header or header[0] != "y":
        raise ValueError(f"{path}: first column must be 'y', got header {header}")
    arr = np.array(rows, dtype=float).reshape(len(rows), len(header))
    types = spec.covariate_types if spec is not None else ()
    return Dataset(arr[:, 1:], arr[:, 0], types)


def write_csv(data: Dataset, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y"] + [f"x{k}" for k in range(1, data.D + 1)])
        for y, row in zip(data.response, data.covariates):
            writer.writerow([repr(float(y))] + [repr(float(v)) for v in row])


def validate_dataset(data: Dataset, spec: ModelSpec) -> list[str]:
    """List every violated data invariant; empty when the data are clean.

    Smoothing covariates must lie in [0, 1].  Other continuous covariates are
    not range-checked since they only enter linearly.
    """
    out = []
    if data.D != spec.D:
        return [f"dataset has {data.D} covariates, model expects {spec.D}"]
    X, y = data.covariates, data.response
    for k in range(spec.D):
        col = X[:, k]
        bad = np.flatnonzero(~np.isfinite(col))
        out += [f"row {i + 1}, column x{k + 1}: non-finite value" for i in bad]
        if spec.covariate_types[k] == "constant":
            bad = np.flatnonzero(col != 1.0)
            out += [f"row {i + 1}, column x{k + 1}: {col[i]!r} in constant column" for i in bad]
        if k + 1 in spec.axes:
            bad = np.flatnonzero((col < 0.0) | (col > 1.0))
            out += [f"row {i + 1}, column x{k + 1}: {col[i]!r} outside [0, 1]" for i in bad]
    bad = np.flatnonzero(~np.isfinite(y))
    out += [f"row {i + 1}, column y: non-finite response" for i in bad]
    if spec.link == "logit":
        bad = np.flatnonzero(np.isfinite(y) & (y != 0.0) & (y != 1.0))
        out += [f"row {i + 1}, column y: {y[i]!r} not in {{0, 1}}" for i in bad]
    return out


@dataclass
class DesignReport:
    """Smallest eigenvalue of the kernel-weighted second-moment matrix per axis.

    ``min_eigenvalues[k]`` has one entry per grid point; NaN marks a grid point
    without any observation in its kernel window.
    """

    grid: list[np.ndarray]
    min_eigenvalues: list[np.ndarray]
    threshold: float

    @property
    def flagged(self) -> list[np.ndarray]:
        return [np.flatnonzero(ev < self.threshold) for ev in self.min_eigenvalues]

    @property
    def undefined(self) -> list[np.ndarray]:
        return [np.flatnonzero(np.isnan(ev)) for ev in self.min_eigenvalues]

    @property
    def ok(self) -> bool:
        return all(len(f) == 0 for f in self.flagged) and all(
            len(u) == 0 for u in self.undefined
        )


def check_design(
    data: Dataset,
    spec: ModelSpec,
    view: GroupView,
    bandwidth,
    grid_size: int = 101,
    threshold: float = 1e-6,
) -> DesignReport:
    """Estimate ``E[x~_k x~_k^T | X_{axes[k]} = z] p(z)`` on a grid and report its
    smallest eigenvalue.

    The estimate is ``n^-1 sum_i x~_k^i x~_k^iT K_h(X^i, z)`` with the boundary
    normalised kernel used by the estimator, so a group consisting of the
    constant covariate reports the kernel density estimate.
    """
    from .kernels import make_grid, normalized_kernel_matrix

    h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (view.p,))
    Xc = view.smoothing_covariates(data.covariates)
    designs = view.design(data.covariates)
    grids, mins = [], []
    for k in range(view.p):
        z = make_grid(grid_size)
        K = normalized_kernel_matrix(Xc[:, k], z, h[k], check=False)
        M = np.einsum("ig,ia,ib->gab", K, designs[k], designs[k]) / data.n
        ev = np.linalg.eigvalsh(M)[:, 0]
        ev[K.sum(axis=0) == 0.0] = np.nan
        grids.append(z)
        mins.append(ev)
    return DesignReport(grids, mins, threshold)
