"""Simulation designs, the oracle fit for design B, IMSE metrics and the replication runner.

Design A (logit link, columns ``1, X1, X2, X3``)::

    g(m) = f02(X2) + f03(X3) + X1 (f12(X2) + f13(X3)) + X3 f32(X2) + X2 f23(X3)

with ``X1 ~ Bernoulli(0.5)`` and ``X2, X3 ~ U(0, 1)`` independent.

Design B (logit link, columns ``1, X1, X2, Z1, Z2``) fits every ``x_j f_jl(z_l)``
with ``j in {0, 1, 2}`` although only ``f11(Z1) = cos(2 pi Z1)`` and
``f22(Z2) = sin(2 pi Z2)`` are nonzero; ``X2 ~ N(0, 1)``.

Every replication draws from its own Philox stream keyed by ``base_seed + rep``.
"""
from __future__ import annotations

import csv
import platform
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .family import QLFamily, get_family
from .kernels import KernelSpec, make_grid, trapezoid_weights
from .model import Dataset, ModelSpec, build_group_view
from .sbf import FitResult, SBFConfig, _normalize_levels, fit_sbf

TWO_PI = 2.0 * np.pi


class MetricError(ValueError):
    pass


def _zero(z):
    return np.zeros_like(np.asarray(z, dtype=float))


@dataclass(frozen=True)
class TruthSpec:
    """True coefficient functions of a simulation design.

    ``functions[(j, l)]`` is ``f_jl`` as a vectorised callable; pairs of the
    model that are absent are identically zero.
    """

    model: str
    spec: ModelSpec
    functions: dict
    law: str

    def function(self, j, l):
        return self.functions.get((j, l), _zero)

    def linear_predictor(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        eta = np.zeros(X.shape[0])
        for (j, l), f in self.functions.items():
            eta += X[:, j - 1] * f(X[:, l - 1])
        return eta

    def normalized(self, spec: ModelSpec | None = None, grids=None) -> dict:
        """Normalised truth on the grids, keyed by ``(j, l)``.

        Normalisation follows ``spec`` (default: the design's own model).
        """
        spec = spec or self.spec
        view = build_group_view(spec)
        grids = grids or [make_grid() for _ in view.axes]
        levels = [np.array([self.function(j, view.axes[k])(grids[k]) for j in g], dtype=float)
                  for k, g in enumerate(view.groups)]
        normed = _normalize_levels(levels, spec, view, grids)
        return {(j, l): normed[k][slot] for k, slot, j, l in view.components()}


MODEL_A = TruthSpec(
    model="A",
    spec=ModelSpec(D=4, d=4, index_sets=((3, 4), (3, 4), (4,), (3,)), link="logit",
                   covariate_types=("constant", "discrete", "continuous", "continuous")),
    functions={
        (1, 3): lambda z: np.asarray(z, dtype=float) ** 2,
        (1, 4): lambda z: 4.0 * (np.asarray(z, dtype=float) - 0.5) ** 2,
        (2, 3): lambda z: np.asarray(z, dtype=float) * 1.0,
        (2, 4): lambda z: np.cos(TWO_PI * np.asarray(z, dtype=float)),
        (4, 3): lambda z: np.exp(2.0 * np.asarray(z, dtype=float) - 1.0),
        (3, 4): lambda z: np.sin(TWO_PI * np.asarray(z, dtype=float)),
    },
    law="x1=1; x2~Bernoulli(0.5); x3,x4~Uniform(0,1); independent; y~Bernoulli(expit(eta))",
)

MODEL_B = TruthSpec(
    model="B",
    spec=ModelSpec(D=5, d=3, index_sets=((4, 5), (4, 5), (4, 5)), link="logit",
                   covariate_types=("constant", "discrete", "continuous", "continuous",
                                    "continuous")),
    functions={
        (2, 4): lambda z: np.cos(TWO_PI * np.asarray(z, dtype=float)),
        (3, 5): lambda z: np.sin(TWO_PI * np.asarray(z, dtype=float)),
    },
    law="x1=1; x2~Bernoulli(0.5); x3~N(0,1); x4,x5~Uniform(0,1); independent; "
        "y~Bernoulli(expit(eta))",
)

# Model fitted by the oracle for design B: only x2 f(x4) + x3 f(x5).
ORACLE_B = ModelSpec(D=5, d=3, index_sets=((), (4,), (5,)), link="logit",
                     covariate_types=MODEL_B.spec.covariate_types)

TRUTHS = {"a": MODEL_A, "b": MODEL_B}

# Reference bandwidths per design and sample size (axis order of the model).
REFERENCE_BANDWIDTHS = {
    "a": {500: (0.4328, 0.2789), 1000: (0.3768, 0.2428)},
    "b": {500: (0.2405, 0.2469), 1000: (0.2093, 0.2149)},
}


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _respond(rng, truth: TruthSpec, X) -> np.ndarray:
    mean = get_family("logit").g_inv(truth.linear_predictor(X))
    return (rng.uniform(size=X.shape[0]) < mean).astype(float)


def gen_model_a(n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be positive")
    rng = _rng(seed)
    x1 = rng.binomial(1, 0.5, n).astype(float)
    x2 = rng.uniform(size=n)
    x3 = rng.uniform(size=n)
    X = np.column_stack([np.ones(n), x1, x2, x3])
    return Dataset(X, _respond(rng, MODEL_A, X), MODEL_A.spec.covariate_types)


def gen_model_b(n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be positive")
    rng = _rng(seed)
    x1 = rng.binomial(1, 0.5, n).astype(float)
    x2 = rng.standard_normal(n)
    z1 = rng.uniform(size=n)
    z2 = rng.uniform(size=n)
    X = np.column_stack([np.ones(n), x1, x2, z1, z2])
    return Dataset(X, _respond(rng, MODEL_B, X), MODEL_B.spec.covariate_types)


GENERATORS = {"a": gen_model_a, "b": gen_model_b}


def fit_oracle_b(data: Dataset, kernel: KernelSpec, family: QLFamily | None = None,
                 config: SBFConfig | None = None) -> FitResult:
    """Backfitting with the zero functions of design B known in advance.

    Every curvature block and estimating equation is scalar.
    """
    view = build_group_view(ORACLE_B)
    fit = fit_sbf(data, ORACLE_B, view, kernel, family, config)
    fit.kind = "oracle"
    return fit


# --------------------------------------------------------------------------- #
# Metrics
# --------------------------------------------------------------------------- #


@dataclass
class MetricTable:
    """IMSE, ISB and IV per component; ``IV`` is ``None`` for a single replication."""

    estimator: str
    n: int
    M: int
    rows: list = field(default_factory=list)

    def row(self, j, l) -> dict:
        for r in self.rows:
            if (r["j"], r["l"]) == (j, l):
                return r
        raise KeyError((j, l))

    def imse(self, j, l) -> float:
        return self.row(j, l)["IMSE"]


def compute_metrics(fits: list, truth: TruthSpec, grid=None, estimator: str | None = None,
                    n: int | None = None) -> MetricTable:
    """IMSE, ISB and IV over replications against the normalised truth.

    ``ISB = int (fbar - f)^2``, ``IV = M^-1 sum_m int (f_m - fbar)^2`` and
    ``IMSE = M^-1 sum_m int (f_m - f)^2``; all integrals use the trapezoid rule on
    the common grid, so ``IMSE == ISB + IV`` up to rounding.
    """
    if not fits:
        raise MetricError("no fits to summarise")
    grids = fits[0].grids if grid is None else [np.asarray(grid)] * len(fits[0].grids)
    for f in fits:
        if len(f.grids) != len(grids) or any(
            not np.array_equal(a, b) for a, b in zip(f.grids, grids)
        ):
            raise MetricError("fits are on different grids")
    view = fits[0].view
    target = truth.normalized(grids=list(grids))
    # estimates are compared under the design's own constraints (a no-op for
    # the normalised output of every estimator)
    estimates = [_normalize_levels(f.values, truth.spec, view, list(grids)) for f in fits]
    table = MetricTable(estimator or fits[0].kind, n or 0, len(fits))
    M = len(fits)
    for k, slot, j, l in view.components():
        q = trapezoid_weights(grids[k])
        est = np.array([e[k][slot] for e in estimates])
        f0 = target.get((j, l))
        if f0 is None:
            f0 = np.zeros(len(grids[k]))
        mean = est.mean(axis=0)
        isb = float((mean - f0) ** 2 @ q)
        imse = float(np.mean(((est - f0) ** 2) @ q))
        iv = float(np.mean(((est - mean) ** 2) @ q)) if M > 1 else None
        table.rows.append({"component": _label(j, l),
                           "j": j, "l": l, "IMSE": imse if M > 1 else isb, "ISB": isb, "IV": iv})
    return table


def _label(j, l) -> str:
    return f"f[{j},{l}]"


# --------------------------------------------------------------------------- #
# Runner
# --------------------------------------------------------------------------- #


@dataclass
class ExperimentConfig:
    """One simulation run.

    ``bandwidths`` is ``"reference"`` (fixed per design and n),
    ``"auto"`` (plug-in selection on every replication) or a tuple of floats.
    """

    model: str = "a"
    estimators: tuple = ("sbf",)
    n: tuple = (500,)
    reps: int = 100
    seed: int = 20240101
    bandwidths: object = "reference"
    knots: int = 1
    grid_size: int = 101
    outer_tol: float = 1e-4
    workers: int = 1
    out: str | None = None

    def __post_init__(self):
        self.model = self.model.lower()
        if self.model not in TRUTHS:
            raise ValueError(f"unknown design {self.model!r}")
        self.estimators = tuple(self.estimators)
        self.n = tuple(int(v) for v in np.atleast_1d(self.n))
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ValueError(f"unknown estimator {e!r}; expected one of {ESTIMATORS}")
            if e == "oracle" and self.model != "b":
                raise ValueError("the oracle estimator is defined for design B only")


ESTIMATORS = ("sbf", "ll", "spline", "oracle")


def _bandwidths(cfg: ExperimentConfig, n: int, data, truth):
    if isinstance(cfg.bandwidths, str):
        if cfg.bandwidths == "reference":
            try:
                return REFERENCE_BANDWIDTHS[cfg.model][n]
            except KeyError:
                raise ValueError(f"no reference bandwidths for design {cfg.model} at n={n}") \
                    from None
        if cfg.bandwidths == "auto":
            from .bandwidth import select_bandwidths

            view = build_group_view(truth.spec)
            h, _ = select_bandwidths(data, truth.spec, view)
            return tuple(float(min(v, 0.5)) for v in h)
        raise ValueError(f"unknown bandwidth mode {cfg.bandwidths!r}")
    return tuple(float(v) for v in cfg.bandwidths)


def run_replication(cfg: ExperimentConfig, estimator: str, n: int, rep: int) -> dict:
    """Fit one replication; returns a record with the fit or the error message."""
    truth = TRUTHS[cfg.model]
    seed = cfg.seed + rep
    record = {"estimator": estimator, "n": n, "rep": rep, "seed": seed, "fit": None,
              "error": None, "bandwidths": None}
    try:
        data = GENERATORS[cfg.model](n, seed)
        sbf_cfg = SBFConfig(grid_size=cfg.grid_size, outer_tol=cfg.outer_tol)
        if estimator == "spline":
            from .spline import fit_spline

            view = build_group_view(truth.spec)
            fit = fit_spline(data, truth.spec, view, K=cfg.knots, grid_size=cfg.grid_size)
        else:
            h = _bandwidths(cfg, n, data, truth)
            record["bandwidths"] = h
            kernel = KernelSpec(h)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                if estimator == "oracle":
                    fit = fit_oracle_b(data, kernel, config=sbf_cfg)
                else:
                    view = build_group_view(truth.spec)
                    sbf_cfg.kind = "ll" if estimator == "ll" else "nw"
                    fit = fit_sbf(data, truth.spec, view, kernel, config=sbf_cfg)
        record["fit"] = fit
    except Exception as exc:  # recorded per cell, the run continues
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every (estimator, n) cell and write the report files to ``cfg.out``.

    Files: ``metrics.csv``, ``convergence.csv``, ``curves_<estimator>_n<n>.csv``
    and ``manifest.txt``.  Output is byte-identical for identical configs.
    Returns ``{(estimator, n): {"table": MetricTable | None, "records": [...]}}``.
    """
    truth = TRUTHS[cfg.model]
    tasks = [(e, n, r) for e in cfg.estimators for n in cfg.n for r in range(cfg.reps)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(run_replication, [cfg] * len(tasks),
                                    *zip(*tasks)))
    else:
        records = [run_replication(cfg, *t) for t in tasks]
    results = {}
    for e in cfg.estimators:
        for n in cfg.n:
            cell = [r for r in records if r["estimator"] == e and r["n"] == n]
            cell.sort(key=lambda r: r["rep"])
            fits = [r["fit"] for r in cell if r["fit"] is not None]
            table = compute_metrics(fits, truth, estimator=e, n=n) if fits else None
            results[(e, n)] = {"table": table, "records": cell,
                               "complete": len(fits) == len(cell)}
    if cfg.out is not None:
        write_report(cfg, results)
    return results


def write_report(cfg: ExperimentConfig, results: dict) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "estimator", "n", "component", "j", "l", "IMSE", "ISB", "IV",
                    "M", "failures", "complete"])
        for (e, n), cell in results.items():
            failures = sum(r["error"] is not None for r in cell["records"])
            if cell["table"] is None:
                w.writerow([cfg.model, e, n, "", "", "", "", "", "", 0, failures, False])
                continue
            for row in cell["table"].rows:
                w.writerow([cfg.model, e, n, row["component"], row["j"], row["l"],
                            _fmt(row["IMSE"]), _fmt(row["ISB"]), _fmt(row["IV"]),
                            cell["table"].M, failures, cell["complete"]])
    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "n", "rep", "seed", "converged", "outer_iterations",
                    "median_inner_sweeps", "max_inner_ratio", "final_criterion", "error"])
        for (e, n), cell in results.items():
            for r in cell["records"]:
                fit = r["fit"]
                if fit is None:
                    w.writerow([e, n, r["rep"], r["seed"], "", "", "", "", "", r["error"]])
                    continue
                ratios = [x for trace in fit.inner_ratios for x in trace]
                w.writerow([
                    e, n, r["rep"], r["seed"], fit.converged, fit.outer_iterations,
                    _fmt(float(np.median(fit.inner_sweeps))) if fit.inner_sweeps else "",
                    _fmt(float(max(ratios))) if ratios else "",
                    _fmt(float(fit.criteria[-1])) if fit.criteria else "", "",
                ])
    for (e, n), cell in results.items():
        fits = [r["fit"] for r in cell["records"] if r["fit"] is not None]
        if not fits:
            continue
        target = TRUTHS[cfg.model].normalized(grids=list(fits[0].grids))
        with open(out / f"curves_{e}_n{n}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["component", "j", "l", "z", "mean", "truth"])
            for k, slot, j, l in fits[0].view.components():
                mean = np.mean([f.values[k][slot] for f in fits], axis=0)
                truth = target.get((j, l), np.zeros_like(mean))
                for z, m, t in zip(fits[0].grids[k], mean, truth):
                    w.writerow([_label(j, l), j, l, _fmt(float(z)),
                                _fmt(float(m)), _fmt(float(t))])
    config = asdict(cfg)
    config.pop("workers")
    config.pop("out")
    lines = [f"{k} = {config[k]}" for k in sorted(config)]
    lines += [
        f"package_version = {__version__}",
        f"python = {platform.python_version()}",
        f"numpy = {np.__version__}",
        f"scipy = {scipy.__version__}",
        "rng = numpy Philox, seed = seed + replication index",
        f"seeds = {cfg.seed}..{cfg.seed + cfg.reps - 1}",
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
