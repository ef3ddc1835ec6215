import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import design_a
from flexvc.model import (
    Dataset,
    ModelSpec,
    SpecificationError,
    build_group_view,
    check_design,
    load_model,
    read_csv,
    save_model,
    validate_dataset,
    write_csv,
)


def test_three_covariate_example_groups():
    spec = ModelSpec(D=3, d=3, index_sets=((2, 3), (3,), (2,)))
    view = build_group_view(spec)
    assert spec.r == 1 and spec.p == 2
    assert view.axes == (2, 3)
    assert view.groups == ((1, 3), (1, 2))
    assert view.sizes == (2, 2)


def test_single_smoothing_covariate_rejected():
    with pytest.raises(SpecificationError):
        ModelSpec(D=2, d=1, index_sets=((2,),))


def test_self_interaction_rejected():
    with pytest.raises(SpecificationError):
        ModelSpec(D=3, d=2, index_sets=((1, 3), (3,)))


def test_smoothing_covariate_must_be_continuous():
    with pytest.raises(SpecificationError):
        ModelSpec(D=3, d=1, index_sets=((2, 3),), covariate_types=("constant", "discrete",
                                                                    "continuous"))


def test_delta_marks_axis_slot():
    spec = ModelSpec(D=3, d=3, index_sets=((2, 3), (3,), (2,)))
    view = build_group_view(spec)
    # first group is (x1, x3); its second slot is the covariate of axis 2
    np.testing.assert_array_equal(view.delta[(0, 1)], [0.0, 1.0])
    np.testing.assert_array_equal(view.delta[(0, 0)], [0.0, 0.0])
    np.testing.assert_array_equal(view.delta[(1, 0)], [0.0, 1.0])
    np.testing.assert_array_equal(view.stacked_delta(1), [0, 1, 0, 0])


def test_group_view_is_deterministic(spec_a):
    a, b = build_group_view(spec_a), build_group_view(spec_a)
    assert a == b
    assert a.groups == ((1, 2, 4), (1, 2, 3))


index_sets = st.integers(3, 5).flatmap(
    lambda D: st.tuples(
        st.just(D),
        st.lists(st.sets(st.integers(1, D), max_size=D - 1), min_size=1, max_size=D - 1),
    )
)


def _spec_or_none(D, sets):
    sets = [tuple(sorted(s - {j})) for j, s in enumerate(sets, start=1)]
    try:
        return ModelSpec(D=D, d=len(sets), index_sets=tuple(sets))
    except SpecificationError:
        return None


@given(index_sets, st.integers(0, 2**31 - 1))
def test_reconstruction_identity(params, seed):
    spec = _spec_or_none(*params)
    if spec is None:
        return
    view = build_group_view(spec)
    assert sum(view.sizes) == sum(len(s) for s in spec.index_sets)
    rng = np.random.default_rng(seed)
    coefs = {(j, l): rng.normal(size=3) for _, _, j, l in view.components()}

    def f(j, l, z):
        a, b, c = coefs[(j, l)]
        return a + b * np.sin(c * z)

    X = rng.uniform(size=(7, spec.D))
    direct = sum(X[:, j - 1] * f(j, l, X[:, l - 1])
                 for j, s in enumerate(spec.index_sets, start=1) for l in s)
    designs = view.design(X)
    grouped = sum(
        np.sum(designs[k] * np.array([f(j, view.axes[k], X[:, view.axes[k] - 1])
                                      for j in g]).T, axis=1)
        if g else 0.0
        for k, g in enumerate(view.groups)
    )
    np.testing.assert_allclose(grouped, direct, atol=1e-12)
    for k, g in enumerate(view.groups):
        assert view.axes[k] not in g
        for m in range(view.p):
            assert view.delta[(k, m)].sum() <= 1
        for m in range(view.p):
            stacked = view.stacked_delta(m)
            picked = [j for k2, g2 in enumerate(view.groups) for j in g2]
            chosen = [picked[i] for i in np.flatnonzero(stacked)]
            assert all(j == view.axes[m] for j in chosen)


def test_validate_dataset_examples(spec_a):
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(20), rng.binomial(1, 0.5, 20), rng.uniform(size=(20, 2))])
    y = rng.binomial(1, 0.5, 20).astype(float)
    logit = design_a("logit")
    assert validate_dataset(Dataset(X, y), logit) == []
    bad = X.copy()
    bad[4, 2] = 1.2
    problems = validate_dataset(Dataset(bad, y), logit)
    assert len(problems) == 1 and "row 5" in problems[0] and "x3" in problems[0]
    y2 = y.copy()
    y2[0] = 0.5
    problems = validate_dataset(Dataset(X, y2), logit)
    assert len(problems) == 1 and "column y" in problems[0]
    assert validate_dataset(Dataset(X, y2), spec_a) == []


def test_check_design_on_simulation_law(spec_a, view_a):
    from flexvc.simulation import gen_model_a

    data = gen_model_a(2000, 3)
    report = check_design(data, spec_a, view_a, (0.4328, 0.2789))
    assert report.ok
    assert min(ev.min() for ev in report.min_eigenvalues) > 0.01


def test_check_design_flags_duplicated_column():
    spec = ModelSpec(D=4, d=3, index_sets=((4,), (4,), (4, 1)),
                     covariate_types=("continuous",) * 4)
    view = build_group_view(spec)
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(500, 4))
    X[:, 1] = X[:, 0]
    report = check_design(Dataset(X, np.zeros(500)), spec, view, 0.2)
    k = view.axes.index(4)
    assert np.all(report.min_eigenvalues[k] < 1e-10)
    assert len(report.flagged[k]) == 101
    assert not report.ok


def test_check_design_constant_group_is_density():
    spec = ModelSpec(D=3, d=1, index_sets=((2, 3),),
                     covariate_types=("constant", "continuous", "continuous"))
    view = build_group_view(spec)
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(300), rng.uniform(size=(300, 2))])
    report = check_design(Dataset(X, np.zeros(300)), spec, view, 0.2, grid_size=21)
    from flexvc.kernels import make_grid, normalized_kernel_matrix

    K = normalized_kernel_matrix(X[:, 1], make_grid(21), 0.2)
    np.testing.assert_allclose(report.min_eigenvalues[0], K.mean(axis=0), rtol=1e-12)
    assert np.all(report.min_eigenvalues[0] > 0)


def test_check_design_reports_empty_windows():
    spec = ModelSpec(D=3, d=1, index_sets=((2, 3),),
                     covariate_types=("constant", "continuous", "continuous"))
    view = build_group_view(spec)
    X = np.column_stack([np.ones(50), np.linspace(0, 0.3, 50), np.linspace(0, 1, 50)])
    report = check_design(Dataset(X, np.zeros(50)), spec, view, 0.05)
    assert len(report.undefined[0]) > 0
    assert not report.ok


def test_config_and_csv_round_trip(tmp_path, spec_a):
    save_model(spec_a, tmp_path / "m.yaml")
    assert load_model(tmp_path / "m.yaml") == spec_a
    rng = np.random.default_rng(2)
    data = Dataset(rng.uniform(size=(5, 4)), rng.normal(size=5))
    write_csv(data, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "y,x1,x2,x3,x4"
    back = read_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.covariates, data.covariates)
    np.testing.assert_array_equal(back.response, data.response)
