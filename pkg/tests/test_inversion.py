import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asinv.fem import ForwardProblem, GaussianSource, NonpositiveMediumError, assemble_mass, solve_helmholtz
from asinv.inversion import (ASIConfig, ASIState, ObservationSet, SearchSpace, bfgs,
                             evaluate_misfit, filter_indicator, initial_space, merge_spaces,
                             misfit_gradient, truncate_space, truncation_rule, asi_run, Misfit)
from asinv.mesh import build_rect_mesh
from asinv.spectral import WeightSpec


@pytest.fixture(scope="module")
def small():
    m = build_rect_mesh((0, 1, 0, 1), 10, 10)
    srcs = [GaussianSource((0.3, 0.4), 0.08), GaussianSource((0.7, 0.6), 0.08)]
    p = ForwardProblem(m, 1.5, srcs)
    x, y = m.vertices.T
    truth = 2 + 0.5 * np.sin(3 * x) * np.cos(2 * y)
    Y = solve_helmholtz(p, truth)
    nodes = m.boundary_nodes
    return m, p, truth, ObservationSet(nodes, Y[nodes], 1.5)


# -- truncation --------------------------------------------------------------

def test_truncation_single_coefficient():
    r = truncation_rule([1.0, 0.0, 0.0], 3, 0.5, 0.0, 10.0)
    assert r.keep == 1 and r.j0 == 1


def test_truncation_tail_hand_case():
    r = truncation_rule([3.0, 2.0, 1.0], 3, 0.9, 0.0, 10.0)
    assert r.j0 == 1 and r.keep == 1 and r.eps_psi == 0.9


def test_truncation_lower_branch():
    gamma = np.zeros(10)
    gamma[:2] = [1.0, 1.0]
    r = truncation_rule(gamma, 10, 0.01, 0.8, 1.2)
    assert (r.j0, r.keep, r.eps_psi) == (2, 8, 0.005)


def test_truncation_upper_branch():
    r = truncation_rule(np.ones(30), 10, 0.01, 0.8, 1.2)
    assert (r.j0, r.keep, r.eps_psi) == (30, 30, 0.02)


def test_truncation_sorted_by_magnitude():
    r = truncation_rule([0.1, -5.0, 2.0], 3, 0.05, 0.0, 10.0)
    assert list(r.order) == [1, 2, 0]
    assert r.keep == 2


def test_truncation_empty():
    with pytest.raises(ValueError):
        truncation_rule([], 3, 0.1, 0.8, 1.2)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=40), st.floats(0.001, 0.9),
       st.integers(1, 60))
def test_truncation_energy_guarantee(gamma, eps, J_prev):
    g = np.array(gamma)
    if not np.any(g):
        g[0] = 1.0
    r = truncation_rule(g, J_prev, eps, 0.8, 1.2)
    kept = r.order[: r.keep]
    tail = np.sum(g ** 2) - np.sum(g[kept] ** 2)
    assert tail <= eps ** 2 * np.sum(g ** 2) * (1 + 1e-12) + 1e-300
    assert 1 <= r.keep <= len(g)
    if r.rho > 1.2:
        assert r.eps_psi == 2 * eps
    elif r.rho < 0.8:
        assert r.eps_psi == eps / 2 and r.keep >= r.j0
    else:
        assert r.eps_psi == eps and r.keep == r.j0


# -- BFGS ----------------------------------------------------------------------

def test_bfgs_quadratic():
    A = np.diag([1.0, 10.0, 100.0])
    b = np.array([1.0, -2.0, 3.0])
    res = bfgs(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(3), gtol=1e-10)
    assert res.converged
    assert np.allclose(res.x, np.linalg.solve(A, b), atol=1e-8)
    assert np.all(np.diff(res.fun_history) <= 0)


def test_bfgs_rosenbrock():
    def f(x):
        a, b = x
        return (1 - a) ** 2 + 100 * (b - a * a) ** 2, np.array(
            [-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])

    res = bfgs(f, np.array([-1.2, 1.0]), gtol=1e-10, max_iter=500, initial_step=1.0)
    assert res.converged
    assert np.allclose(res.x, [1, 1], atol=1e-6)
    assert np.all(np.diff(res.fun_history) <= 0)


def test_bfgs_backtracks_on_nonpositive_medium():
    def f(x):
        if x[0] > 2.0:
            raise NonpositiveMediumError(-1.0)
        return (x[0] - 1.9) ** 2, np.array([2 * (x[0] - 1.9)])

    res = bfgs(f, np.array([0.0]), gtol=1e-8, initial_step=10.0)
    assert res.x[0] == pytest.approx(1.9, abs=1e-6)


def test_bfgs_iteration_cap():
    A = np.diag(np.logspace(0, 4, 20))
    res = bfgs(lambda x: (0.5 * x @ A @ x, A @ x), np.ones(20), gtol=1e-14, max_iter=3)
    assert res.n_iter == 3 and not res.converged


# -- misfit -------------------------------------------------------------------

def test_misfit_zero_at_truth(small):
    m, p, truth, obs = small
    assert Misfit(p, obs).value(truth) < 1e-25


def test_misfit_requires_matching_sources(small):
    m, p, truth, obs = small
    with pytest.raises(ValueError):
        Misfit(p, ObservationSet(obs.nodes, obs.data[:, :1], 1.5))


def test_gradient_matches_finite_differences(small, rng):
    m, p, truth, obs = small
    noisy = ObservationSet(obs.nodes, obs.data * (1 + 0.1 * rng.standard_normal(obs.data.shape)), 1.5)
    space = SearchSpace(m, 2 + 0.3 * rng.random(m.n_vertices), 0.05 * rng.standard_normal((m.n_vertices, 4)))
    beta = 0.5 * rng.standard_normal(4)
    g = misfit_gradient(beta, space, p, noisy)
    fd = np.empty(4)
    for j in range(4):
        e = np.zeros(4)
        e[j] = 1e-5
        fd[j] = (evaluate_misfit(beta + e, space, p, noisy) - evaluate_misfit(beta - e, space, p, noisy)) / 2e-5
    assert np.max(np.abs(g - fd) / np.abs(fd)) < 1e-5


def test_gradient_with_boundary_data(rng):
    m = build_rect_mesh((0, 1, 0, 1), 8, 8)
    p = ForwardProblem(m, 1.2, [GaussianSource((0.5, 0.5), 0.1)],
                       boundary_data=[{"left": lambda x, y: np.cos(3 * y) + 0j}])
    u = 2 + 0.2 * rng.random(m.n_vertices)
    Y = solve_helmholtz(p, u + 0.1)
    obs = ObservationSet(m.boundary_nodes, Y[m.boundary_nodes], 1.2)
    mf = Misfit(p, obs)
    _, g = mf.value_and_gradient(u)
    d = rng.standard_normal(m.n_vertices)
    h = 1e-6
    fd = (mf.value(u + h * d) - mf.value(u - h * d)) / (2 * h)
    assert g @ d == pytest.approx(fd, rel=1e-6)


# -- search-space adaptation -------------------------------------------------

def test_merge_orthonormal_and_dimension(small, rng):
    m = small[0]
    u0 = np.full(m.n_vertices, 2.0)
    cfg = ASIConfig(J1=6)
    space = initial_space(m, u0, u0, cfg)
    assert space.dimension == 6 and space.orthonormality_error() < 1e-10
    new = space.basis[:, :3] + 0.1 * rng.standard_normal((m.n_vertices, 3)) * (space.basis[:, :1] != 0)
    merged = merge_spaces(space, space.offset + 0.01, new)
    assert merged.orthonormality_error() < 1e-10
    assert merged.dimension <= 3 + 1 + 6
    assert np.all(merged.basis[m.boundary_nodes] == 0)


def test_merge_drops_duplicate_columns(small):
    m = small[0]
    u0 = np.full(m.n_vertices, 2.0)
    space = initial_space(m, u0, u0, ASIConfig(J1=5))
    merged = merge_spaces(space, space.offset, space.basis)
    assert merged.dimension == 5


def test_filter_trivial_limits(small):
    m = small[0]
    u0 = np.full(m.n_vertices, 2.0)
    space = initial_space(m, u0, u0, ASIConfig(J1=5))
    w = space.basis @ np.array([1.0, 0.5, 0.0, 0.2, 0.0])
    spec = WeightSpec()
    # eps_psi = 1 makes zero feasible
    assert np.allclose(filter_indicator(w, space, 1.0, spec), 0)
    # tiny eps_psi pins the filtered field to w
    out = filter_indicator(w, space, 1e-9, spec)
    M = assemble_mass(m)
    assert np.sqrt((out - w) @ M @ (out - w)) <= 1e-8 * np.sqrt(w @ M @ w)


def test_filter_residual_exceeds_radius(small):
    m = small[0]
    u0 = np.full(m.n_vertices, 2.0)
    space = initial_space(m, u0, u0, ASIConfig(J1=3))
    w = np.zeros(m.n_vertices)
    w[m.interior_nodes] = np.random.default_rng(0).standard_normal(len(m.interior_nodes))
    _, beta = filter_indicator(w, space, 0.01, WeightSpec(), full_output=True)
    assert np.allclose(beta, space.coefficients(w + space.offset))


def test_truncate_space_keeps_largest(small):
    m = small[0]
    u0 = np.full(m.n_vertices, 2.0)
    space = initial_space(m, u0, u0, ASIConfig(J1=6))
    ind = space.basis @ np.array([0.0, 3.0, 0.0, 0.0, 1.0, 0.0])
    new, eps, rule = truncate_space(space, ind, 6, 0.01, 0.0, 10.0)
    assert new.dimension == 2
    assert np.allclose(new.basis, space.basis[:, [1, 4]])


# -- ASI loop ------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ASIConfig(rho0=1.5)
    with pytest.raises(ValueError):
        ASIConfig(eig_operand="other")
    with pytest.raises(ValueError):
        ASIConfig(max_iter_per_frequency=0)


def _tiny_run(small, **kw):
    m, p, truth, obs = small
    u0 = np.full(m.n_vertices, 2.0)
    boundary = truth.copy()
    cfg = ASIConfig(J1=8, bfgs_max_iter=15, **kw)
    M = assemble_mass(m)
    err = lambda u: float(np.sqrt((u - truth) @ M @ (u - truth) / (truth @ M @ truth)))
    return asi_run(cfg, [p], [obs], u0, boundary, truth=err), cfg


def test_asi_reduces_misfit(small):
    res, cfg = _tiny_run(small, max_iterations=4)
    h = res.history
    assert 1 <= len(h) <= 4
    assert h[-1]["misfit"] < h[0]["initial_misfit"]
    assert all(r["misfit_monotone"] for r in h)
    for r in h:
        assert set(r) >= {"iteration", "frequency", "J_m", "misfit", "rel_L2_error"}


def test_asi_truth_initialized_single_iteration():
    m = build_rect_mesh((0, 1, 0, 1), 10, 10)
    p = ForwardProblem(m, 1.5, [GaussianSource((0.5, 0.5), 0.1)])
    truth = np.full(m.n_vertices, 2.0)
    Y = solve_helmholtz(p, truth)
    obs = ObservationSet(m.boundary_nodes, Y[m.boundary_nodes], 1.5)
    res = asi_run(ASIConfig(J1=5), [p], [obs], truth, truth)
    assert len(res.history) == 1 and res.converged


def test_state_roundtrip_and_resume(tmp_path, small):
    m, p, truth, obs = small
    u0 = np.full(m.n_vertices, 2.0)
    cfg = ASIConfig(J1=8, bfgs_max_iter=10, max_iterations=4, max_iter_per_frequency=2)
    probs = [p, ForwardProblem(m, 2.5, p.sources)]
    Y2 = solve_helmholtz(probs[1], truth)
    obs2 = ObservationSet(m.boundary_nodes, Y2[m.boundary_nodes], 2.5)
    full = asi_run(cfg, probs, [obs, obs2], u0, truth, snapshot_dir=tmp_path)
    snaps = sorted(tmp_path.glob("snapshot_0*.npz"))
    assert snaps, "a snapshot is written when the frequency advances"
    state = ASIState.load(snaps[0], m)
    assert state.freq_index == 1
    resumed = asi_run(cfg, probs, [obs, obs2], u0, truth, state=state)
    assert np.array_equal(resumed.history_array(), full.history_array(), equal_nan=True)
    assert len(state.history) < len(full.history)
