import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srt2map.acquire import ForwardOperator, LRSeries, SeriesGeometry, simulate_series
from srt2map.phantom import PhantomSpec, Vial, rasterize
from srt2map.srrecon import (
    ConvergenceReport,
    GradientOperator,
    MatrixOperator,
    NumericFailure,
    SolverConfig,
    SRProblem,
    divergence,
    estimate_operator_norm,
    gradient,
    initial_estimate,
    objective,
    sr_reconstruct,
    tv_seminorm,
)
from srt2map.volgrid import Grid3D, Volume3D


def _identity_series(data, te=100.0, spacing=1.0):
    """Series whose forward operator is the identity on ``data``'s grid."""
    data = np.asarray(data, dtype=float)
    grid = Grid3D.centered(data.shape, spacing)
    geom = SeriesGeometry.covering(grid, "axial", (spacing, spacing), spacing, 0.0, 0.0, data.shape[2])
    return grid, LRSeries(data, geom, te), ForwardOperator(grid, geom)


def _brute_tv(x):
    total = 0.0
    for idx in itertools.product(*map(range, x.shape)):
        sq = 0.0
        for a in range(x.ndim):
            nxt = list(idx)
            nxt[a] = min(nxt[a] + 1, x.shape[a] - 1)
            sq += (x[tuple(nxt)] - x[idx]) ** 2
        total += np.sqrt(sq)
    return total


class TestTV:
    def test_step(self):
        assert tv_seminorm(np.array([0.0, 3.0]).reshape(2, 1, 1)) == pytest.approx(3.0)

    def test_constant_is_zero(self):
        assert tv_seminorm(np.full((4, 3, 2), 7.0)) == 0.0

    def test_impulse(self):
        x = np.zeros((3, 3, 1))
        x[1, 1, 0] = 1.0
        # centre voxel has two unit forward differences, its two upstream neighbours one each
        assert tv_seminorm(x) == pytest.approx(np.sqrt(2) + 2)
        assert tv_seminorm(x) == pytest.approx(_brute_tv(x))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), shape=st.tuples(*[st.integers(1, 5)] * 3))
    def test_matches_brute_force(self, seed, shape):
        x = np.random.default_rng(seed).standard_normal(shape)
        assert tv_seminorm(x) == pytest.approx(_brute_tv(x), rel=1e-12, abs=1e-12)

    def test_gradient_divergence_adjoint(self):
        rng = np.random.default_rng(0)
        for shape in [(5, 4, 3), (1, 6, 2), (7, 1, 1)]:
            x = rng.standard_normal(shape)
            p = rng.standard_normal((3, *shape))
            assert np.vdot(gradient(x), p) == pytest.approx(-np.vdot(x, divergence(p)), rel=1e-12)


class TestOperatorNorm:
    def test_identity_and_scaled(self):
        eye = MatrixOperator(np.eye(6))
        assert estimate_operator_norm([eye], 30) == pytest.approx(1.0, rel=1e-12)
        assert estimate_operator_norm([eye], 30, weights=[2.0]) == pytest.approx(2.0, rel=1e-12)

    def test_random_matrix_against_gram_eigenvalues(self):
        a = np.random.default_rng(5).standard_normal((12, 8))
        exact = np.sqrt(np.linalg.eigvalsh(a.T @ a).max())
        est = estimate_operator_norm([MatrixOperator(a)], 500)
        assert est == pytest.approx(exact, rel=1e-8)
        assert est <= exact * (1 + 1e-12)

    def test_stack_and_monotone_in_iterations(self):
        a = np.random.default_rng(6).standard_normal((5, 8))
        b = np.random.default_rng(7).standard_normal((9, 8))
        k = np.vstack([0.5 * a, b])
        exact = np.linalg.norm(k, 2)
        ests = [estimate_operator_norm([MatrixOperator(a), MatrixOperator(b)], n, [0.5, 1.0]) for n in (1, 3, 10, 400)]
        assert ests == sorted(ests)
        assert ests[-1] == pytest.approx(exact, rel=1e-8)

    def test_gradient_norm_below_sqrt12(self):
        est = estimate_operator_norm([GradientOperator((6, 6, 6))], 200)
        assert 3.0 < est < np.sqrt(12)


class TestObjective:
    def test_toy_values(self):
        y = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        grid, s, op = _identity_series(y)
        prob = SRProblem([(s, op)], grid, SolverConfig(lam=0.75))
        assert objective(np.zeros(y.shape), prob) == pytest.approx(0.375 * 30)
        # at x = y only TV remains: sqrt(2^2 + 1^2) + 1 + 2
        assert objective(y, prob) == pytest.approx(np.sqrt(5) + 3)
        assert objective(Volume3D(grid, y), prob) == pytest.approx(np.sqrt(5) + 3)

    def test_wrong_grid_rejected(self):
        grid, s, op = _identity_series(np.ones((2, 2, 2)))
        prob = SRProblem([(s, op)], grid)
        with pytest.raises(ValueError):
            objective(np.zeros((3, 2, 2)), prob)

    def test_problem_validation(self):
        grid, s, op = _identity_series(np.ones((2, 2, 2)))
        with pytest.raises(ValueError):
            SRProblem([], grid)
        _, s2, op2 = _identity_series(np.ones((2, 2, 2)), te=120.0)
        with pytest.raises(ValueError):
            SRProblem([(s, op), (s2, op2)], grid)
        with pytest.raises(ValueError):
            SRProblem([(s, op)], Grid3D.centered((3, 3, 3), 1.0))


# --- reconstruction ------------------------------------------------------------


@pytest.fixture(scope="module")
def small_problem():
    grid = Grid3D.centered((20, 10, 20), 1.1)
    spec = PhantomSpec((Vial((0.0, 0.0), 6.0, 200.0, 1000.0, "a"),), plate_thickness=6.0,
                       background_m0=100.0, background_t2=50.0, field_of_view=(22.0, 22.0))
    m0, t2 = rasterize(spec, grid, 2)
    pairs = []
    for k, label in enumerate(("axial", "coronal", "sagittal")):
        geom = SeriesGeometry.covering(grid, label, (1.3, 1.3), 2.5, 0.1)
        op = ForwardOperator(grid, geom)
        pairs.append((simulate_series(m0, t2, geom, 100.0, noise_sigma=5.0, seed=1, series_index=k, operator=op), op))
    return grid, pairs


def _rescaled(pairs, c):
    return [(LRSeries(c * s.data, s.geometry, s.te, s.series_index), op) for s, op in pairs]


def test_identity_operator_large_lambda_returns_data():
    y = np.random.default_rng(2).uniform(10, 20, (6, 5, 4))
    grid, s, op = _identity_series(y)
    x, rep = sr_reconstruct(SRProblem([(s, op)], grid, SolverConfig(lam=1e6, max_iters=500, rel_tol=1e-12)))
    np.testing.assert_allclose(x.data, y, atol=1e-4)


def test_identity_operator_constant_fixed_point():
    grid, s, op = _identity_series(np.full((4, 4, 4), 5.0))
    x, rep = sr_reconstruct(SRProblem([(s, op)], grid))
    np.testing.assert_allclose(x.data, 5.0, rtol=1e-12)
    assert rep.converged and rep.objective[-1] == pytest.approx(0.0, abs=1e-18)


def test_reconstruction_decreases_objective(small_problem):
    grid, pairs = small_problem
    prob = SRProblem(pairs, grid, SolverConfig(max_iters=150))
    x, rep = sr_reconstruct(prob)
    assert rep.objective[-1] <= rep.objective[0]
    assert objective(x, prob) == pytest.approx(rep.objective[-1], rel=1e-12)
    assert np.isclose(rep.objective[0], objective(initial_estimate(prob), prob), rtol=1e-12)
    tail = np.asarray(rep.objective[10:])
    assert np.all(np.diff(tail) <= 1e-6 * tail[:-1])
    assert len(rep.rel_change) == rep.iterations + 1 == 151
    assert np.isfinite(rep.operator_norm) and rep.operator_norm > 0


def test_larger_lambda_does_not_increase_fidelity(small_problem):
    grid, pairs = small_problem
    fid = {}
    for lam in (0.75, 1.5):
        _, rep = sr_reconstruct(SRProblem(pairs, grid, SolverConfig(lam=lam, max_iters=600, rel_tol=1e-7)))
        fid[lam] = rep.fidelity[-1]
    assert fid[1.5] <= fid[0.75] * (1 + 1e-6)


def test_scale_equivariance(small_problem):
    # Minimizer of (c*y, lam) is c times the minimizer of (y, c*lam); the optimal
    # objectives differ by the same factor. Iterates converge slowly, so compare
    # optimal values and the vial-interior mean rather than voxelwise.
    grid, pairs = small_problem
    c = 3.0
    cfg = dict(max_iters=800, rel_tol=1e-8)
    x_scaled, r_scaled = sr_reconstruct(SRProblem(_rescaled(pairs, c), grid, SolverConfig(lam=0.75, **cfg)))
    x_ref, r_ref = sr_reconstruct(SRProblem(pairs, grid, SolverConfig(lam=0.75 * c, **cfg)))
    assert r_scaled.objective[-1] == pytest.approx(c * r_ref.objective[-1], rel=1e-3)
    pts = grid.index_to_world(np.stack(np.meshgrid(*map(np.arange, grid.dims), indexing="ij"), -1))
    inside = (np.hypot(pts[..., 0], pts[..., 2]) < 4.0) & (np.abs(pts[..., 1]) < 2.0)
    assert x_scaled.data[inside].mean() == pytest.approx(c * x_ref.data[inside].mean(), rel=5e-3)


def test_deterministic(small_problem):
    grid, pairs = small_problem
    prob = SRProblem(pairs, grid, SolverConfig(max_iters=20))
    a, ra = sr_reconstruct(prob)
    b, rb = sr_reconstruct(prob)
    assert a.data.tobytes() == b.data.tobytes()
    assert ra.objective == rb.objective


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_start_raises(small_problem):
    grid, pairs = small_problem
    x0 = np.zeros(grid.dims)
    x0[0, 0, 0] = np.inf
    with pytest.raises(NumericFailure) as exc:
        sr_reconstruct(SRProblem(pairs, grid, SolverConfig(max_iters=5)), x0)
    assert exc.value.iteration == 1


def test_report_csv_round_trip(tmp_path, small_problem):
    grid, pairs = small_problem
    _, rep = sr_reconstruct(SRProblem(pairs, grid, SolverConfig(max_iters=5)))
    rep.to_csv(tmp_path / "c.csv")
    back = ConvergenceReport.from_csv(tmp_path / "c.csv")
    assert back.objective == rep.objective and back.tv == rep.tv
    assert np.isnan(back.rel_change[0]) and back.rel_change[1:] == rep.rel_change[1:]
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "iteration,objective,fidelity,tv,rel_change"


def test_solver_config_validation():
    for bad in (dict(lam=0.0), dict(max_iters=0), dict(rel_tol=0.0), dict(operator_norm_iters=0)):
        with pytest.raises(ValueError):
            SolverConfig(**bad)
