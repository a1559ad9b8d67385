import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minco_swarm.errors import NonPositiveDuration, OutOfDomain, ShapeMismatch, SingularSystem
from minco_swarm.minco import (NCOEF, BandedSystem, BoundaryCondition, MincoMap, PiecewisePolynomial, evaluate,
                               propagate_gradient, solve_mapping)
from minco_swarm.penalties import control_effort

from oracles import central_difference, dense_coefficients, dense_system, derived, random_trajectory, relative_error

SETTINGS = settings(max_examples=40, deadline=None)


@derived("minco-core/solve_mapping: M=1 rest-to-rest quintic")
def test_single_piece_is_the_min_jerk_quintic():
    traj = solve_mapping(np.zeros((0, 1)), [1.0], BoundaryCondition.rest([0.0]), BoundaryCondition.rest([1.0]))
    expected = np.array([0, 0, 0, 10, -15, 6], dtype=float)
    np.testing.assert_allclose(traj.coeffs[0, :, 0], expected, atol=1e-12)
    # the same numbers from a dense 6x6 solve
    np.testing.assert_allclose(dense_coefficients(np.zeros((0, 1)), [1.0], BoundaryCondition.rest([0.0]),
                                                  BoundaryCondition.rest([1.0]))[:, 0], expected, atol=1e-12)


def test_two_piece_symmetric_problem_is_point_symmetric():
    traj = solve_mapping([[1.0]], [1.0, 1.0], BoundaryCondition.rest([0.0]), BoundaryCondition.rest([2.0]))
    delta = np.linspace(0.0, 1.0, 21)
    total = traj.sample(1.0 - delta)[:, 0] + traj.sample(1.0 + delta)[:, 0]
    np.testing.assert_allclose(total, 2.0, atol=1e-12)


@derived("minco-core/solve_mapping: M=12 dense oracle")
def test_twelve_pieces_match_dense_solve():
    rng = np.random.default_rng(12)
    q, T, bc0, bcf, traj = random_trajectory(rng, 12)
    ref = dense_coefficients(q, T, bc0, bcf)
    assert np.max(np.abs(traj.stacked() - ref)) < 1e-9


def test_band_storage_is_a_row_permutation_of_the_dense_system():
    """Same equations as the textbook assembly, reordered to keep the band narrow."""
    rng = np.random.default_rng(3)
    q, T, bc0, bcf, _ = random_trajectory(rng, 5)
    system = BandedSystem(5, 3)
    system.assemble(q, T, bc0.as_matrix(), bcf.as_matrix())
    A, b = dense_system(q, T, bc0, bcf)
    banded = np.hstack([system.to_dense(), system.rhs])
    dense = np.hstack([A, b])
    unused = set(range(dense.shape[0]))
    for row in banded:
        # continuity rows may be stored with either sign
        hits = [k for k in unused if np.allclose(row, dense[k], atol=1e-12) or np.allclose(row, -dense[k], atol=1e-12)]
        assert hits, "banded row has no dense counterpart"
        unused.remove(hits[0])
    assert not unused


def test_transposed_solve_matches_dense():
    rng = np.random.default_rng(4)
    q, T, bc0, bcf, _ = random_trajectory(rng, 7)
    system = BandedSystem(7, 3)
    system.assemble(q, T, bc0.as_matrix(), bcf.as_matrix())
    A = system.to_dense()
    system.factorize()
    rhs = rng.normal(size=(NCOEF * 7, 3))
    np.testing.assert_allclose(system.solve_transposed(rhs), np.linalg.solve(A.T, rhs), rtol=1e-9, atol=1e-10)


def test_evaluate_examples():
    quintic = solve_mapping(np.zeros((0, 1)), [1.0], BoundaryCondition.rest([0.0]), BoundaryCondition.rest([1.0]))
    assert evaluate(quintic, 0.5)[0] == pytest.approx(0.5, abs=1e-14)
    rng = np.random.default_rng(5)
    _, _, bc0, _, traj = random_trajectory(rng, 4)
    np.testing.assert_allclose(evaluate(traj, 0.0, 1), bc0.velocity, atol=1e-12)
    np.testing.assert_array_equal(evaluate(traj, 0.7, 6), np.zeros(3))


def test_evaluate_rejects_times_outside_the_domain():
    traj = PiecewisePolynomial.hover([0.0, 0.0, 1.0], 2.0)
    with pytest.raises(OutOfDomain):
        traj.evaluate(2.1)
    with pytest.raises(OutOfDomain):
        traj.evaluate(-0.1)
    # sampling clamps instead of raising
    np.testing.assert_allclose(traj.sample([-1.0, 5.0]), [[0, 0, 1], [0, 0, 1]])


def test_invalid_inputs_raise_typed_errors():
    bc0, bcf = BoundaryCondition.rest([0.0, 0.0, 0.0]), BoundaryCondition.rest([1.0, 0.0, 0.0])
    with pytest.raises(NonPositiveDuration):
        solve_mapping([[0.5, 0, 0]], [1.0, 0.0], bc0, bcf)
    with pytest.raises(NonPositiveDuration):
        solve_mapping([[0.5, 0, 0]], [1.0, np.nan], bc0, bcf)
    with pytest.raises(ShapeMismatch):
        solve_mapping([[0.5, 0, 0], [0.7, 0, 0]], [1.0, 1.0], bc0, bcf)
    with pytest.raises(ValueError):
        BoundaryCondition([np.inf, 0, 0], [0, 0, 0], [0, 0, 0])
    singular = BandedSystem(2, 1)
    with pytest.raises(SingularSystem):
        singular.factorize()


def test_constant_cost_has_zero_gradient():
    rng = np.random.default_rng(6)
    _, T, _, _, traj = random_trajectory(rng, 4)
    gq, gT = propagate_gradient(traj, T, np.zeros((NCOEF * 4, 3)), np.zeros(4))
    np.testing.assert_array_equal(gq, 0.0)
    np.testing.assert_array_equal(gT, 0.0)


@derived("minco-core/propagate_gradient: effort time gradient vs finite differences")
def test_effort_time_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    q, T, bc0, bcf, traj = random_trajectory(rng, 5, t_lo=0.9, t_hi=1.1)
    J, gc, gT_partial = control_effort(traj)
    _, gT = propagate_gradient(traj, T, gc, gT_partial)
    fd = central_difference(lambda tt: control_effort(solve_mapping(q, tt, bc0, bcf))[0], T, 1e-6)
    assert relative_error(gT, fd) < 1e-5


@derived("minco-core/propagate_gradient: junction positions vs finite differences")
def test_waypoint_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    q, T, bc0, bcf, traj = random_trajectory(rng, 5)

    def cost(flat):
        tr = solve_mapping(flat.reshape(q.shape), T, bc0, bcf)
        return float(np.sum(tr.sample(tr.breaks) ** 2))

    # F = sum |p(t_i)|^2 over all junctions, written in terms of c
    gc = np.zeros((NCOEF * 5, 3))
    for i, t in enumerate(traj.breaks):
        piece = min(i, 4)
        local = t - traj.breaks[piece]
        b = local ** np.arange(NCOEF)
        gc[NCOEF * piece:NCOEF * (piece + 1)] += 2.0 * b[:, None] * traj.sample([t])[0][None, :]
    gq, _ = propagate_gradient(traj, T, gc, np.zeros(5))
    fd = central_difference(cost, q.ravel(), 1e-6)
    assert relative_error(gq.ravel(), fd) < 1e-5


def test_minco_map_agrees_with_one_shot_functions():
    rng = np.random.default_rng(9)
    q, T, bc0, bcf, traj = random_trajectory(rng, 6)
    mm = MincoMap(6, bc0, bcf)
    c = mm.generate(q, T)
    np.testing.assert_allclose(c, traj.stacked(), atol=1e-12)
    gc = rng.normal(size=c.shape)
    gT = rng.normal(size=6)
    a = mm.propagate(gc, gT)
    b = propagate_gradient(traj, T, gc, gT)
    np.testing.assert_allclose(a[0], b[0], atol=1e-10)
    np.testing.assert_allclose(a[1], b[1], atol=1e-10)


@st.composite
def instances(draw):
    M = draw(st.integers(1, 8))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    return random_trajectory(rng, M, t_lo=0.2, t_hi=3.0)


@SETTINGS
@given(instances())
def test_boundary_conditions_and_waypoints_hold(inst):
    q, T, bc0, bcf, traj = inst
    start = np.stack([traj.sample([0.0], d)[0] for d in range(3)])
    end = np.stack([traj.sample([traj.total_duration], d)[0] for d in range(3)])
    np.testing.assert_allclose(start, bc0.as_matrix(), atol=1e-8)
    np.testing.assert_allclose(end, bcf.as_matrix(), atol=1e-7)
    for i in range(T.size - 1):
        left = kinematic_end(traj, i)
        np.testing.assert_allclose(left[0], q[i], atol=1e-8)


def kinematic_end(traj, i):
    c, T = traj.coeffs[i], traj.durations[i]
    out = []
    for order in range(5):
        k = np.arange(NCOEF)
        coef = np.ones(NCOEF)
        for r in range(order):
            coef = coef * (k - r)
        out.append((coef * T ** np.clip(k - order, 0, None)) @ c)
    return np.array(out)


@SETTINGS
@given(instances())
def test_junctions_are_four_times_continuously_differentiable(inst):
    _, T, _, _, traj = inst
    for i in range(T.size - 1):
        left = kinematic_end(traj, i)
        right = np.array([traj.coeffs[i + 1][order] * np.prod(np.arange(1, order + 1)) for order in range(5)])
        scale = 1.0 + np.abs(left)
        assert np.all(np.abs(left - right) <= 1e-7 * scale)


@SETTINGS
@given(instances())
def test_banded_solve_matches_dense_oracle(inst):
    q, T, bc0, bcf, traj = inst
    ref = dense_coefficients(q, T, bc0, bcf)
    scale = max(1.0, float(np.max(np.abs(ref))))
    assert np.max(np.abs(traj.stacked() - ref)) <= 1e-9 * scale


@SETTINGS
@given(st.integers(1, 6), st.floats(0.1, 5.0))
def test_uniform_time_rescaling_preserves_the_path(M, factor):
    """Stretching every duration by the same factor reparameterizes the same rest-to-rest curve."""
    rng = np.random.default_rng(M)
    q = rng.normal(size=(M - 1, 2))
    T = rng.uniform(0.5, 1.5, M)
    bc0, bcf = BoundaryCondition.rest([0.0, 0.0]), BoundaryCondition.rest([1.0, 2.0])
    a = solve_mapping(q, T, bc0, bcf)
    b = solve_mapping(q, factor * T, bc0, bcf)
    s = np.linspace(0.0, 1.0, 17)
    np.testing.assert_allclose(a.sample(s * a.total_duration), b.sample(s * b.total_duration), atol=1e-8)
