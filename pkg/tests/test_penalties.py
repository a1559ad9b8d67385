import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minco_swarm.errors import ClockSkew
from minco_swarm.minco import NCOEF, PiecewisePolynomial, propagate_gradient, solve_mapping
from minco_swarm.penalties import (ConstraintPoint, PenaltyWeights, SafePair, backward_time_grad, constraint_points,
                                   control_effort, dynamic_feasibility, ellipsoidal_distance, execution_time,
                                   forward_time_map, log_time, obstacle_penalty, quadrature_penalty, squared_gaps,
                                   swarm_penalty, uniform_distribution_penalty)

from oracles import (central_difference, derived, fine_cubic_penalty, random_trajectory, relative_error,
                     rest_to_rest, two_pass_variance)

SETTINGS = settings(max_examples=30, deadline=None)
BIG = 1e6


def constant(coeffs, t):
    return np.array([1.0]), np.zeros((1,) + coeffs.shape), np.array([0.0])


def line(p0, v, duration, dims=3):
    c = np.zeros((1, NCOEF, dims))
    c[0, 0, :len(p0)] = p0
    c[0, 1, :len(v)] = v
    return PiecewisePolynomial(c, [duration])


# -- quadrature ---------------------------------------------------------------

def test_inactive_constraint_costs_nothing():
    J, gc, gT = quadrature_penalty(np.zeros((NCOEF, 1)), 2.0, 4,
                                   lambda c, t: (np.array([-1.0]), np.zeros((1, NCOEF, 1)), np.array([0.0])))
    assert J == 0.0 and gT == 0.0 and not gc.any()


@derived("penalties/quadrature_penalty: constant G=1, kappa=4, T=2")
def test_constant_violation_hand_value():
    J, _, gT = quadrature_penalty(np.zeros((NCOEF, 1)), 2.0, 4, constant)
    assert J == pytest.approx(2.0, abs=1e-14)
    assert gT == pytest.approx(1.0, abs=1e-14)


def velocity_g(limit):
    return lambda traj: (lambda t: float(traj.evaluate(t, 1) @ traj.evaluate(t, 1)) - limit ** 2)


@derived("penalties/quadrature_penalty: kappa=16 vs 1e4-sample quadrature")
def test_sixteen_samples_track_fine_quadrature():
    traj = rest_to_rest(3.0, 1.0)
    J, _, _ = dynamic_feasibility(traj, [1.7, BIG, BIG], 16)
    ref = fine_cubic_penalty(velocity_g(1.7)(traj), 1.0)
    assert abs(J - ref) / ref < 0.02


def test_quadrature_error_shrinks_with_kappa():
    traj = rest_to_rest(3.0, 1.0)

    def J(k):
        return dynamic_feasibility(traj, [1.7, BIG, BIG], k)[0]

    gaps = [abs(J(k) - J(4 * k)) for k in (4, 8, 16)]
    assert gaps[0] > gaps[1] > gaps[2]


# -- effort and time ----------------------------------------------------------

def test_constant_velocity_has_no_effort():
    J, gc, gT = control_effort(line([0, 0, 0], [1.0, -2.0, 0.5], 3.0))
    assert J == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(gc, 0.0) and np.allclose(gT, 0.0)


@derived("penalties/control_effort: rest-to-rest quintic vs 1e5-sample quadrature")
def test_effort_matches_fine_quadrature():
    traj = rest_to_rest(1.0, 1.0)
    ts = np.linspace(0.0, 1.0, 100_001)
    jerk = traj.sample(ts, 3)[:, 0] ** 2
    ref = float(np.sum(0.5 * (jerk[1:] + jerk[:-1])) * (ts[1] - ts[0]))
    assert abs(control_effort(traj)[0] - ref) / ref < 1e-6


@derived("penalties/control_effort: doubling T scales J_e by 2^-5")
def test_effort_time_scaling():
    ratio = control_effort(rest_to_rest(1.0, 2.0))[0] / control_effort(rest_to_rest(1.0, 1.0))[0]
    assert ratio == pytest.approx(2.0 ** -5, rel=1e-10)


def test_execution_time_examples():
    J, gc, gT = execution_time([1.0, 2.0, 3.0])
    assert J == 6.0 and gc == 0.0
    np.testing.assert_array_equal(gT, [1.0, 1.0, 1.0])
    assert execution_time([5.0])[0] == 5.0


# -- feasibility --------------------------------------------------------------

def test_hover_is_feasible():
    J, gc, gT = dynamic_feasibility(PiecewisePolynomial.hover([1.0, 2.0, 3.0], 4.0), [1.7, 6.0, 20.0], 8)
    assert J == 0.0 and not gc.any() and not gT.any()


@derived("penalties/dynamic_feasibility: 2 m/s against v_m=1.7")
def test_constant_overspeed_hand_value():
    T = 1.5
    J, _, _ = dynamic_feasibility(line([0, 0, 0], [2.0, 0, 0], T), [1.7, 6.0, 20.0], 8)
    assert J == pytest.approx(T * 1.11 ** 3, rel=1e-12)


@derived("penalties/dynamic_feasibility: gradient vs finite differences")
def test_feasibility_gradient():
    rng = np.random.default_rng(21)
    q, T, bc0, bcf, traj = random_trajectory(rng, 4, spread=3.0)
    limits = [1.0, 2.0, 5.0]

    def cost(x):
        tr = solve_mapping(x[:q.size].reshape(q.shape), x[q.size:], bc0, bcf)
        return dynamic_feasibility(tr, limits, 6)[0]

    J, gc, gT = dynamic_feasibility(traj, limits, 6)
    assert J > 0.0
    gq, gTT = propagate_gradient(traj, T, gc, gT)
    fd = central_difference(cost, np.concatenate([q.ravel(), T]), 1e-6)
    assert relative_error(np.concatenate([gq.ravel(), gTT]), fd) < 1e-5


# -- obstacles ----------------------------------------------------------------

def pinned_points(traj, kappa, pair):
    pts = constraint_points(traj, kappa)
    for cp in pts:
        cp.pairs.append(pair)
    return pts


def test_far_side_of_safe_plane_costs_nothing():
    C_o = 0.25
    pair = SafePair([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    traj = PiecewisePolynomial.hover([2 * C_o, 0.0, 0.0], 1.0)
    assert obstacle_penalty(traj, pinned_points(traj, 5, pair), C_o, 5)[0] == 0.0


@derived("penalties/obstacle_penalty: point on the plane gives C_o^3 per sample")
def test_point_on_plane_hand_value():
    C_o, kappa, T = 0.3, 5, 2.0
    pair = SafePair([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    traj = PiecewisePolynomial.hover([1.0, 0.0, 1.0], T)
    J, _, _ = obstacle_penalty(traj, pinned_points(traj, kappa, pair), C_o, kappa)
    # j = 0 excluded, weights 1, ..., 1, 1/2
    assert J == pytest.approx(T / kappa * (kappa - 0.5) * C_o ** 3, rel=1e-12)


@derived("penalties/obstacle_penalty: gradient vs finite differences in q and T")
def test_obstacle_gradient():
    rng = np.random.default_rng(22)
    q, T, bc0, bcf, traj = random_trajectory(rng, 4)
    kappa, C_o = 5, 0.5
    records = []
    for cp in constraint_points(traj, kappa):
        n = rng.normal(size=3)
        records.append((cp.piece, cp.sample, SafePair(cp.position - 0.2 * n / np.linalg.norm(n), n / np.linalg.norm(n))))

    def points_for(tr):
        pts = constraint_points(tr, kappa)
        lookup = {(cp.piece, cp.sample): cp for cp in pts}
        for i, j, pair in records:
            lookup[(i, j)].pairs.append(pair)
        return pts

    def cost(x):
        tr = solve_mapping(x[:q.size].reshape(q.shape), x[q.size:], bc0, bcf)
        return obstacle_penalty(tr, points_for(tr), C_o, kappa)[0]

    J, gc, gT = obstacle_penalty(traj, points_for(traj), C_o, kappa)
    assert J > 0.0
    gq, gTT = propagate_gradient(traj, T, gc, gT)
    fd = central_difference(cost, np.concatenate([q.ravel(), T]), 1e-6)
    assert relative_error(np.concatenate([gq.ravel(), gTT]), fd) < 1e-5


def test_unit_safe_vector_is_enforced():
    with pytest.raises(ValueError):
        SafePair([0, 0, 0], [1.0, 1.0, 0.0])


def test_obstacle_gradient_is_continuous_through_activation():
    C_o, kappa = 0.25, 4
    pair = SafePair([0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    grads = []
    for d in np.linspace(C_o - 0.01, C_o + 0.01, 41):
        traj = PiecewisePolynomial.hover([d, 0.0, 0.0], 1.0)
        grads.append(obstacle_penalty(traj, pinned_points(traj, kappa, pair), C_o, kappa)[1][0, 0])
    steps = np.abs(np.diff(grads))
    # a C^1 penalty has no jump: neighbouring gradients differ by O(step)
    assert steps.max() < 1e-3 and abs(grads[-1]) == 0.0


# -- swarm --------------------------------------------------------------------

def test_well_separated_peers_cost_nothing():
    C_w = 0.5
    own = line([0, 0, 1], [1.0, 0.0, 0.0], 3.0)
    peer = line([0, 2 * C_w, 1], [1.0, 0.0, 0.0], 3.0)
    J, gc, gT = swarm_penalty(own, 0.0, [(peer, 0.0)], C_w, (1.0, 1.0, 0.5), 8)
    assert J == 0.0 and not gc.any() and not gT.any()


@derived("penalties/swarm_penalty: static peer at C_w/2")
def test_static_peer_hand_value():
    C_w, T, kappa = 0.5, 2.0, 6
    own = PiecewisePolynomial.hover([0.0, 0.0, 0.0], T)
    peer = PiecewisePolynomial.hover([C_w / 2, 0.0, 0.0], 10.0)
    J, _, _ = swarm_penalty(own, 0.0, [(peer, 0.0)], C_w, (1.0, 1.0, 0.5), kappa)
    assert J == pytest.approx(T * (0.75 * C_w ** 2) ** 3, rel=1e-12)


@derived("penalties/swarm_penalty: full time gradient with preceding-piece coupling")
def test_swarm_gradient_with_time_coupling():
    rng = np.random.default_rng(23)
    q, T, bc0, bcf, traj = random_trajectory(rng, 4, spread=1.0)
    _, _, _, _, other = random_trajectory(rng, 3, spread=1.0)
    peers = [(other, -0.4)]
    C_w, ell, kappa = 3.0, (1.0, 1.0, 0.5), 5

    def cost(x):
        tr = solve_mapping(x[:q.size].reshape(q.shape), x[q.size:], bc0, bcf)
        return swarm_penalty(tr, 0.3, peers, C_w, ell, kappa)[0]

    J, gc, gT = swarm_penalty(traj, 0.3, peers, C_w, ell, kappa)
    assert J > 0.0
    gq, gTT = propagate_gradient(traj, T, gc, gT)
    fd = central_difference(cost, np.concatenate([q.ravel(), T]), 1e-6)
    assert relative_error(np.concatenate([gq.ravel(), gTT]), fd) < 1e-5


def test_peer_from_the_future_is_a_clock_skew():
    own = PiecewisePolynomial.hover([0.0, 0.0, 0.0], 1.0)
    peer = PiecewisePolynomial.hover([0.1, 0.0, 0.0], 1.0)
    with pytest.raises(ClockSkew):
        swarm_penalty(own, 0.0, [(peer, 5.0)], 0.5)


# -- uniform distribution -----------------------------------------------------

def test_uniform_samples_have_zero_variance_and_gradient():
    traj = line([0, 0, 0], [1.0, 2.0, 0.0], 4.0)
    J, gc, gT = uniform_distribution_penalty(traj, 8)
    assert J == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(gc, 0.0, atol=1e-12) and np.allclose(gT, 0.0, atol=1e-12)


def cubic_through(values, T):
    """One piece whose samples at t = 0, 1, ..., T land on ``values`` (x only)."""
    ts = np.arange(len(values), dtype=float)
    poly = np.polyfit(ts, values, len(values) - 1)[::-1]
    c = np.zeros((1, NCOEF, 3))
    c[0, :poly.size, 0] = poly
    return PiecewisePolynomial(c, [T])


@derived("penalties/uniform_distribution_penalty: D=(1,1,4) gives 2")
def test_uniform_hand_value():
    traj = cubic_through([0.0, 1.0, 2.0, 4.0], 3.0)
    np.testing.assert_allclose(squared_gaps(traj, 3), [1.0, 1.0, 4.0], atol=1e-12)
    assert uniform_distribution_penalty(traj, 3)[0] == pytest.approx(2.0, abs=1e-12)


@derived("penalties/uniform_distribution_penalty: two-pass variance oracle and gradient")
def test_uniform_oracle_and_gradient():
    rng = np.random.default_rng(24)
    q, T, bc0, bcf, traj = random_trajectory(rng, 5)
    kappa = 5
    J, gc, gT = uniform_distribution_penalty(traj, kappa)
    assert abs(J - two_pass_variance(squared_gaps(traj, kappa))) <= 1e-12 * max(1.0, J)

    def cost(x):
        tr = solve_mapping(x[:q.size].reshape(q.shape), x[q.size:], bc0, bcf)
        return uniform_distribution_penalty(tr, kappa)[0]

    gq, gTT = propagate_gradient(traj, T, gc, gT)
    fd = central_difference(cost, np.concatenate([q.ravel(), T]), 1e-6)
    assert relative_error(np.concatenate([gq.ravel(), gTT]), fd) < 1e-5


# -- constraint points and time map -----------------------------------------

def test_adjacent_pieces_share_their_boundary_points():
    rng = np.random.default_rng(25)
    traj = random_trajectory(rng, 4)[-1]
    pts = constraint_points(traj, 5)
    by_key = {(cp.piece, cp.sample): cp for cp in pts}
    for i in range(3):
        assert np.linalg.norm(by_key[(i, 5)].position - by_key[(i + 1, 0)].position) < 1e-9
    assert isinstance(pts[0], ConstraintPoint)


@derived("penalties/time map: tau=ln 2 with dJ/dT=3")
def test_time_map_examples():
    assert forward_time_map([0.0])[0] == 1.0
    assert backward_time_grad([3.0], [np.log(2.0)])[0] == pytest.approx(6.0, rel=1e-15)


def test_time_map_clamps_with_a_warning():
    with pytest.warns(RuntimeWarning):
        T = forward_time_map([50.0, -50.0])
    np.testing.assert_allclose(T, np.exp([20.0, -20.0]))


@SETTINGS
@given(st.lists(st.floats(-10.0, 10.0), min_size=1, max_size=8))
def test_time_map_round_trip(tau):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        T = forward_time_map(tau)
    assert np.all(T > 0.0)
    np.testing.assert_allclose(log_time(T), tau, atol=1e-12)


@SETTINGS
@given(st.integers(0, 2**31 - 1), st.integers(2, 10))
def test_penalties_are_nonnegative(seed, kappa):
    rng = np.random.default_rng(seed)
    traj = random_trajectory(rng, int(rng.integers(1, 5)), spread=2.0)[-1]
    peer = random_trajectory(rng, 2)[-1]
    assert dynamic_feasibility(traj, [1.0, 2.0, 4.0], kappa)[0] >= 0.0
    assert swarm_penalty(traj, 0.0, [(peer, 0.0)], 1.0, (1.0, 1.0, 0.5), kappa)[0] >= 0.0
    assert uniform_distribution_penalty(traj, kappa)[0] >= -1e-12
    assert control_effort(traj)[0] >= 0.0


@SETTINGS
@given(st.floats(0.0, 2 * np.pi), st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_ellipsoidal_distance_is_invariant_under_yaw(angle, xs):
    a, b = np.array(xs[:3]), np.array(xs[3:])
    R = np.array([[np.cos(angle), -np.sin(angle), 0.0], [np.sin(angle), np.cos(angle), 0.0], [0.0, 0.0, 1.0]])
    assert ellipsoidal_distance(R @ a, R @ b, 2.0) == pytest.approx(ellipsoidal_distance(a, b, 2.0), abs=1e-9)


def test_large_downwash_makes_vertical_separation_free():
    a, b = np.array([0.0, 0.0, 0.0]), np.array([0.3, 0.4, 2.0])
    assert ellipsoidal_distance(a, b, 1e12) == pytest.approx(0.5, abs=1e-6)
    assert ellipsoidal_distance(a, b, 2.0) > 0.5


def test_weights_validation():
    with pytest.raises(ValueError):
        PenaltyWeights(downwash=1.0)
    with pytest.raises(ValueError):
        PenaltyWeights(kappa=1)
    with pytest.raises(ValueError):
        PenaltyWeights(effort=-1.0)
    np.testing.assert_allclose(PenaltyWeights().ellipsoid(), [1.0, 1.0, 0.5])
