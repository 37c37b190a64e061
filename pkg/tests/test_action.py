import json
import math

import numpy as np
import pytest

from roughldp.action import (
    ActionProblem,
    H0ViolationError,
    RateResult,
    first_order_residual,
    minimize_action,
    rate_I,
    rate_J,
)
from roughldp.flow import solve_skeleton
from roughldp.rough_core import (
    CameronMartinPath,
    GridError,
    Level2RoughPath,
    SampledPath,
    TimeGrid,
    lift_piecewise_linear,
)
from roughldp.systems import additive, linear1d, random_elliptic, zero


@pytest.fixture(scope="module")
def additive_result():
    p = ActionProblem(additive(2), [0.0, 0.0], [1.0, -2.0], n_controls=16, n_starts=2)
    return p, minimize_action(p)


@pytest.fixture(scope="module")
def linear_result():
    p = ActionProblem(linear1d(), [1.0], [math.e], n_controls=64, n_starts=1)
    return p, minimize_action(p)


def test_problem_validation():
    with pytest.raises(GridError):
        ActionProblem(additive(1), [0.0], [1.0], n_controls=16, solver_steps=24)
    with pytest.raises(ValueError):
        ActionProblem(additive(1), [0.0, 0.0], [1.0])
    p = ActionProblem(additive(1), [0.0], [3.0])
    assert p.tol_feas == pytest.approx(4e-6)
    assert p.solver_steps == 64 and p.refine == 2


def test_additive_value_and_line(additive_result):
    p, res = additive_result
    assert res.value == pytest.approx(0.5 * 5.0, abs=1e-6)
    assert res.residual < 1e-8
    np.testing.assert_allclose(res.h.derivative, np.tile([1.0, -2.0], (16, 1)), atol=1e-6)
    assert first_order_residual(res, p) < 1e-8


def test_linear_value(linear_result):
    p, res = linear_result
    assert res.value == pytest.approx(0.5, abs=1e-5)
    np.testing.assert_allclose(res.h.derivative, 1.0, atol=1e-4)
    assert first_order_residual(res, p) < 1e-6


def test_shifted_values_nonnegative(additive_result):
    _, res = additive_result
    assert res.shifted_value(res.value) == 0.0
    assert all(v >= 0 for v in res.shifted_values)
    assert min(res.shifted_values) == 0.0
    assert all(m.residual <= 1e-6 * (1 + math.sqrt(5)) for m in res.minima)


def test_json_fields(additive_result):
    _, res = additive_result
    body = json.loads(res.to_json())
    assert {"value", "residual", "control", "seed", "start_index", "minima"} <= set(body)
    assert len(body["control"]) == 32


def test_refinement_invariance():
    vals = []
    for n in (32, 64, 128):
        p = ActionProblem(linear1d(), [1.0], [2.0], n_controls=n, n_starts=1)
        vals.append(minimize_action(p).value)
    assert vals[0] == pytest.approx(0.5 * math.log(2.0) ** 2, abs=1e-6)
    assert max(vals) - min(vals) < 1e-6


def test_unreachable_endpoint_is_h0_violation():
    with pytest.raises(H0ViolationError):
        minimize_action(ActionProblem(zero(1), [0.0], [1.0], n_controls=8, n_starts=2, max_outer=5))


def test_multistart_is_deterministic_across_workers():
    vf = random_elliptic(2, 2, seed=3)
    kw = dict(n_controls=8, n_starts=3, seed=9)
    a = minimize_action(ActionProblem(vf, [0.0, 0.0], [0.5, 0.3], workers=1, **kw))
    b = minimize_action(ActionProblem(vf, [0.0, 0.0], [0.5, 0.3], workers=3, **kw))
    assert a.to_json() == b.to_json()


def test_random_elliptic_kkt_and_trace():
    vf = random_elliptic(2, 2, seed=3)
    p = ActionProblem(vf, [0.0, 0.0], [0.5, 0.3], n_controls=16, n_starts=1)
    res = minimize_action(p)
    end = solve_skeleton(vf, res.h.refine(p.solver_grid), p.a).endpoint
    assert np.linalg.norm(end - p.a_prime) <= p.tol_feas
    assert first_order_residual(res, p) < 1e-6
    merit = [max(c, s) for c, s in res.trace]
    assert all(b <= a * (1 + 1e-9) for a, b in zip(merit, merit[1:]))


def test_kkt_residual_requires_feasibility(additive_result):
    p, res = additive_result
    bad = RateResult(res.h, res.value, 1.0, res.minima, 0, 0)
    with pytest.raises(ValueError):
        first_order_residual(bad, p)


# --- rate functions -------------------------------------------------------------------


def test_rate_I_cases(additive_result):
    p, res = additive_result
    h = res.h.refine(p.solver_grid)
    X = lift_piecewise_linear(h.as_path())
    assert rate_I(X, p) == pytest.approx(res.value, abs=1e-12)
    area = np.array([[0.0, 0.1], [-0.1, 0.0]])
    perturbed = Level2RoughPath(X.grid, X.first, X.second + area)
    assert rate_I(perturbed, p) == math.inf
    wrong = lift_piecewise_linear(h.scale(0.5).as_path())
    assert rate_I(wrong, p) == math.inf


def test_rate_I_lower_semicontinuity_surrogate():
    p = ActionProblem(additive(1), [0.0], [1.0], n_controls=32, n_starts=1)
    grid = p.solver_grid
    t = grid.times
    base = CameronMartinPath.linear(grid, [1.0])
    bump = CameronMartinPath.from_path(SampledPath(grid, np.sin(np.pi * t)[:, None]))
    rates = []
    for n in range(1, 8):
        Xn = lift_piecewise_linear((base + bump.scale(1.0 / n)).as_path())
        rates.append(rate_I(Xn, p))
    c = max(rates)
    assert c < math.inf
    assert rate_I(lift_piecewise_linear(base.as_path()), p) <= c + p.tol_feas


def test_rate_J_brownian_bridge():
    p = ActionProblem(additive(1), [0.0], [1.0], n_controls=16, n_starts=1)
    base = minimize_action(p)
    grid = TimeGrid(16)
    t = grid.times
    y = SampledPath(grid, (t + 0.3 * np.sin(2 * np.pi * t))[:, None])
    got = rate_J(y, p, base)
    inc = np.diff(y.values[:, 0])
    exact = 0.5 * np.sum(inc**2) / grid.dt - 0.5
    assert got.status == "ok"
    assert float(got) == pytest.approx(exact, abs=1e-8)


def test_rate_J_of_skeleton_is_zero():
    p = ActionProblem(linear1d(), [1.0], [math.e], n_controls=16, n_starts=1)
    base = minimize_action(p)
    sk = solve_skeleton(p.vf, base.h.refine(p.solver_grid), p.a)
    y = SampledPath(TimeGrid(16), sk.phi0[:: p.refine])
    assert abs(float(rate_J(y, p, base))) < 1e-6


def test_rate_J_upper_bound_on_feasible_controls():
    p = ActionProblem(linear1d(), [1.0], [math.e], n_controls=8, n_starts=1)
    base = minimize_action(p)
    rng = np.random.default_rng(0)
    for _ in range(3):
        k = rng.standard_normal((8, 1))
        k -= k.mean() - 1.0  # endpoint h_1 = 1 keeps phi0(h)_1 = e
        h = CameronMartinPath(TimeGrid(8), k)
        sk = solve_skeleton(p.vf, h.refine(p.solver_grid), p.a)
        y = SampledPath(TimeGrid(8), sk.phi0[:: p.refine])
        assert float(rate_J(y, p, base)) <= h.energy - base.value + 1e-6


def test_rate_J_rejects_bad_paths():
    p = ActionProblem(additive(1), [0.0], [1.0], n_controls=8, n_starts=1)
    grid = TimeGrid(8)
    wrong_end = SampledPath(grid, (0.5 * grid.times)[:, None])
    res = rate_J(wrong_end, p)
    assert res.value == math.inf and res.status == "bad-endpoint"
    wrong_start = SampledPath(grid, (0.2 + 0.8 * grid.times)[:, None])
    assert rate_J(wrong_start, p).status == "bad-start"
