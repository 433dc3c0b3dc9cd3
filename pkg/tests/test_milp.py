import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from polytree import milp
from polytree.errors import ModelFrozen, UndeclaredVariable, UnsupportedFormat
from polytree.milp import MilpConfig, MilpModel, Status


def knapsack():
    m = MilpModel("knapsack")
    a = m.add_binary("a")
    b = m.add_binary("b")
    m.add_constraint(a + b, "<=", 1)
    m.set_objective(-(3 * a + 2 * b))
    return m, a, b


def random_milp(rng, n_bin, n_cont):
    """Bounded random MILP: box-bounded continuous part, a few coupling rows."""
    m = MilpModel("random")
    x = m.add_variables(n_cont, -5.0, 5.0, "x")
    z = m.add_binaries(n_bin, "z")
    n_rows = int(rng.integers(3, 8))
    for _ in range(n_rows):
        ax = rng.normal(size=n_cont)
        az = rng.normal(size=n_bin)
        m.add_constraint(x @ ax + z @ az, "<=", float(rng.uniform(0.5, 3.0)))
    if rng.random() < 0.5:
        m.add_constraint(z.sum(), "<=", float(rng.integers(1, n_bin + 1)))
    m.set_objective(x @ rng.normal(size=n_cont) + z @ rng.normal(size=n_bin))
    return m


# -- builder ----------------------------------------------------------------------

def test_builder_counts():
    m = MilpModel()
    x = m.add_variable(name="x")
    y = m.add_variable(name="y")
    m.add_constraint(x + y, "<=", 1)
    assert m.n_vars == 2 and m.n_constraints == 1


def test_binary_bounds():
    m = MilpModel()
    b = m.add_binary()
    lo, hi = m.bounds(b)
    assert lo.item() == 0.0 and hi.item() == 1.0


def test_foreign_variable_rejected():
    m1, m2 = MilpModel(), MilpModel()
    x = m1.add_variable()
    m2.add_variable()
    with pytest.raises(UndeclaredVariable):
        m2.add_constraint(x, "<=", 1)


def test_frozen_after_solve():
    m, a, b = knapsack()
    milp.solve_milp(m)
    with pytest.raises(ModelFrozen):
        m.add_variable()
    with pytest.raises(ModelFrozen):
        m.add_constraint(a, "<=", 1)


def test_matrix_block_is_one_handle():
    m = MilpModel()
    G = m.add_variables((2, 3), name="G")
    assert G.shape == (2, 3) and m.n_vars == 6
    K = np.arange(6.0).reshape(3, 2)
    L = np.arange(4.0).reshape(2, 2) - 1
    x = np.linspace(-1, 1, 6)
    sol = milp.MilpSolution(Status.OPTIMAL, x, 0.0)
    Gv = x.reshape(2, 3)
    np.testing.assert_allclose(sol.value(G @ K), Gv @ K)
    np.testing.assert_allclose(sol.value(L @ G), L @ Gv)
    np.testing.assert_allclose(sol.value(G.T), Gv.T)
    np.testing.assert_allclose(sol.value(G[:, 1:].sum()), Gv[:, 1:].sum())
    np.testing.assert_allclose(sol.value(milp.vstack([G, 2 * G])), np.vstack([Gv, 2 * Gv]))


def test_big_m_interval_derivation():
    m = MilpModel()
    x = m.add_variables(2, -3.0, 4.0)
    b = m.add_binary()
    rec = m.add_big_m(x[0] - 2 * x[1], b)
    assert rec.M.item() == pytest.approx(4 + 6)  # sup over the box
    rec = m.add_big_m(x[0] + 0.0, b)
    assert rec.M.item() == 10.0  # clamped to the lower limit
    y = m.add_variable()
    rec = m.add_big_m(y, b)
    assert rec.M.item() == 1e4  # unbounded fallback


# -- LP ---------------------------------------------------------------------------

def test_lp_max_x():
    m = MilpModel()
    x = m.add_variable(0.0)
    m.add_constraint(x, "<=", 3)
    m.set_objective(-x)
    sol = milp.solve_lp(m)
    assert sol.status is Status.OPTIMAL
    assert sol.value(x) == pytest.approx(3.0)
    assert sol.objective == pytest.approx(-3.0)
    assert sol.stats["cs_residual"] <= 1e-7


def test_lp_min_sum():
    m = MilpModel()
    x = m.add_variables(2, 0.0)
    m.add_constraint(x.sum(), ">=", 1)
    m.set_objective(x.sum())
    sol = milp.solve_lp(m)
    assert sol.objective == pytest.approx(1.0)
    assert sol.stats["cs_residual"] <= 1e-7


def test_lp_infeasible_farkas():
    m = MilpModel()
    x = m.add_variable()
    m.add_constraint(x, "<=", -1)
    m.add_constraint(x, ">=", 0)
    sol = milp.solve_lp(m)
    assert sol.status is Status.INFEASIBLE
    cert = sol.certificate
    y, z = cert["y_ineq"], cert["z_eq"]
    # y >= 0, R'y + E'z = 0 and r'y + e'z < 0 prove {R v <= r, E v = e} empty
    assert np.all(y >= -1e-12)
    np.testing.assert_allclose(cert["R"].T @ y + cert["E"].T @ z, 0.0, atol=1e-9)
    assert cert["r"] @ y + cert["e"] @ z < -1e-9


def test_lp_unbounded_ray():
    m = MilpModel()
    x = m.add_variable(0.0)
    m.set_objective(-x)
    sol = milp.solve_lp(m)
    assert sol.status is Status.UNBOUNDED
    assert sol.certificate["ray"][0] > 0


# -- MILP -------------------------------------------------------------------------

def test_knapsack():
    m, a, b = knapsack()
    sol = milp.solve_milp(m)
    assert sol.status is Status.OPTIMAL
    assert sol.value(a) == 1 and sol.value(b) == 0
    assert sol.objective == pytest.approx(-3.0)
    # enumeration of the four assignments
    best = min(-(3 * i + 2 * j) for i, j in itertools.product((0, 1), repeat=2) if i + j <= 1)
    assert sol.objective == best


def test_pure_lp_routes_to_solve_lp():
    def build():
        m = MilpModel()
        x = m.add_variables(2, 0.0)
        m.add_constraint(x.sum(), ">=", 1)
        m.set_objective(x @ np.array([1.0, 2.0]))
        return m
    a, b = milp.solve_milp(build()), milp.solve_lp(build())
    assert a.status is b.status and a.objective == b.objective
    np.testing.assert_array_equal(a.x, b.x)


def test_eight_binaries_match_enumeration():
    rng = np.random.default_rng(8)
    m = random_milp(rng, 8, 6)
    best, _ = milp.brute_force_milp(m)
    sol = milp.solve_milp(m)
    assert sol.objective == pytest.approx(best, abs=1e-6)


def _check_incumbent(m, sol):
    assert m.max_violation(sol.x) <= 1e-7
    xi = sol.x[m.binary_indices]
    assert np.max(np.abs(xi - np.round(xi)), initial=0.0) <= 1e-6


@pytest.mark.slow
def test_bnb_matches_enumeration_on_random_models():
    rng = np.random.default_rng(100)
    for _ in range(100):
        n_bin = int(rng.integers(1, 8))
        m = random_milp(rng, n_bin, int(rng.integers(1, 21)))
        best, _ = milp.brute_force_milp(m)
        sol = milp.solve_milp(m)
        if np.isinf(best):
            assert sol.status is Status.INFEASIBLE
            continue
        assert sol.status is Status.OPTIMAL
        assert sol.objective == pytest.approx(best, abs=1e-6)
        _check_incumbent(m, sol)


def test_bnb_matches_enumeration_ten_binaries():
    rng = np.random.default_rng(10)
    for _ in range(3):
        m = random_milp(rng, 10, 20)
        best, _ = milp.brute_force_milp(m)
        sol = milp.solve_milp(m)
        assert sol.objective == pytest.approx(best, abs=1e-6)


def test_bnb_agrees_with_highs_backend():
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = random_milp(rng, 6, 8)
        a = milp.solve_milp(m)
        b = milp.solve_milp(m, MilpConfig(backend="highs"))
        assert a.status is b.status
        if a.status is Status.OPTIMAL:
            assert a.objective == pytest.approx(b.objective, abs=1e-6)
            _check_incumbent(m, b)


def test_bound_monotone_and_gap_nonnegative():
    rng = np.random.default_rng(11)
    for _ in range(10):
        m = random_milp(rng, 9, 10)
        sol = milp.solve_milp(m)
        hist = np.array(sol.stats.get("bound_history", []))
        assert np.all(np.diff(hist) >= -1e-12)
        assert sol.gap >= 0


def test_sos1_group():
    m = MilpModel()
    d = m.add_binaries(4)
    m.add_sos1(d)
    m.set_objective(d @ np.array([3.0, 1.0, 2.0, 5.0]))
    sol = milp.solve_milp(m)
    np.testing.assert_array_equal(sol.value(d), [0, 1, 0, 0])


def test_node_limit_reports_incumbent():
    rng = np.random.default_rng(12)
    m = random_milp(rng, 10, 10)
    sol = milp.solve_milp(m, MilpConfig(node_limit=2))
    assert sol.status in (Status.NODE_LIMIT, Status.OPTIMAL, Status.INFEASIBLE)
    if sol.status is Status.NODE_LIMIT and sol.x is not None:
        _check_incumbent(m, sol)
        assert sol.gap >= 0


def test_determinism():
    results = []
    for _ in range(2):
        m = random_milp(np.random.default_rng(21), 8, 8)
        sol = milp.solve_milp(m)
        results.append((sol.status, sol.objective, sol.x.tobytes()))
    assert results[0] == results[1]


def test_solver_call_counter():
    before = milp.solver_calls()
    m, _, _ = knapsack()
    milp.solve_milp(m)
    assert milp.solver_calls() > before


# -- export -----------------------------------------------------------------------

def test_export_one_variable():
    m = MilpModel()
    x = m.add_variable(0.0, 2.0)
    m.set_objective(x)
    text = milp.export_model(m)
    assert text.count("<= v0 <=") == 1
    assert text.rstrip().endswith("End")


def test_export_empty_model():
    text = milp.export_model(MilpModel())
    assert "Minimize" in text and "Subject To" in text and text.rstrip().endswith("End")


def test_export_unsupported():
    with pytest.raises(UnsupportedFormat):
        milp.export_model(MilpModel(), "mps")


def _read_with_highs(tmp_path, text):
    highspy = pytest.importorskip("highspy")
    path = tmp_path / "model.lp"
    path.write_text(text)
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    assert h.readModel(str(path)) == highspy.HighsStatus.kOk
    return h, highspy


def test_export_knapsack_external_optimum(tmp_path):
    m, _, _ = knapsack()
    h, highspy = _read_with_highs(tmp_path, milp.export_model(m))
    h.run()
    assert h.getModelStatus() == highspy.HighsModelStatus.kOptimal
    assert h.getInfo().objective_function_value == pytest.approx(-3.0)


def test_export_round_trip_matrix(tmp_path):
    rng = np.random.default_rng(4)
    m = random_milp(rng, 3, 4)
    cm = m.compile()
    h, _ = _read_with_highs(tmp_path, milp.export_model(m))
    lp = h.getLp()
    A = sp.csc_matrix((lp.a_matrix_.value_, lp.a_matrix_.index_, lp.a_matrix_.start_),
                      shape=(lp.num_row_, lp.num_col_)).toarray()
    np.testing.assert_allclose(A, cm.A.toarray(), rtol=1e-12)
    np.testing.assert_allclose(lp.col_cost_, cm.c, rtol=1e-12)
    np.testing.assert_allclose(lp.col_lower_, cm.lb)
    np.testing.assert_allclose(lp.col_upper_, cm.ub)
