import numpy as np
import pytest

from cefc.gridsim import Scenario
from cefc.robustness import (
    FeederSpec,
    check_prop1,
    enumerate_modes,
    mode_hamiltonian_values,
    mode_weights,
    product_form_step,
    select_mode,
    solve_costate,
    switched_step,
)


@pytest.fixture(scope="module")
def feeders():
    return FeederSpec.uniform(3, 40.0, 3)


@pytest.fixture(scope="module")
def modes(feeders, cefc_model, node_base):
    return enumerate_modes(feeders, cefc_model, node_base)


class TestFeederSpec:
    def test_uniform_layout(self, feeders):
        assert feeders.n_feeders == 3
        assert np.array_equal(feeders.nodes, [0, 1, 2])
        assert np.all(feeders.quanta_mw == 40.0)

    def test_mismatched_nodes_rejected(self):
        with pytest.raises(ValueError):
            FeederSpec(quanta_mw=[40.0, 40.0], nodes=[0])

    def test_levels_floor(self):
        with pytest.raises(ValueError):
            FeederSpec(quanta_mw=[40.0], nodes=[0], levels=1)


class TestEnumerateModes:
    def test_three_binary_feeders_give_eight_modes(self, modes):
        assert modes.n_modes == 8
        # lexicographic: first mode sheds nothing, last sheds every feeder
        assert np.array_equal(modes.modes[0], [0, 0, 0])
        assert np.array_equal(modes.modes[-1], [1, 1, 1])

    def test_no_shed_mode_has_zero_cost_and_column(self, modes):
        assert modes.costs[0] == 0.0
        assert np.all(modes.B_modes[0] == 0.0)
        assert np.all(modes.costs[1:] > 0.0)

    def test_shed_ratio_scales_with_the_quantum(self, feeders, cefc_model, node_base):
        ms = enumerate_modes(feeders, cefc_model, node_base)
        assert np.isclose(ms.shed_ratio[-1, 0], 40.0 / node_base[0])

    def test_mode_cap(self, cefc_model, node_base):
        wide = FeederSpec.uniform(13, 10.0, 3)
        with pytest.raises(ValueError):
            enumerate_modes(wide, cefc_model, node_base)


class TestSwitchedDynamics:
    def test_step_is_affine_in_the_mode_column(self, modes, cefc_model):
        g = np.arange(cefc_model.dim, dtype=float) / cefc_model.dim
        out = switched_step(g, 5, modes, cefc_model.A)
        assert np.allclose(out, cefc_model.A @ g + modes.B_modes[5])

    def test_step_index_checked(self, modes, cefc_model):
        with pytest.raises(IndexError):
            switched_step(np.zeros(cefc_model.dim), 99, modes, cefc_model.A)

    def test_product_form_reduces_to_the_active_mode(self, modes, cefc_model):
        g = np.linspace(-0.01, 0.01, cefc_model.dim)
        for i in range(modes.n_modes - 1):
            v = np.zeros(modes.n_modes - 1)
            v[i] = 1.0
            assert np.allclose(
                product_form_step(g, v, modes, cefc_model.A),
                switched_step(g, i, modes, cefc_model.A),
            )
        assert np.allclose(
            product_form_step(g, np.zeros(modes.n_modes - 1), modes, cefc_model.A),
            switched_step(g, modes.n_modes - 1, modes, cefc_model.A),
        )

    def test_mode_weights_form_a_simplex(self):
        v = np.array([0.3, 0.5, 0.2])
        w = mode_weights(v)
        assert np.isclose(np.sum(w), 1.0)
        assert np.allclose(w, [0.3, 0.35, 0.07, 0.28])


class TestCostate:
    def test_zero_boundary_collapses_the_trajectory(self):
        lam = solve_costate(np.diag([0.9, 0.8]), 50)
        assert np.all(lam == 0.0)

    def test_nonzero_terminal_recursion(self):
        A = np.array([[0.5, 0.1], [0.0, 0.7]])
        lam = solve_costate(A, 3, terminal=[1.0, 2.0])
        assert np.allclose(lam[2], [1.0, 2.0])
        assert np.allclose(lam[1], -A.T @ lam[2])
        assert np.allclose(lam[0], A.T @ A.T @ lam[2])


class TestHamiltonianRanking:
    def test_zero_costate_reduces_values_to_costs(self, modes, cefc_model):
        g = np.zeros(cefc_model.dim)
        vals = mode_hamiltonian_values(np.zeros(cefc_model.dim), g, modes, cefc_model.A)
        diffs = vals[:, None] - vals[None, :]
        cost_diffs = modes.costs[:, None] - modes.costs[None, :]
        assert np.array_equal(diffs, cost_diffs)

    def test_select_mode_breaks_ties_low(self):
        assert select_mode([3.0, 1.0, 1.0, 2.0]) == 1
        with pytest.raises(ValueError):
            select_mode([])


class TestCheckProp1:
    def test_learned_equals_oracle_holds(self, grid, cefc_model, limits, feeders):
        scenario = Scenario(inertia_scale=0.85, trip_set=(1, 2, 3), trip_time=5.0, horizon=30.0)
        report = check_prop1(cefc_model, cefc_model, grid, scenario, feeders, limits)
        assert report.k_star == report.i_star
        assert len(report.values_learned) == 8
        if report.brute_force_mode is not None:
            assert report.holds is True
        d = report.to_dict()
        assert set(d) >= {"k_star", "i_star", "holds", "modes", "feasible"}
