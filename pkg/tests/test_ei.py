import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agriscape.ei import (EIDecision, Mandate, QuadraticNPVModel, SolverConfig, accumulated_discount,
                          combined_yield, ei_objective, evaluate_decisions, plot_economics,
                          plot_npv_agricultural, plot_npv_habitat, pest_effect, pollination_effect,
                          projected_gradient_ascent, scale_params, sensitivity_sweep, solve_ei,
                          time_accumulation)
from agriscape.params import EconomicParams, EIParams, ParameterError
from conftest import quadratic_grid_oracle, random_instance, square_config

FOREVER = 10_000.0  # years; saturates every accumulation term
ANNUITY = (1 - 1.05 ** -20) / 0.05  # closed-form present value of 1 USD/yr


def zero_strength(params: EIParams) -> EIParams:
    return replace(params, crops={k: c.zero_services() for k, c in params.crops.items()})


def one_plot(label="Spring wheat", yield_=2.0, size=100.0):
    return square_config([(0, "ag", label, yield_, 0, 0)], size=size)


class TestAccumulation:
    def test_values(self):
        assert time_accumulation(0.2, 0) == 0
        assert time_accumulation(0.2, 1e6) == pytest.approx(1.0)
        assert time_accumulation(0.2, 1) == pytest.approx(0.18126924692201818, rel=1e-12)

    def test_annuity(self):
        assert EconomicParams().annuity == pytest.approx(12.462210342539986, rel=1e-12)
        assert EconomicParams().annuity == pytest.approx(ANNUITY, rel=1e-12)

    def test_accumulated_discount(self):
        econ = EconomicParams()
        direct = sum((1 - math.exp(-0.2 * t)) / 1.05 ** t for t in range(1, 21))
        assert accumulated_discount(0.2, econ) == pytest.approx(direct, rel=1e-12)


class TestServices:
    params = EIParams()

    def test_no_interventions(self):
        c = one_plot()
        d = EIDecision.zeros(c)
        assert pollination_effect(0, d, 5, c, self.params) == 0
        assert pest_effect(0, d, 5, c, self.params) == 0

    def test_wheat_self_margin(self):
        c = one_plot()
        d = EIDecision.from_mapping(c, {0: (1.0, 0.0)})
        assert pollination_effect(0, d, FOREVER, c, self.params) == pytest.approx(0.05, rel=1e-12)

    def test_canola_existing_habitat(self):
        # centres 200 m apart
        c = square_config([(0, "ag", "Canola/rapeseed", 2.0, 0, 0), (0, "hab", "Grassland", 0, 2, 0)])
        assert c.distance_matrix[0, 1] == pytest.approx(200.0)
        d = EIDecision.zeros(c)
        assert pollination_effect(0, d, FOREVER, c, self.params) == pytest.approx(0.05 * math.exp(-1), rel=1e-12)
        assert 0.05 * math.exp(-1) == pytest.approx(0.01839, abs=1e-5)

    def test_oats_no_margin_pest_control(self):
        c = one_plot("Oats")
        d = EIDecision.from_mapping(c, {0: (1.0, 0.0)})
        assert pest_effect(0, d, FOREVER, c, self.params) == 0

    def test_soybean_half_margin(self):
        c = one_plot("Soybeans")
        d = EIDecision.from_mapping(c, {0: (0.5, 0.0)})
        assert pest_effect(0, d, FOREVER, c, self.params) == pytest.approx(0.05, rel=1e-12)

    def test_combined_yield(self):
        c = one_plot()
        assert combined_yield(0, EIDecision.zeros(c), 3, c, self.params) == 2.0
        d = EIDecision.from_mapping(c, {0: (1.0, 0.0)})
        assert combined_yield(0, d, FOREVER, c, self.params) == pytest.approx(2.2, rel=1e-12)

    def test_unknown_crop(self):
        params = replace(self.params, crops={"Barley": self.params.crops["Barley"]})
        with pytest.raises(ParameterError):
            pollination_effect(0, EIDecision.zeros(one_plot()), 1, one_plot(), params)


class TestNPV:
    params = EIParams()

    def test_baseline_plot(self):
        c = one_plot()
        v = plot_npv_agricultural(0, EIDecision.zeros(c), c, self.params)
        assert v == pytest.approx(300 * ANNUITY, rel=1e-12)
        assert v == pytest.approx(3738.66, abs=0.01)

    def test_full_conversion(self):
        c = one_plot()
        e = self.params.economics
        v = plot_npv_agricultural(0, EIDecision.from_mapping(c, {0: (0.0, 1.0)}), c, self.params)
        assert v == pytest.approx(-e.c_h_impl - ANNUITY * e.c_h_maint, rel=1e-12)

    def test_margin_cost_superposition(self):
        c = one_plot()
        p = zero_strength(self.params)
        e = p.economics
        base = plot_npv_agricultural(0, EIDecision.zeros(c), c, p)
        v = plot_npv_agricultural(0, EIDecision.from_mapping(c, {0: (1.0, 0.0)}), c, p)
        assert v == pytest.approx(base - (e.c_m_impl + ANNUITY * e.c_m_maint), rel=1e-12)

    def test_habitat_npv(self):
        econ = EconomicParams()
        assert plot_npv_habitat(2.0, econ) == 0
        assert plot_npv_habitat(2.0, replace(econ, c_exist_hab=10.0)) == pytest.approx(-20 * ANNUITY, rel=1e-12)
        assert plot_npv_habitat(2.0, replace(econ, c_exist_hab=10.0)) == pytest.approx(-249.24, abs=0.01)
        assert plot_npv_habitat(1e-12, replace(econ, c_exist_hab=10.0)) == pytest.approx(0, abs=1e-9)

    def test_habitat_plot_rejected(self):
        c = square_config([(0, "hab", "Wetland", 0, 0, 0)])
        with pytest.raises(ValueError):
            plot_npv_agricultural(0, EIDecision.zeros(c), c, self.params)


class TestObjective:
    params = EIParams()

    def test_zero_decisions(self, rng):
        c = random_instance(rng, 3, 2)
        d = EIDecision.zeros(c)
        total = sum(plot_npv_agricultural(i, d, c, self.params) for i in c.agricultural_ids)
        assert ei_objective(c, d, self.params) == pytest.approx(total, rel=1e-12)

    def test_no_penalty(self, rng):
        c = random_instance(rng, 2, 1)
        p = replace(self.params, economics=replace(self.params.economics, penalty=0.0))
        d = EIDecision.from_mapping(c, {0: (0.4, 0.2), 1: (0.1, 0.9)})
        total = sum(plot_npv_agricultural(i, d, c, p) for i in c.agricultural_ids)
        assert ei_objective(c, d, p) == pytest.approx(total, rel=1e-12)

    def test_penalty_term(self):
        c = one_plot()
        d = EIDecision.from_mapping(c, {0: (0.1, 0.0)})
        assert ei_objective(c, d, self.params) == pytest.approx(plot_npv_agricultural(0, d, c, self.params) - 10)

    def test_isolated_penalty_gradient(self):
        c = one_plot()
        crops = {k: v.zero_services() for k, v in self.params.crops.items()}
        econ = EconomicParams(c_m_impl=0, c_h_impl=0, c_m_maint=0, c_h_maint=0, c_ag_maint=0, penalty=1000)
        model = QuadraticNPVModel(c, EIParams(crops=crops, economics=econ))
        g = model.gradient(np.array([0.3, 0.0]))
        assert g[0] == pytest.approx(-2 * 1000 * 0.3, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(0, 2))
def test_model_matches_direct_route(seed, n_ag, n_hab):
    """Closed-form plot NPVs agree with the year-by-year formulas."""
    rng = np.random.default_rng(seed)
    c = random_instance(rng, n_ag, n_hab)
    params = EIParams()
    econ = {k: replace(v, habitat_payment=float(rng.uniform(0, 150)), price=v.price * float(rng.uniform(1, 1.3)))
            for k, v in plot_economics(c, params).items()}
    d = EIDecision(tuple(c.agricultural_ids), rng.uniform(0, 1, n_ag), rng.uniform(0, 1, n_ag))
    model = QuadraticNPVModel(c, params, econ)
    fast = model.plot_npvs(d.m, d.h)
    for k, pid in enumerate(c.agricultural_ids):
        assert fast[k] == pytest.approx(plot_npv_agricultural(pid, d, c, params, econ[pid]), rel=1e-10, abs=1e-6)
    x = np.concatenate([d.m, d.h])
    assert model.objective(x) == pytest.approx(ei_objective(c, d, params, econ), rel=1e-10, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    c = random_instance(rng, int(rng.integers(1, 5)), int(rng.integers(0, 2)))
    ids = c.agricultural_ids
    mandate = Mandate(float(rng.uniform(0.5, 3.0)), (tuple(range(len(ids))),))
    model = QuadraticNPVModel(c, EIParams(), mandate=mandate)
    x = rng.uniform(0.05, 0.95, 2 * len(ids))
    g = model.gradient(x)
    h = 1e-4
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        fd = (model.objective(x + e) - model.objective(x - e)) / (2 * h)
        assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-3)


class TestSolver:
    def test_projected_ascent_box_quadratic(self):
        target = np.array([2.0, -1.0, 0.3])
        res = projected_gradient_ascent(lambda x: -float(((x - target) ** 2).sum()), lambda x: -2 * (x - target),
                                        np.zeros(3), np.zeros(3), np.ones(3), SolverConfig())
        assert res.converged
        assert res.x == pytest.approx([1.0, 0.0, 0.3], abs=1e-8)

    def test_iteration_cap_flags_nonconvergence(self):
        scale = np.array([1.0, 100.0, 1e4])  # ill-conditioned, so one step cannot finish
        res = projected_gradient_ascent(lambda x: -float((scale * (x - 0.5) ** 2).sum()),
                                        lambda x: -2 * scale * (x - 0.5), np.zeros(3), np.zeros(3),
                                        np.ones(3), SolverConfig(max_iterations=1))
        assert not res.converged
        assert res.iterations == 1

    def test_zero_benefit(self, rng):
        for _ in range(5):
            c = random_instance(rng, int(rng.integers(1, 6)), int(rng.integers(0, 3)))
            sol = solve_ei(c, zero_strength(EIParams()))
            assert np.all(sol.decisions.m == 0) and np.all(sol.decisions.h == 0)

    def test_one_plot_grid_oracle(self, rng):
        for _ in range(3):
            c = random_instance(rng, 1, int(rng.integers(0, 2)))
            sol = solve_ei(c, EIParams())
            best, resid = quadratic_grid_oracle(c, EIParams())
            assert resid <= 1e-6 * max(1.0, abs(best))
            assert sol.objective >= best - 1e-4 * abs(best)
            assert abs(sol.objective - best) <= 1e-4 * abs(best)

    def test_solution_consistency(self, rng):
        c = random_instance(rng, 4, 2, n_farms=2)
        sol = solve_ei(c, EIParams())
        again = evaluate_decisions(c, EIParams(), sol.decisions)
        assert again.plot_npvs == pytest.approx(sol.plot_npvs)
        for f in c.farms:
            assert sol.farm_npvs[f.id] == pytest.approx(sum(sol.plot_npvs[p] for p in f.plot_ids))
        assert np.all((sol.decisions.m >= 0) & (sol.decisions.m <= 1))
        assert np.all((sol.decisions.h >= 0) & (sol.decisions.h <= 1))

    def test_deterministic(self, rng):
        c = random_instance(rng, 5, 1)
        a, b = solve_ei(c, EIParams()), solve_ei(c, EIParams())
        assert a.to_dict() == b.to_dict()

    def test_local_optimality(self, rng):
        """No coordinate perturbation inside the box improves the returned point."""
        c = random_instance(rng, 4, 1)
        sol = solve_ei(c, EIParams())
        model = QuadraticNPVModel(c, EIParams())
        x = np.concatenate([sol.decisions.m, sol.decisions.h])
        f0 = model.objective(x)
        for k in range(len(x)):
            for step in (-1e-3, 1e-3):
                y = x.copy()
                y[k] = min(1.0, max(0.0, y[k] + step))
                assert model.objective(y) <= f0 + 1e-6 * abs(f0)

    def test_lower_bounds_respected(self, rng):
        c = random_instance(rng, 3)
        econ = {k: replace(v, m_lower=0.4) for k, v in plot_economics(c, EIParams()).items()}
        sol = solve_ei(c, EIParams(), economics=econ)
        assert np.all(sol.decisions.m >= 0.4)

    def test_mandate_projection(self, rng):
        c = random_instance(rng, 3, 0, n_farms=1)
        area = np.array([c.plots[i].area for i in c.agricultural_ids])
        need = 0.6 * area.sum()
        sol = solve_ei(c, EIParams(), mandate=Mandate(need, (tuple(range(3)),)))
        assert float(sol.decisions.h @ area) >= need - 1e-9

    def test_no_agricultural_plots(self):
        with pytest.raises(ValueError):
            solve_ei(square_config([(0, "hab", "Wetland", 0, 0, 0)]), EIParams())

    def test_round_trip(self, rng):
        from agriscape.ei import EISolution

        sol = solve_ei(random_instance(rng, 2, 1), EIParams())
        assert EISolution.from_dict(sol.to_dict()).to_dict() == sol.to_dict()


class TestSensitivity:
    def test_unit_multipliers(self, rng):
        c = random_instance(rng, 3)
        base = solve_ei(c, EIParams())
        same = solve_ei(c, scale_params(EIParams(), {"Corn.alpha": 1.0, "economics.c_m_impl": 1.0}))
        assert same.to_dict() == base.to_dict()

    def test_price_sweep_monotone(self):
        c = square_config([(0, "ag", "Soybeans", 2.7, 0, 0), (0, "ag", "Soybeans", 2.7, 2, 0)])
        fracs = []
        for mult in (0.5, 1.0, 2.0, 4.0, 8.0):
            sol = solve_ei(c, scale_params(EIParams(), {"Soybeans.price": mult}))
            fracs.append(float(np.mean(sol.decisions.m)))
        assert all(b >= a - 1e-9 for a, b in zip(fracs, fracs[1:]))

    def test_unknown_parameter(self):
        with pytest.raises(ParameterError):
            scale_params(EIParams(), {"Rice.alpha": 2.0})

    def test_sweep_rows(self, rng):
        c = random_instance(rng, 2)
        rows = sensitivity_sweep(c, EIParams(), {"economics.c_m_impl": (0.5, 1.5)}, n_samples=4, seed=1)
        assert len(rows) == 4
        assert all(0.5 <= r.multiplier <= 1.5 for r in rows)
