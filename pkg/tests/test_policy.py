from dataclasses import replace

import numpy as np
import pytest

from agriscape.ec import ECConfig, build_problem, reposition
from agriscape.ei import EIDecision, evaluate_decisions, plot_economics, solve_ei
from agriscape.landscape import GeneratorConfig, generate_configuration
from agriscape.params import CROPS, EIParams
from agriscape.policy import (COST_ITEMS, BOConfig, MandateInfeasibleError, PolicyCase, PolicyError, PolicyParams,
                              Targets, apply_policy, evaluate_policy, farm_response, policy_bounds, policy_cost)
from conftest import random_instance, square_config

PARAMS = EIParams()
ANNUITY = 12.462210342539986


def premiums(**by_crop):
    return tuple(by_crop.get(c, 1.0) for c in CROPS)


def two_plot():
    # canola touching a wetland, corn one plot further away
    return square_config([(0, "ag", "Canola/rapeseed", 2.3, 0, 0), (0, "hab", "Wetland", 0, 1, 0),
                          (0, "ag", "Corn", 8.0, 3, 0)])


class TestParams:
    def test_bounds_enforced(self):
        with pytest.raises(PolicyError):
            PolicyParams(p_ha=151.0)
        with pytest.raises(PolicyError):
            PolicyParams(premiums=premiums(Oats=0.9))
        with pytest.raises(PolicyError):
            PolicyParams(premiums=(1.0,) * 5)

    def test_vector_round_trip(self):
        rng = np.random.default_rng(0)
        b = policy_bounds()
        assert b.shape == (13, 2)
        v = b[:, 0] + rng.random(13) * (b[:, 1] - b[:, 0])
        theta = PolicyParams.from_vector(v)
        assert np.array_equal(theta.to_vector(), v)
        assert PolicyParams.from_dict(theta.to_dict()) == theta

    def test_unknown_key(self):
        with pytest.raises(PolicyError):
            PolicyParams.from_dict({"s_est_x": 0.1})


class TestApplyPolicy:
    def test_identity_unchanged(self):
        c = two_plot()
        terms = apply_policy(c, PARAMS, PolicyParams.identity())
        assert terms.economics == plot_economics(c, PARAMS)
        assert terms.mandate is None

    def test_premium_and_maintenance(self):
        c = two_plot()
        theta = PolicyParams(s_maint_h=0.5, premiums=premiums(**{"Canola/rapeseed": 1.1}))
        base, new = plot_economics(c, PARAMS), apply_policy(c, PARAMS, theta).economics
        assert base[0].price == 1100.0
        assert new[0].price == pytest.approx(1210.0, rel=1e-15)
        assert base[0].c_h_maint == 70.0 and new[0].c_h_maint == 35.0
        assert new[2].price == base[2].price

    def test_establishment_only_on_qualifying(self):
        c = two_plot()
        terms = apply_policy(c, PARAMS, PolicyParams(s_est_m=0.5, m_frac=0.3))
        base = plot_economics(c, PARAMS)
        assert terms.qualifying == frozenset({0})
        assert terms.economics[0].c_m_impl == 0.5 * base[0].c_m_impl
        assert terms.economics[2].c_m_impl == base[2].c_m_impl
        assert terms.economics[0].m_lower == 0.3 and terms.economics[2].m_lower == 0.0

    def test_mandate_infeasible(self):
        c = two_plot()  # 2 ha of cropland
        with pytest.raises(MandateInfeasibleError, match="farm 0"):
            apply_policy(c, PARAMS, PolicyParams(m_area=3.0))


class TestFarmResponse:
    def test_identity_is_baseline(self):
        c = generate_configuration(GeneratorConfig(), 4)
        a = farm_response(c, PARAMS, PolicyParams.identity())
        b = solve_ei(c, PARAMS)
        assert np.array_equal(a.decisions.m, b.decisions.m)
        assert np.array_equal(a.decisions.h, b.decisions.h)
        assert a.plot_npvs == b.plot_npvs

    def test_margin_mandate(self):
        sol = farm_response(two_plot(), PARAMS, PolicyParams(m_frac=0.3))
        assert sol.decisions.of(0)[0] >= 0.3

    def test_area_mandate_met(self):
        c = two_plot()
        sol = farm_response(c, PARAMS, PolicyParams(m_area=1.5))
        converted = sum(c.plots[p].area * sol.decisions.of(p)[1] for p in c.agricultural_ids)
        assert converted >= 1.5 - 1e-9

    def test_premiums_weakly_raise_intervention(self):
        c = two_plot()

        def area(theta):
            d = farm_response(c, PARAMS, theta).decisions
            return sum(c.plots[p].area * (d.of(p)[0] + d.of(p)[1]) for p in c.agricultural_ids)

        levels = [area(PolicyParams(premiums=(e,) * len(CROPS))) for e in (1.0, 1.1, 1.2, 1.3)]
        assert all(b >= a - 1e-6 for a, b in zip(levels, levels[1:]))


class TestPolicyCost:
    def test_identity_zero(self):
        c = generate_configuration(GeneratorConfig(), 4)
        sol = solve_ei(c, PARAMS)
        cost = policy_cost(c, PARAMS, sol, PolicyParams.identity())
        assert cost.total == 0.0

    def test_habitat_payment_annuity(self):
        c = square_config([(0, "ag", "Oats", 3.0, 0, 0)])  # exactly 1 ha
        sol = evaluate_decisions(c, PARAMS, EIDecision.from_mapping(c, {0: (0.0, 1.0)}))
        cost = policy_cost(c, PARAMS, sol, PolicyParams(p_ha=100.0))
        assert cost.total == pytest.approx(100 * ANNUITY, rel=1e-12)
        assert cost.total == pytest.approx(1246.22, abs=5e-3)
        assert cost.items[0]["habitat_payment"] == cost.total

    def test_items_sum_and_nonnegative(self):
        rng = np.random.default_rng(3)
        b = policy_bounds()
        for seed in range(5):
            c = random_instance(rng, 3, 1, n_farms=2)
            theta = PolicyParams.from_vector(b[:, 0] + rng.random(13) * (b[:, 1] - b[:, 0]))
            theta = replace(theta, m_area=0.0)
            sol = farm_response(c, PARAMS, theta)
            cost = policy_cost(c, PARAMS, sol, theta)
            for f, items in cost.items.items():
                assert set(items) == set(COST_ITEMS)
                assert all(v >= 0 for v in items.values())
                assert cost.farm_totals[f] == pytest.approx(sum(items.values()), rel=1e-12)
            assert cost.total == pytest.approx(sum(cost.farm_totals.values()), rel=1e-12)

    def test_additive_in_instruments(self):
        c = two_plot()
        sol = evaluate_decisions(c, PARAMS, EIDecision.from_mapping(c, {0: (0.4, 0.2), 2: (0.7, 0.1)}))
        a = PolicyParams(s_est_m=0.2, s_maint_h=0.3)
        b = PolicyParams(p_ha=50.0, premiums=premiums(Corn=1.2))
        both = PolicyParams(s_est_m=0.2, s_maint_h=0.3, p_ha=50.0, premiums=premiums(Corn=1.2))
        total = policy_cost(c, PARAMS, sol, a).total + policy_cost(c, PARAMS, sol, b).total
        assert policy_cost(c, PARAMS, sol, both).total == pytest.approx(total, rel=1e-12)

    def test_premium_switch(self):
        c = two_plot()
        sol = solve_ei(c, PARAMS)
        theta = PolicyParams(premiums=premiums(Corn=1.2))
        assert policy_cost(c, PARAMS, sol, theta).total > 0
        assert policy_cost(c, PARAMS, sol, theta, include_premium=False).total == 0


def _case(config, target_shift=0.0):
    ec = ECConfig(seed=1)
    ei = solve_ei(config, PARAMS)
    placed = reposition(build_problem(config, PARAMS, ec, ei), ei)
    target = Targets(config.config_id, placed.z + target_shift, dict(placed.farm_npvs))
    return PolicyCase.prepare(config, PARAMS, ec, target), placed


class TestEvaluatePolicy:
    def test_deviation_formula(self):
        case, _ = _case(two_plot(), target_shift=100.0)
        ev = evaluate_policy(PolicyParams.identity(), [case], BOConfig(n_samples=1))
        assert ev.objective == pytest.approx(100.0, rel=1e-9)

    def test_zero_deviation(self):
        case, _ = _case(two_plot())
        assert evaluate_policy(PolicyParams.identity(), [case], BOConfig()).objective == 0.0

    def test_identity_fixed_point(self):
        c = generate_configuration(GeneratorConfig(), 8)
        case, placed = _case(c)
        ev = evaluate_policy(PolicyParams.identity(), [case], BOConfig())
        (r,) = ev.configs
        assert r.z == placed.z
        assert r.farm_npvs == placed.farm_npvs
        assert r.fractions == placed.fractions
        assert r.cost == 0.0

    def test_budget_penalty_straddle(self):
        case, _ = _case(two_plot(), target_shift=7.0)
        theta = PolicyParams(p_ha=120.0, s_maint_m=0.4)
        cost = evaluate_policy(theta, [case], BOConfig()).mean_cost
        assert cost > 0
        under = evaluate_policy(theta, [case], BOConfig(b_max=cost))
        over = evaluate_policy(theta, [case], BOConfig(b_max=np.nextafter(cost, 0)))
        assert under.objective != 1e15 and not under.over_budget
        assert over.objective == 1e15 and over.over_budget

    def test_penalty_example(self):
        # B_max rescaled so the realised mean cost plays the role of 6e5 against 5e5
        case, _ = _case(generate_configuration(GeneratorConfig(), 8))
        theta = PolicyParams(premiums=(1.2,) * len(CROPS))
        cost = evaluate_policy(theta, [case], BOConfig()).mean_cost
        assert cost > 0
        ev = evaluate_policy(theta, [case], BOConfig(b_max=5e5 * cost / 6e5))
        assert ev.objective == 1e15

    def test_mandate_failure_penalized(self):
        case, _ = _case(two_plot())
        ev = evaluate_policy(PolicyParams(m_area=5.0), [case], BOConfig())
        assert ev.configs[0].error is not None
        assert ev.penalized
        assert ev.objective == BOConfig().penalty

    def test_empty_cases(self):
        with pytest.raises(ValueError):
            evaluate_policy(PolicyParams(), [], BOConfig())

    def test_boconfig_validation(self):
        with pytest.raises(ValueError):
            BOConfig(n_init=100, n_calls=100)
        with pytest.raises(TypeError):
            BOConfig.from_dict({"nope": 1})
