import numpy as np
import pytest

from skelda import constrained, filters, model, observation


@pytest.fixture(scope="module")
def setting():
    """Spun-up truth plus a perturbed ensemble around it."""
    p = model.default_params()
    rng = np.random.default_rng(42)
    st = model.rest_state(p)
    x = p.grid()
    st.k_field[:] = 0.02 * np.sin(2 * np.pi * x / p.domain_length)
    st.q_field[:] = 0.03 * np.sin(4 * np.pi * x / p.domain_length)
    st.a_field[:] = 0.01 * np.cos(2 * np.pi * x / p.domain_length)
    for _ in range(2000):
        st = model.step(st, p, rng.standard_normal(p.n_grid))
    members = []
    for _ in range(12):
        m = st.copy()
        m.k_field += 0.01 * rng.standard_normal(p.n_grid)
        m.r_field += 0.01 * rng.standard_normal(p.n_grid)
        m.q_field += 0.01 * rng.standard_normal(p.n_grid)
        m.a_field += 0.02 * rng.standard_normal(p.n_grid)
        m.a_field = np.maximum(m.a_field, 1e-6 - p.a_bar)
        members.append(m)
    ens = filters.Ensemble(members=members, time=st.time)
    obs = observation.observe(
        st, p, observation.ObservationModel(0.0063, 20, 0.3),
        rng.standard_normal(p.n_grid),
    )
    return p, st, ens, obs


VACUOUS = constrained.ConstraintSpec(
    energy_min=0.0, energy_max=1e6, a_floor=-1e6
)


class TestConstraintSpec:
    def test_invariants(self):
        with pytest.raises(ValueError):
            constrained.ConstraintSpec(energy_min=0.1, energy_max=0.05)
        with pytest.raises(ValueError):
            constrained.ConstraintSpec(solver_tol=0.0)

    def test_feasibility_checks(self):
        p = model.default_params()
        cs = constrained.ConstraintSpec()
        st = model.rest_state(p)  # rest energy ~0.0354, inside the band
        assert cs.is_feasible(st.stacked(), p)
        st.a_field[0] = -p.a_bar  # breaks the floor
        assert not cs.is_feasible(st.stacked(), p)
        tight = constrained.ConstraintSpec(energy_min=0.05, energy_max=0.08)
        assert not tight.is_feasible(model.rest_state(p).stacked(), p)


class TestBuildCost:
    def test_zero_innovation_minimizer_is_background(self, setting):
        p, truth, ens, obs = setting
        stats = filters.ensemble_stats(ens, filters.LocalizationSpec(6.0))
        member = ens.as_matrix()[0]
        exact_obs = member[3 * p.n_grid :] + p.a_bar
        prob = constrained.build_cost(member, stats, exact_obs, 0.0063, p)
        out = constrained.solve_unconstrained(prob)
        np.testing.assert_allclose(out, member, atol=1e-9)

    def test_scalar_case_matches_kalman_half_gain(self):
        # P = R = 1, H = 1, innovation d -> x_a = x_b + d/2
        p = model.default_params(n_grid=4)
        n = p.n_grid
        member = np.zeros(4 * n)
        cov = np.zeros((4 * n, 4 * n))
        cov[3 * n, 3 * n] = 1.0  # unit prior variance in A at point 0
        stats = filters.EnsembleStats(mean=member, covariance=cov, localized_covariance=cov)
        d = 0.7
        obs = np.full(n, p.a_bar)
        obs[0] = p.a_bar + d
        prob = constrained.build_cost(member, stats, obs, 1.0, p)
        out = constrained.solve_unconstrained(prob)
        assert out[3 * n] == pytest.approx(d / 2, abs=1e-8)

    def test_gradient_at_origin_equals_linear_term(self, setting):
        p, truth, ens, obs = setting
        stats = filters.ensemble_stats(ens, filters.LocalizationSpec(6.0))
        prob = constrained.build_cost(
            ens.as_matrix()[1], stats, obs.values, 0.0063, p
        )
        z = np.zeros(4 * p.n_grid)
        # J(z) = 1/2 z^T Q z + b^T z: gradient at 0 is b
        h = 1e-7
        for idx in (0, 50, 200):
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h

            def j(zv):
                return 0.5 * zv @ prob.quadratic_term @ zv + prob.linear_term @ zv

            fd = (j(zp) - j(zm)) / (2 * h)
            assert fd == pytest.approx(prob.linear_term[idx], rel=1e-5, abs=1e-10)

    def test_sqrt_cov_reconstructs(self, setting):
        p, truth, ens, obs = setting
        stats = filters.ensemble_stats(ens, filters.LocalizationSpec(6.0))
        L = constrained.factor_localized_covariance(stats.localized_covariance)
        scale = np.mean(np.diag(stats.localized_covariance))
        np.testing.assert_allclose(
            L @ L.T, stats.localized_covariance, atol=1e-10 * max(scale, 1.0)
        )

    def test_quadratic_term_spd(self, setting):
        p, truth, ens, obs = setting
        stats = filters.ensemble_stats(ens, filters.LocalizationSpec(6.0))
        prob = constrained.build_cost(ens.as_matrix()[0], stats, obs.values, 0.0063, p)
        np.testing.assert_allclose(prob.quadratic_term, prob.quadratic_term.T, atol=1e-12)
        eigs = np.linalg.eigvalsh(prob.quadratic_term)
        assert eigs.min() >= 1.0 - 1e-10  # I + PSD


class TestMemberSolve:
    def test_feasible_unconstrained_returned_as_is(self, setting):
        p, truth, ens, obs = setting
        stats = filters.ensemble_stats(ens, filters.LocalizationSpec(6.0))
        member = ens.as_matrix()[0]
        exact_obs = member[3 * p.n_grid :] + p.a_bar  # zero innovation
        prob = constrained.build_cost(member, stats, exact_obs, 0.0063, p)
        cs = constrained.ConstraintSpec()
        out, info = constrained.constrained_analysis_member(prob, cs, p)
        assert info.fast_path
        np.testing.assert_allclose(out, constrained.solve_unconstrained(prob), atol=0)

    def test_activity_entry_pinned_exactly_with_nonnegative_multiplier(self):
        # craft a problem whose unconstrained update drags one A entry below
        # the floor: the solution pins it exactly there with multiplier >= 0
        p = model.default_params(n_grid=8)
        n = p.n_grid
        rng = np.random.default_rng(3)
        member = np.zeros(4 * n)
        member[3 * n :] = 0.05  # A anomalies
        anoms = 0.05 * rng.standard_normal((10, 4 * n))
        cov = anoms.T @ anoms / 9
        stats = filters.EnsembleStats(mean=member, covariance=cov, localized_covariance=cov)
        obs = np.full(n, p.a_bar + 0.05)
        obs[2] = -0.05  # drives A at point 2 strongly negative
        cs = constrained.ConstraintSpec(energy_min=1e-9, energy_max=1e3)
        prob = constrained.build_cost(member, stats, obs, 1e-5, p)
        unc = constrained.solve_unconstrained(prob)
        assert unc[3 * n + 2] + p.a_bar < cs.a_floor  # the bound is active
        out, info = constrained.constrained_analysis_member(prob, cs, p)
        assert not info.fast_path
        assert out[3 * n + 2] == model.anomaly_floor(cs.a_floor, p.a_bar)
        assert out[3 * n + 2] + p.a_bar >= cs.a_floor
        assert info.bound_multipliers[2] >= 0.0
        assert np.min(out[3 * n :] + p.a_bar) >= cs.a_floor

    def test_active_upper_energy_bound(self, setting):
        # tighten the upper band below the unconstrained optimum's energy:
        # the returned energy sits on the bound within solver_tol
        p, truth, ens, obs = setting
        stats = filters.ensemble_stats(ens, filters.LocalizationSpec(6.0))
        member = ens.as_matrix()[0]
        prob = constrained.build_cost(member, stats, obs.values, 0.0063, p)
        unc = constrained.solve_unconstrained(prob)
        e_unc = model.grid_mean_energy(unc, p)
        cs = constrained.ConstraintSpec(
            energy_min=0.001, energy_max=0.8 * e_unc, a_floor=1e-6
        )
        out, info = constrained.constrained_analysis_member(prob, cs, p)
        e_out = model.grid_mean_energy(out, p)
        assert e_out <= cs.energy_max + cs.solver_tol
        assert e_out == pytest.approx(cs.energy_max, abs=1e-5)
        assert info.mu_hi >= 0.0
        # complementary slackness certificate, scaled by multiplier size
        assert info.slackness <= cs.solver_tol * (1.0 + info.mu_lo + info.mu_hi)

    def test_kkt_certificate_and_monotone_objective(self, setting):
        # zero innovation keeps the unconstrained optimum at the (feasible-
        # activity) member; tightening the band below its energy forces an
        # active upper bound and a genuine constrained solve
        p, truth, ens, obs = setting
        stats = filters.ensemble_stats(ens, filters.LocalizationSpec(6.0))
        member = ens.as_matrix()[2]
        exact_obs = member[3 * p.n_grid :] + p.a_bar
        prob = constrained.build_cost(member, stats, exact_obs, 0.0063, p)
        e_unc = model.grid_mean_energy(member, p)
        cs = constrained.ConstraintSpec(energy_min=0.001, energy_max=0.9 * e_unc)
        out, info = constrained.constrained_analysis_member(
            prob, cs, p, collect_trace=True
        )
        assert info.kkt_stationarity <= 1e-6
        assert info.slackness <= cs.solver_tol * (1.0 + info.mu_lo + info.mu_hi)
        for trace in info.objective_traces:
            diffs = np.diff(trace)
            assert np.all(diffs <= 1e-12)

    def test_infeasible_band_raises_with_diagnostics(self, setting):
        p, truth, ens, obs = setting
        stats = filters.ensemble_stats(ens, filters.LocalizationSpec(6.0))
        member = ens.as_matrix()[0]
        prob = constrained.build_cost(member, stats, obs.values, 0.0063, p)
        # a band the activity floor makes unreachable: energy at the floor
        # exceeds energy_max by construction
        cs = constrained.ConstraintSpec(
            energy_min=1e-7, energy_max=2e-7, a_floor=1e-6, max_iters=8
        )
        with pytest.raises(constrained.ConstrainedSolveError) as err:
            constrained.constrained_analysis_member(prob, cs, p)
        assert err.value.best is not None
        assert err.value.energy_violation > 0


class TestEnsembleAnalysis:
    def test_vacuous_constraints_reduce_to_enkf_bitwise(self, setting):
        p, truth, ens, obs = setting
        loc = filters.LocalizationSpec(6.0)
        rng = np.random.default_rng(11)
        pert = np.sqrt(0.0063) * rng.standard_normal((ens.size, p.n_grid))
        plain = filters.enkf_analysis(
            ens, obs.values, 0.0063, loc, p, rng, perturbations=pert
        )
        out = constrained.constrained_analysis(
            ens, obs.values, 0.0063, loc, VACUOUS, p, rng, perturbations=pert
        )
        np.testing.assert_array_equal(out.as_matrix(), plain.as_matrix())

    def test_posterior_feasibility(self, setting):
        p, truth, ens, obs = setting
        loc = filters.LocalizationSpec(6.0)
        cs = constrained.ConstraintSpec()
        out = constrained.constrained_analysis(
            ens, obs.values, 0.0063, loc, cs, p, np.random.default_rng(1)
        )
        for m in out.members:
            assert np.min(m.a_field + p.a_bar) >= cs.a_floor
            e = model.total_energy(m, p).grid_mean
            assert cs.energy_min - cs.solver_tol <= e <= cs.energy_max + cs.solver_tol

    def test_failure_aggregates_member_indices(self, setting):
        p, truth, ens, obs = setting
        loc = filters.LocalizationSpec(6.0)
        cs = constrained.ConstraintSpec(
            energy_min=1e-7, energy_max=2e-7, max_iters=5
        )
        with pytest.raises(constrained.ConstrainedSolveError, match="members"):
            constrained.constrained_analysis(
                ens, obs.values, 0.0063, loc, cs, p, np.random.default_rng(2)
            )
