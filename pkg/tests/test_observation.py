import numpy as np
import pytest

from skelda import model, observation


@pytest.fixture
def params():
    return model.default_params()


def make_obs_model(log_sigma=0.3, variance=0.0063, interval=20):
    return observation.ObservationModel(
        noise_variance=variance, interval_steps=interval, log_sigma=log_sigma
    )


class TestObserve:
    def test_zero_spread_reproduces_activity(self, params):
        st = model.rest_state(params)
        st.a_field[:] = np.linspace(0.0, 0.3, params.n_grid)
        om = make_obs_model(log_sigma=0.0)
        obs = observation.observe(st, params, om, np.zeros(params.n_grid))
        np.testing.assert_array_equal(obs.values, st.a_field + params.a_bar)

    def test_zero_noise_draw_gives_mean_shift(self, params):
        st = model.rest_state(params)
        om = make_obs_model(log_sigma=0.3)
        obs = observation.observe(st, params, om, np.zeros(params.n_grid))
        np.testing.assert_allclose(
            obs.values, (st.a_field + params.a_bar) * np.exp(-0.045), rtol=1e-12
        )

    def test_positivity_and_unbiasedness(self, params):
        st = model.rest_state(params)
        st.a_field[:] = 0.2
        om = make_obs_model(log_sigma=0.4)
        rng = np.random.default_rng(0)
        draws = np.array([
            observation.observe(st, params, om, rng.standard_normal(params.n_grid)).values
            for _ in range(4000)
        ])
        assert np.all(draws > 0.0)
        ratio = draws / (st.a_field + params.a_bar)
        assert np.mean(ratio) == pytest.approx(1.0, abs=5e-3)

    def test_observation_carries_truth_time(self, params):
        st = model.rest_state(params, time=3.25)
        om = make_obs_model()
        obs = observation.observe(st, params, om, np.zeros(params.n_grid))
        assert obs.time == 3.25


class TestCalibration:
    def test_small_sigma_expansion(self):
        # constant climatology c: error variance ~ c^2 sigma^2
        c = 0.5
        target = 1e-4
        sig = observation.calibrate_log_sigma(np.full(1000, c), target)
        assert sig == pytest.approx(np.sqrt(target) / c, rel=1e-2)

    def test_doubling_scale_halves_sigma(self):
        clim = np.full(100, 0.2)
        target = 1e-5
        s1 = observation.calibrate_log_sigma(clim, target)
        s2 = observation.calibrate_log_sigma(2 * clim, target)
        assert s2 == pytest.approx(s1 / 2, rel=1e-2)

    def test_zero_target_rejected(self):
        with pytest.raises(observation.CalibrationError):
            observation.calibrate_log_sigma(np.ones(10), 0.0)

    def test_unattainable_target_rejected(self):
        with pytest.raises(observation.CalibrationError):
            observation.calibrate_log_sigma(np.full(10, 1e-6), 1e6)

    def test_monte_carlo_oracle_matches_target(self):
        # independent MC check of the calibrated variance on a lognormal-ish
        # climatology at the standard target 0.0063
        rng = np.random.default_rng(123)
        clim = np.abs(rng.lognormal(mean=np.log(0.15), sigma=0.8, size=2000)) + 1e-3
        target = 0.0063
        sig = observation.calibrate_log_sigma(clim, target)
        draws = rng.standard_normal((100_000,))
        # error for one climatology value per draw, cycling through clim
        vals = np.tile(clim, 50)
        xi = rng.standard_normal(vals.size)
        err = vals * (np.exp(sig * xi - 0.5 * sig**2) - 1.0)
        assert np.var(err) == pytest.approx(target, rel=0.05)

    def test_invalid_climatology_rejected(self):
        with pytest.raises(ValueError):
            observation.calibrate_log_sigma(np.array([]), 0.01)
        with pytest.raises(ValueError):
            observation.calibrate_log_sigma(np.array([0.1, -0.2]), 0.01)


class TestOperator:
    def test_zero_state_gives_background(self, params):
        vec = np.zeros(4 * params.n_grid)
        out = observation.observation_operator(vec, params)
        np.testing.assert_allclose(out, params.a_bar)

    def test_k_perturbation_invisible(self, params):
        vec = np.zeros(4 * params.n_grid)
        vec[5] = 1.0  # K block
        out = observation.observation_operator(vec, params)
        np.testing.assert_allclose(out, params.a_bar)

    def test_reproduces_truth_activity(self, params):
        rng = np.random.default_rng(1)
        st = model.ModelState(*(rng.normal(size=params.n_grid) for _ in range(4)))
        out = observation.observation_operator(st.stacked(), params)
        np.testing.assert_array_equal(out, st.a_field + params.a_bar)

    def test_matrix_matches_operator_linear_part(self, params):
        rng = np.random.default_rng(2)
        vec = rng.normal(size=4 * params.n_grid)
        H = observation.observation_matrix(params)
        np.testing.assert_allclose(
            H @ vec + params.a_bar, observation.observation_operator(vec, params)
        )


class TestSchedule:
    def test_interval_arithmetic(self):
        # dt = 0.001 with one time unit = 2 months -> 1.44 h per step;
        # observations every 28.8 h -> 20 steps
        hours_per_unit = 2 * 30 * 24
        dt = 0.001
        step_hours = dt * hours_per_unit
        assert step_hours == pytest.approx(1.44)
        assert 28.8 / step_hours == pytest.approx(20.0)

    def test_model_invariants(self):
        with pytest.raises(ValueError):
            make_obs_model(variance=0.0)
        with pytest.raises(ValueError):
            make_obs_model(interval=0)
