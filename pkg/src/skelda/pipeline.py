"""Twin-experiment stages: truth generation, observations, filter runs,
dataset extraction, agent training, inference, and evaluation.

Each stage reads and writes files in a run directory and records its outputs
in the manifest.  Times are nondimensional; the zero of time is the start of
the assimilation window (after spin-up).  day marks convert at 60 days per
time unit.
"""

from __future__ import annotations

import json
import time as _time
from pathlib import Path

import numpy as np

from . import agents, constrained, evaluation, filters, model, observation, storage
from .config import DAYS_PER_TIME_UNIT, ExperimentConfig, rng_for
from .filters import Ensemble, LocalizationSpec
from .storage import RunManifest


class DivergenceError(RuntimeError):
    """A filter run left the space of finite, physical states."""


def _time_index(t: float, interval: float) -> int:
    """Index of a time on the assimilation grid (robust to CSV round-trips)."""
    return int(round(float(t) / interval))


VARIABLE_ORDER = ("K", "R", "Q", "Z", "A")


def _variable_fields(vec: np.ndarray, n: int, q_tilde: float) -> dict[str, np.ndarray]:
    k, r = vec[:n], vec[n : 2 * n]
    q, a = vec[2 * n : 3 * n], vec[3 * n :]
    return {"K": k, "R": r, "Q": q, "Z": q - q_tilde * (k + r), "A": a}


def initial_anomaly_state(params: model.ModelParams) -> model.ModelState:
    """Small-amplitude planetary-wave start used to kick the stochastic model
    off its absorbing rest state."""
    x = params.grid()
    st = model.rest_state(params)
    st.k_field[:] = 0.02 * np.sin(2 * np.pi * x / params.domain_length)
    st.r_field[:] = 0.02 * np.cos(2 * np.pi * x / params.domain_length)
    st.q_field[:] = 0.03 * np.sin(4 * np.pi * x / params.domain_length)
    st.a_field[:] = 0.01 * np.cos(2 * np.pi * x / params.domain_length)
    return st


def simulate_truth(config: ExperimentConfig, out_dir) -> dict:
    """Spin up and record the truth at every assimilation time.

    Writes truth.csv (decimal) and truth.dnce (exact float64 companion for
    restarts and downstream stages).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = config.model_params()
    manifest = RunManifest(out_dir, config)
    rng = rng_for(config.seed, "truth")
    with manifest.stage("simulate_truth") as stage:
        st = initial_anomaly_state(params)
        for _ in range(config.spinup_steps):
            st = model.step(st, params, rng.standard_normal(params.n_grid))
        st.time = 0.0
        times = [0.0]
        states = [st.stacked()]
        for k in range(1, config.n_assim_steps + 1):
            for _ in range(config.obs_interval_steps):
                st = model.step(st, params, rng.standard_normal(params.n_grid))
            # canonical assimilation-grid time, immune to accumulated rounding
            times.append(k * config.assim_interval)
            states.append(st.stacked())
        times = np.array(times)
        states = np.array(states)
        csv_path = out_dir / "truth.csv"
        storage.write_state_series(csv_path, times, states, params.n_grid)
        bin_path = out_dir / "truth.dnce"
        storage.write_binary(
            bin_path,
            {
                "kind": "truth_series",
                "forcing": config.forcing,
                "source_hash": storage.sha256_of_bytes(params.s_theta.tobytes()),
            },
            {"times": times, "states": states},
        )
        stage.add_output(csv_path)
        stage.add_output(bin_path)
    return {"times": times, "states": states}


def load_truth(truth_dir) -> tuple[np.ndarray, np.ndarray]:
    meta, arrays = storage.read_binary(Path(truth_dir) / "truth.dnce")
    if meta.get("kind") != "truth_series":
        raise storage.StorageError("truth.dnce does not hold a truth series")
    return arrays["times"], arrays["states"]


def generate_observations(config: ExperimentConfig, out_dir, truth_dir=None) -> dict:
    """Lognormal observations of total activity at assimilation times 1..T;
    log sigma is calibrated against the truth-activity climatology."""
    out_dir = Path(out_dir)
    truth_dir = Path(truth_dir) if truth_dir else out_dir
    params = config.model_params()
    times, states = load_truth(truth_dir)
    manifest = RunManifest(out_dir, config)
    rng = rng_for(config.seed, "observe")
    with manifest.stage("observe") as stage:
        n = params.n_grid
        climatology = states[:, 3 * n :] + params.a_bar
        log_sigma = observation.calibrate_log_sigma(
            climatology.ravel(), config.obs_variance
        )
        obs_model = observation.ObservationModel(
            noise_variance=config.obs_variance,
            interval_steps=config.obs_interval_steps,
            log_sigma=log_sigma,
        )
        obs_times = times[1:]
        values = []
        for k in range(1, times.size):
            truth_state = model.state_from_vector(states[k], n, times[k])
            obs = observation.observe(
                truth_state, params, obs_model, rng.standard_normal(n)
            )
            values.append(obs.values)
        values = np.array(values)
        csv_path = out_dir / "observations.csv"
        storage.write_observation_series(csv_path, obs_times, values)
        stage.add_output(csv_path)
        manifest.record_metric("observe", "log_sigma", log_sigma)
    return {"times": obs_times, "values": values, "log_sigma": log_sigma}


def load_observations(obs_dir, n_grid: int):
    return storage.read_observation_series(
        Path(obs_dir) / "observations.csv", n_grid
    )


def initial_ensemble(config: ExperimentConfig, truth0: np.ndarray) -> Ensemble:
    """Truth at time zero plus per-member perturbations (activity floored)."""
    params = config.model_params()
    n = params.n_grid
    members = []
    floor = model.anomaly_floor(config.a_floor, params.a_bar)
    for i in range(config.ensemble_size):
        rng = rng_for(config.seed, "ensemble_init", i)
        vec = truth0.copy()
        vec[: 3 * n] += 0.01 * rng.standard_normal(3 * n)
        vec[3 * n :] += 0.02 * rng.standard_normal(n)
        vec[3 * n :] = np.maximum(vec[3 * n :], floor)
        members.append(model.state_from_vector(vec, n, 0.0))
    return Ensemble(members=members, time=0.0)


def run_filter(config: ExperimentConfig, out_dir, method: str, truth_dir=None) -> dict:
    """Cycle the chosen filter along the observation stream.

    Writes the per-time analysis mean and spread, per-member energies, the
    full analysis archive, and (for cenkf) the training dataset.  Divergence
    is reported through DivergenceError after flushing partial outputs.
    """
    if method not in ("enkf", "eakf", "cenkf"):
        raise ValueError(f"unknown filter method {method!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    truth_dir = Path(truth_dir) if truth_dir else out_dir
    params = config.model_params()
    n = params.n_grid
    times, states = load_truth(truth_dir)
    obs_times, obs_values = load_observations(truth_dir, n)
    loc = LocalizationSpec(cutoff=config.loc_cutoff)
    constraints = constrained.ConstraintSpec(
        energy_min=config.energy_min,
        energy_max=config.energy_max,
        a_floor=config.a_floor,
        solver_tol=config.solver_tol,
        max_iters=config.solver_max_iters,
    )
    manifest = RunManifest(out_dir, config)
    ensemble = initial_ensemble(config, states[0])
    member_rngs = [
        rng_for(config.seed, "forecast", i) for i in range(config.ensemble_size)
    ]
    analysis_rng = rng_for(config.seed, "analysis")

    archive = [ensemble.as_matrix()]
    archive_times = [0.0]
    energies: list[list[float]] = []
    analysis_seconds: list[float] = []
    negative_flags: list[tuple[float, int]] = []
    diverged: str | None = None

    with manifest.stage(f"run_filter_{method}") as stage:
        for k in range(1, times.size):
            try:
                ensemble = filters.forecast(
                    ensemble, params, config.obs_interval_steps, member_rngs
                )
                if config.inflation != 1.0:
                    mat = ensemble.as_matrix()
                    mean = mat.mean(axis=0)
                    mat = mean + config.inflation * (mat - mean)
                    ensemble = Ensemble.from_matrix(mat, n, ensemble.time)
                perturbations = np.sqrt(config.obs_variance) * (
                    analysis_rng.standard_normal((ensemble.size, n))
                )
                t0 = _time.perf_counter()
                if method == "eakf":
                    ensemble = filters.eakf_analysis(
                        ensemble, obs_values[k - 1], config.obs_variance, loc, params
                    )
                elif method == "enkf":
                    ensemble = filters.enkf_analysis(
                        ensemble, obs_values[k - 1], config.obs_variance, loc,
                        params, analysis_rng, perturbations=perturbations,
                    )
                else:
                    ensemble = constrained.constrained_analysis(
                        ensemble, obs_values[k - 1], config.obs_variance, loc,
                        constraints, params, analysis_rng,
                        perturbations=perturbations,
                    )
                analysis_seconds.append(_time.perf_counter() - t0)
            except (
                model.IntegrationFailure,
                filters.FilterDivergence,
                constrained.ConstrainedSolveError,
            ) as err:
                diverged = f"t={times[k]:.4f}: {err}"
                break
            mat = ensemble.as_matrix()
            activity = mat[:, 3 * n :] + params.a_bar
            if np.min(activity) <= 0.0:
                member = int(np.argwhere(activity <= 0.0)[0][0])
                negative_flags.append((float(times[k]), member))
            archive.append(mat)
            archive_times.append(float(times[k]))
            row = []
            for i in range(ensemble.size):
                act = mat[i, 3 * n :] + params.a_bar
                if np.min(act) > 0.0:
                    row.append(model.grid_mean_energy(mat[i], params))
                else:
                    row.append(float("nan"))
            energies.append(row)

        archive_arr = np.array(archive)
        arch_path = out_dir / f"analysis_{method}.dnce"
        storage.write_binary(
            arch_path,
            {"kind": "analysis_archive", "method": method},
            {"times": np.array(archive_times), "members": archive_arr},
        )
        stage.add_output(arch_path)

        mean_rows = []
        for t_idx, t in enumerate(archive_times):
            mat = archive_arr[t_idx]
            mean_vec = mat.mean(axis=0)
            std_vec = mat.std(axis=0, ddof=1)
            mfields = _variable_fields(mean_vec, n, params.q_tilde)
            z_members = (
                mat[:, 2 * n : 3 * n]
                - params.q_tilde * (mat[:, :n] + mat[:, n : 2 * n])
            )
            sfields = {
                "K": std_vec[:n],
                "R": std_vec[n : 2 * n],
                "Q": std_vec[2 * n : 3 * n],
                "Z": z_members.std(axis=0, ddof=1),
                "A": std_vec[3 * n :],
            }
            for var in VARIABLE_ORDER:
                for j in range(n):
                    mean_rows.append([
                        f"{t:.17g}", j, var,
                        f"{mfields[var][j]:.17g}", f"{sfields[var][j]:.17g}",
                    ])
        mean_path = out_dir / f"analysis_mean_{method}.csv"
        storage.write_csv(mean_path, storage.MEAN_HEADER, mean_rows)
        stage.add_output(mean_path)

        energy_rows = []
        for t_idx, row in enumerate(energies):
            for i, e in enumerate(row):
                energy_rows.append([f"{archive_times[t_idx + 1]:.10g}", i, f"{e:.17g}"])
        energy_path = out_dir / f"member_energies_{method}.csv"
        storage.write_csv(energy_path, storage.ENERGY_HEADER, energy_rows)
        stage.add_output(energy_path)

        if method == "cenkf" and diverged is None:
            dataset_path = out_dir / "dataset.csv"
            datasets = build_datasets(config, archive_times, archive_arr, obs_times, obs_values)
            storage.write_dataset(dataset_path, datasets)
            stage.add_output(dataset_path)

        manifest.record_metric(
            f"run_filter_{method}", "mean_analysis_seconds",
            float(np.mean(analysis_seconds)) if analysis_seconds else float("nan"),
        )
        manifest.record_metric(
            f"run_filter_{method}", "negative_activity_flags", len(negative_flags)
        )
        if negative_flags:
            manifest.record_metric(
                f"run_filter_{method}", "first_negative_activity",
                {"time": negative_flags[0][0], "member": negative_flags[0][1]},
            )
        if diverged:
            manifest.record_metric(f"run_filter_{method}", "divergence", diverged)

    if diverged:
        manifest.mark_stage(f"run_filter_{method}", f"diverged: {diverged}")
        raise DivergenceError(
            f"{method} run diverged ({diverged}); partial outputs flushed to {out_dir}"
        )
    return {
        "times": np.array(archive_times),
        "archive": archive_arr,
        "energies": np.array(energies),
        "negative_flags": negative_flags,
        "mean_analysis_seconds": float(np.mean(analysis_seconds)),
    }


def build_datasets(
    config: ExperimentConfig,
    archive_times,
    archive: np.ndarray,
    obs_times: np.ndarray,
    obs_values: np.ndarray,
) -> list[agents.MemberDataset]:
    """Training records from a filter archive: three-analysis history plus
    the observation at the target time, per member."""
    params = config.model_params()
    spec = agents.FeatureSpec.for_localization(config.loc_cutoff)
    obs_by_idx = {
        _time_index(t, config.assim_interval): obs_values[i]
        for i, t in enumerate(obs_times)
    }
    obs_list = []
    for t in archive_times:
        key = _time_index(t, config.assim_interval)
        obs_list.append(obs_by_idx.get(key, np.zeros(params.n_grid)))
    datasets = []
    n_members = archive.shape[1]
    for i in range(n_members):
        series = [archive[k, i] for k in range(len(archive_times))]
        datasets.append(
            agents.dataset_from_analyses(
                i, series, list(archive_times), obs_list, params, spec
            )
        )
    return datasets


def load_archive(run_dir, method: str):
    meta, arrays = storage.read_binary(Path(run_dir) / f"analysis_{method}.dnce")
    if meta.get("kind") != "analysis_archive":
        raise storage.StorageError("not an analysis archive")
    return arrays["times"], arrays["members"]


def make_dataset(config: ExperimentConfig, out_dir, run_dir=None, method: str = "cenkf"):
    """Rebuild the training dataset from an existing filter archive."""
    out_dir = Path(out_dir)
    run_dir = Path(run_dir) if run_dir else out_dir
    params = config.model_params()
    times, archive = load_archive(run_dir, method)
    obs_times, obs_values = load_observations(run_dir, params.n_grid)
    manifest = RunManifest(out_dir, config)
    with manifest.stage("make_dataset") as stage:
        datasets = build_datasets(config, list(times), archive, obs_times, obs_values)
        path = out_dir / "dataset.csv"
        storage.write_dataset(path, datasets)
        stage.add_output(path)
    return datasets


def train_rl(
    config: ExperimentConfig,
    out_dir,
    dataset_path=None,
    no_constraint: bool = False,
    resume: bool = False,
) -> dict:
    """Train one agent per member on the constrained-filter dataset.

    Writes per-agent checkpoints plus lambda and loss traces (one row per
    agent and epoch).  With resume=True, existing checkpoints continue
    training and their traces extend without reset.
    """
    out_dir = Path(out_dir)
    dataset_path = Path(dataset_path) if dataset_path else out_dir / "dataset.csv"
    params = config.model_params()
    datasets = storage.read_dataset(dataset_path)
    datasets = datasets[: config.agent_count]
    manifest = RunManifest(out_dir, config)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    spec = agents.FeatureSpec.for_localization(config.loc_cutoff)
    cfg_hash = storage.config_hash(config)
    train_config = agents.TrainConfig(
        epochs=config.epochs,
        rollout_epochs=config.rollout_epochs,
        batch_times=config.batch_times,
        learning_rate=config.learning_rate,
        lr_decay_epochs=config.lr_decay_epochs,
        feature_noise=config.feature_noise,
        amplitude_noise=config.amplitude_noise,
        predict_increment=config.predict_increment,
        hidden=tuple(config.hidden),
        spread_weight=config.spread_weight,
        lambda_init=config.lambda_init,
        alpha_lambda=config.alpha_lambda,
        beta=config.beta,
        energy_band=(config.energy_min, config.energy_max),
        enforce_constraints=not no_constraint,
        seed=config.seed,
    )
    with manifest.stage("train_rl") as stage:
        trained = []
        if resume:
            normalizer = None
            bounds = None
            for ds in datasets:
                path = ckpt_dir / f"agent_{ds.member:03d}.dnce"
                start, normalizer, bounds, spec = storage.load_checkpoint(path, cfg_hash)
                epoch_offset = len(start.lambda_trace)
                trained.append(
                    agents.train_agent(
                        ds, normalizer, bounds, params, train_config,
                        start=start, epoch_offset=epoch_offset,
                        feature_spec=spec,
                    )
                )
        else:
            for stale in ckpt_dir.glob("agent_*.dnce"):
                stale.unlink()
            normalizer = agents.fit_normalizer(datasets)
            bounds = agents.ActionBounds.from_normalizer(
                normalizer, config.a_floor, params.a_bar
            )
            for ds in datasets:
                trained.append(
                    agents.train_agent(
                        ds, normalizer, bounds, params, train_config,
                        feature_spec=spec,
                    )
                )
        for agent in trained:
            path = ckpt_dir / f"agent_{agent.member:03d}.dnce"
            storage.save_checkpoint(path, agent, normalizer, bounds, spec, cfg_hash)
            stage.add_output(path)
        lam_rows, loss_rows = [], []
        for agent in trained:
            for epoch, lam in enumerate(agent.lambda_trace):
                lam_rows.append([agent.member, epoch, f"{lam:.17g}"])
            for epoch, loss in enumerate(agent.loss_trace):
                loss_rows.append([agent.member, epoch, f"{loss:.17g}"])
        lam_path = out_dir / "lambda_traces.csv"
        loss_path = out_dir / "loss_traces.csv"
        storage.write_csv(lam_path, storage.LAMBDA_HEADER, lam_rows)
        storage.write_csv(loss_path, storage.LOSS_HEADER, loss_rows)
        stage.add_output(lam_path)
        stage.add_output(loss_path)
    return {"agents": trained, "normalizer": normalizer, "bounds": bounds}


def infer_rl(
    config: ExperimentConfig,
    out_dir,
    checkpoint_dir=None,
    filter_dir=None,
    method: str = "cenkf",
) -> dict:
    """Roll the trained agents along the observation stream.

    Histories start from the filter archive's first three analyses; outputs
    are the per-time mean and +-2 sigma bands per variable plus per-agent
    energies.
    """
    out_dir = Path(out_dir)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else out_dir / "checkpoints"
    filter_dir = Path(filter_dir) if filter_dir else out_dir
    params = config.model_params()
    n = params.n_grid
    cfg_hash = storage.config_hash(config)
    paths = sorted(checkpoint_dir.glob("agent_*.dnce"))
    if not paths:
        raise storage.StorageError(f"no checkpoints under {checkpoint_dir}")
    loaded = [storage.load_checkpoint(p, cfg_hash) for p in paths]
    agent_list = [item[0] for item in loaded]
    normalizer, bounds, spec = loaded[0][1], loaded[0][2], loaded[0][3]

    arch_times, archive = load_archive(filter_dir, method)
    obs_times, obs_values = load_observations(filter_dir, n)
    histories = []
    for agent in agent_list:
        i = agent.member
        histories.append(tuple(
            agents.fields_to_kzra(archive[k, i], n, params.q_tilde) for k in range(3)
        ))
    stream_times = [float(t) for t in arch_times[3:]]
    by_idx = {
        _time_index(t, config.assim_interval): obs_values[j]
        for j, t in enumerate(obs_times)
    }
    stream_obs = [by_idx[_time_index(t, config.assim_interval)] for t in stream_times]

    manifest = RunManifest(out_dir, config)
    with manifest.stage("infer_rl") as stage:
        result = agents.infer(
            agent_list, histories, stream_obs, stream_times, normalizer,
            bounds, params, spec, config.assim_interval,
        )
        rows = []
        for t_idx, t in enumerate(result.times):
            fields = {
                "K": 0, "R": 1, "Z": 2, "A": 3,
            }
            for var in VARIABLE_ORDER:
                if var == "Q":
                    mean = result.mean[t_idx, :, 2] + params.q_tilde * (
                        result.mean[t_idx, :, 0] + result.mean[t_idx, :, 1]
                    )
                    # band from member-level reconstruction
                    q_members = (
                        result.member_fields[t_idx, :, :, 2]
                        + params.q_tilde
                        * (
                            result.member_fields[t_idx, :, :, 0]
                            + result.member_fields[t_idx, :, :, 1]
                        )
                    )
                    sigma = q_members.std(axis=0)
                    lo, hi = mean - 2 * sigma, mean + 2 * sigma
                else:
                    c = fields[var]
                    mean = result.mean[t_idx, :, c]
                    lo = result.lower[t_idx, :, c]
                    hi = result.upper[t_idx, :, c]
                for j in range(n):
                    rows.append([
                        f"{t:.17g}", j, var,
                        f"{mean[j]:.17g}", f"{lo[j]:.17g}", f"{hi[j]:.17g}",
                    ])
        traj_path = out_dir / "trajectory_rl.csv"
        storage.write_csv(traj_path, storage.TRAJECTORY_HEADER, rows)
        stage.add_output(traj_path)

        energy_rows = []
        for t_idx, t in enumerate(result.times):
            for i in range(len(agent_list)):
                energy_rows.append([
                    f"{t:.17g}", i, f"{result.member_energies[t_idx, i]:.17g}"
                ])
        energy_path = out_dir / "agent_energies.csv"
        storage.write_csv(energy_path, storage.ENERGY_HEADER, energy_rows)
        stage.add_output(energy_path)
        manifest.record_metric(
            "infer_rl", "mean_step_seconds", float(np.mean(result.step_seconds))
        )
    return {"result": result, "times": result.times}


def _mjo_of_vec(vec: np.ndarray, params: model.ModelParams, t: float) -> np.ndarray:
    return model.mjo_diagnostic(
        model.state_from_vector(vec, params.n_grid, t), params
    )


def read_trajectory_means(path, n_grid: int):
    """(times, {variable: (T, n_grid)}) from a mean or trajectory CSV."""
    header, rows = storage.read_csv(path)
    if header is None or header[:3] != ["time", "grid_index", "variable"]:
        raise storage.StorageError(f"{path}: unexpected schema {header}")
    times: list[float] = []
    data: dict[str, dict[float, np.ndarray]] = {}
    for row in rows:
        t = float(row[0])
        j = int(row[1])
        var = row[2]
        val = float(row[3])
        store = data.setdefault(var, {})
        if t not in store:
            store[t] = np.zeros(n_grid)
            if var == "K":
                times.append(t)
        store[t][j] = val
    times = np.array(sorted(times))
    out = {
        var: np.array([store[t] for t in times]) for var, store in data.items()
    }
    return times, out


def evaluate(
    config: ExperimentConfig,
    out_dir,
    truth_dir,
    estimates: dict[str, Path],
    energies: dict[str, Path] | None = None,
) -> dict:
    """Skill scores of each estimate against the truth.

    estimates maps a method name to its mean/trajectory CSV.  Writes one
    skill series per method and variable (K, R, Q, A plus the projected
    intraseasonal mode) and a summary table at the configured day marks.
    energies optionally maps names to member-energy CSVs whose band
    occupancy is reported in the summary.
    """
    out_dir = Path(out_dir)
    params = config.model_params()
    n = params.n_grid
    truth_times, truth_states = load_truth(truth_dir)
    truth_fields = {
        var: np.array([
            _variable_fields(vec, n, params.q_tilde)[var] for vec in truth_states
        ])
        for var in VARIABLE_ORDER
    }
    truth_fields["MJO"] = np.array([
        _mjo_of_vec(vec, params, t) for vec, t in zip(truth_states, truth_times)
    ])
    manifest = RunManifest(out_dir, config)
    summary: dict = {"eval_days": list(config.eval_days), "methods": {}}
    with manifest.stage("evaluate") as stage:
        for name, path in estimates.items():
            est_times, est = read_trajectory_means(path, n)
            time_index = []
            for t in est_times:
                matches = np.where(np.abs(truth_times - t) < 1e-9)[0]
                if matches.size == 0:
                    raise storage.StorageError(
                        f"estimate {name}: time {t} missing from the truth series"
                    )
                time_index.append(int(matches[0]))
            time_index = np.array(time_index)
            est["MJO"] = np.zeros((est_times.size, n))
            for i, t in enumerate(est_times):
                q = est["Q"][i] if "Q" in est else est["Z"][i] + params.q_tilde * (
                    est["K"][i] + est["R"][i]
                )
                vec = np.concatenate([est["K"][i], est["R"][i], q, est["A"][i]])
                est["MJO"][i] = _mjo_of_vec(vec, params, t)
            method_summary = {}
            for var in ("K", "R", "Q", "A", "MJO"):
                series = evaluation.skill_series(
                    est_times,
                    truth_fields[var][time_index],
                    est[var],
                )
                path_out = out_dir / f"skill_{name}_{var}.csv"
                storage.write_csv(
                    path_out,
                    storage.SKILL_HEADER,
                    [
                        [f"{t:.17g}", f"{r:.10g}", f"{c:.10g}"]
                        for t, r, c in zip(series.times, series.rmse, series.corr)
                    ],
                )
                stage.add_output(path_out)
                if var == "MJO":
                    at_days = {}
                    for day in config.eval_days:
                        t_target = day / DAYS_PER_TIME_UNIT
                        # accept the nearest assimilation-grid time within
                        # half a cycle of the requested day mark
                        hits = np.where(
                            np.abs(series.times - t_target)
                            < 0.51 * config.assim_interval
                        )[0]
                        if hits.size == 0:
                            raise storage.StorageError(
                                f"evaluation day {day} (t={t_target}) absent "
                                f"from estimate {name}"
                            )
                        at_days[str(day)] = {
                            "rmse": float(series.rmse[hits[0]]),
                            "corr": float(series.corr[hits[0]]),
                        }
                    method_summary["mjo_at_days"] = at_days
                method_summary[f"mean_rmse_{var}"] = float(np.mean(series.rmse))
                method_summary[f"mean_corr_{var}"] = float(np.mean(series.corr))
            summary["methods"][name] = method_summary
        if energies:
            summary["energy_occupancy"] = {
                name: energy_occupancy_of_csv(
                    path, (config.energy_min, config.energy_max)
                )
                for name, path in energies.items()
            }
        summary_path = out_dir / "skill_summary.json"
        summary_path.write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        stage.add_output(summary_path)
    return summary


def energy_occupancy_of_csv(path, band: tuple[float, float]) -> float:
    _, rows = storage.read_csv(path, storage.ENERGY_HEADER)
    energies = np.array([float(r[2]) for r in rows])
    return evaluation.energy_occupancy(energies, band)


def export_plots_data(config: ExperimentConfig, out_dir, sources: list[Path]) -> Path:
    """Collect the CSV files the plotting package consumes into plots_data/
    with an index of their roles."""
    out_dir = Path(out_dir)
    dest = out_dir / "plots_data"
    dest.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out_dir, config)
    index = {}
    with manifest.stage("export_plots_data") as stage:
        for src in sources:
            src = Path(src)
            if not src.exists():
                raise storage.StorageError(f"missing export source {src}")
            target = dest / src.name
            target.write_bytes(src.read_bytes())
            index[src.name] = storage.sha256_of(target)
            stage.add_output(target)
        idx_path = dest / "index.json"
        idx_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        stage.add_output(idx_path)
    return dest
