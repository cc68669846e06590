import json

import numpy as np
import pytest

from skelda import cli, pipeline, storage
from skelda.config import ExperimentConfig, config_text


def tiny_config(**kw):
    base = dict(
        spinup_days=12.0,
        run_days=18.0,
        ensemble_size=6,
        n_agents=3,
        epochs=3,
        rollout_epochs=2,
        batch_times=4,
        eval_days=(6.0, 12.0),
        seed=31,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    """One miniature end-to-end pipeline shared by the read-only tests."""
    out = tmp_path_factory.mktemp("mini")
    cfg = tiny_config()
    pipeline.simulate_truth(cfg, out)
    pipeline.generate_observations(cfg, out)
    pipeline.run_filter(cfg, out, "cenkf")
    pipeline.train_rl(cfg, out)
    pipeline.infer_rl(cfg, out)
    return cfg, out


class TestTruthStage:
    def test_determinism_identical_hashes(self, tmp_path):
        cfg = tiny_config()
        h = []
        for sub in ("a", "b"):
            d = tmp_path / sub
            pipeline.simulate_truth(cfg, d)
            h.append(storage.sha256_of(d / "truth.csv"))
        assert h[0] == h[1]

    def test_zero_steps_run_header_only(self, tmp_path):
        cfg = tiny_config(run_days=0.3)  # rounds to zero assimilation steps
        assert cfg.n_assim_steps == 0
        pipeline.simulate_truth(cfg, tmp_path)
        times, states = pipeline.load_truth(tmp_path)
        assert times.shape == (1,)

    def test_warm_pool_records_forcing_and_source_hash(self, tmp_path):
        cfg = tiny_config(forcing="warm_pool", run_days=1.2, spinup_days=0.0)
        pipeline.simulate_truth(cfg, tmp_path)
        meta, _ = storage.read_binary(tmp_path / "truth.dnce")
        assert meta["forcing"] == "warm_pool"
        assert len(meta["source_hash"]) == 64

    def test_exact_restart_companion(self, tmp_path):
        cfg = tiny_config()
        pipeline.simulate_truth(cfg, tmp_path)
        times, states = pipeline.load_truth(tmp_path)
        t2, s2 = storage.read_state_series(tmp_path / "truth.csv", cfg.n_grid)
        np.testing.assert_array_equal(states, s2)  # CSV written at full precision


class TestFilterStage:
    def test_cenkf_members_all_feasible(self, mini_run):
        cfg, out = mini_run
        _, rows = storage.read_csv(
            out / "member_energies_cenkf.csv", storage.ENERGY_HEADER
        )
        energies = np.array([float(r[2]) for r in rows])
        assert np.all(energies >= cfg.energy_min - cfg.solver_tol)
        assert np.all(energies <= cfg.energy_max + cfg.solver_tol)
        _, archive = pipeline.load_archive(out, "cenkf")
        n = cfg.n_grid
        assert np.min(archive[:, :, 3 * n :] + cfg.a_bar) >= cfg.a_floor

    def test_vacuous_cenkf_reproduces_enkf_bitwise(self, tmp_path):
        cfg = tiny_config(run_days=6.0)
        pipeline.simulate_truth(cfg, tmp_path)
        pipeline.generate_observations(cfg, tmp_path)
        vac = ExperimentConfig(**{
            **cfg.as_dict(),
            "hidden": tuple(cfg.hidden),
            "eval_days": tuple(cfg.eval_days),
            "energy_min": 1e-9,
            "energy_max": 1e6,
            "a_floor": -1e6,
        })
        d1 = tmp_path / "enkf"
        d2 = tmp_path / "cenkf"
        pipeline.run_filter(cfg, d1, "enkf", truth_dir=tmp_path)
        pipeline.run_filter(vac, d2, "cenkf", truth_dir=tmp_path)
        _, a1 = pipeline.load_archive(d1, "enkf")
        _, a2 = pipeline.load_archive(d2, "cenkf")
        np.testing.assert_array_equal(a1, a2)

    def test_dataset_flows_into_training(self, mini_run):
        cfg, out = mini_run
        datasets = storage.read_dataset(out / "dataset.csv")
        assert len(datasets) == cfg.ensemble_size
        # records exist for every target index from 3 on
        assert datasets[0].times.shape[0] == cfg.n_assim_steps + 1 - 3

    def test_make_dataset_matches_run_filter_output(self, mini_run, tmp_path):
        cfg, out = mini_run
        rebuilt_dir = tmp_path / "rebuild"
        rebuilt_dir.mkdir()
        # copy inputs the builder needs
        for name in ("analysis_cenkf.dnce", "observations.csv", "truth.dnce"):
            (rebuilt_dir / name).write_bytes((out / name).read_bytes())
        pipeline.make_dataset(cfg, rebuilt_dir, method="cenkf")
        assert storage.sha256_of(rebuilt_dir / "dataset.csv") == storage.sha256_of(
            out / "dataset.csv"
        )


class TestTrainInferStages:
    def test_checkpoints_and_traces(self, mini_run):
        cfg, out = mini_run
        ckpts = sorted((out / "checkpoints").glob("agent_*.dnce"))
        assert len(ckpts) == cfg.n_agents
        _, rows = storage.read_csv(out / "lambda_traces.csv", storage.LAMBDA_HEADER)
        # one row per (agent, epoch), rollout refinement epochs included
        total = cfg.epochs + cfg.rollout_epochs
        assert len(rows) == cfg.n_agents * total

    def test_resume_extends_traces_without_reset(self, mini_run, tmp_path):
        cfg, out = mini_run
        rdir = tmp_path / "resume"
        rdir.mkdir()
        (rdir / "dataset.csv").write_bytes((out / "dataset.csv").read_bytes())
        pipeline.train_rl(cfg, rdir)
        first = storage.load_checkpoint(
            rdir / "checkpoints" / "agent_000.dnce"
        )[0].lambda_trace
        pipeline.train_rl(cfg, rdir, resume=True)
        second = storage.load_checkpoint(
            rdir / "checkpoints" / "agent_000.dnce"
        )[0].lambda_trace
        total = cfg.epochs + cfg.rollout_epochs
        assert len(second) == 2 * total
        assert second[:total] == first

    def test_inference_outputs_and_positivity(self, mini_run):
        cfg, out = mini_run
        header, rows = storage.read_csv(
            out / "trajectory_rl.csv", storage.TRAJECTORY_HEADER
        )
        a_rows = [r for r in rows if r[2] == "A"]
        assert a_rows
        for r in a_rows:
            assert float(r[3]) + cfg.a_bar >= cfg.a_floor

    def test_inference_deterministic_hash(self, mini_run, tmp_path):
        cfg, out = mini_run
        d2 = tmp_path / "again"
        d2.mkdir()
        for name in ("observations.csv", "analysis_cenkf.dnce", "truth.dnce"):
            (d2 / name).write_bytes((out / name).read_bytes())
        pipeline.infer_rl(cfg, d2, checkpoint_dir=out / "checkpoints", filter_dir=d2)
        assert storage.sha256_of(d2 / "trajectory_rl.csv") == storage.sha256_of(
            out / "trajectory_rl.csv"
        )

    def test_checkpoint_config_mismatch_rejected(self, mini_run, tmp_path):
        cfg, out = mini_run
        other = ExperimentConfig(**{
            **cfg.as_dict(),
            "hidden": tuple(cfg.hidden),
            "eval_days": tuple(cfg.eval_days),
            "seed": 999,
        })
        with pytest.raises(storage.StorageError, match="configuration"):
            pipeline.infer_rl(
                other, tmp_path, checkpoint_dir=out / "checkpoints", filter_dir=out
            )


class TestEvaluateStage:
    def test_perfect_estimate_scores(self, mini_run, tmp_path):
        cfg, out = mini_run
        # reuse truth as its own estimate via the mean CSV schema
        times, states = pipeline.load_truth(out)
        n = cfg.n_grid
        rows = []
        params = cfg.model_params()
        for t, vec in zip(times, states):
            fields = pipeline._variable_fields(vec, n, params.q_tilde)
            for var in pipeline.VARIABLE_ORDER:
                for j in range(n):
                    rows.append([f"{t:.17g}", j, var, f"{fields[var][j]:.17g}", "0"])
        est = tmp_path / "perfect.csv"
        storage.write_csv(est, storage.MEAN_HEADER, rows)
        summary = pipeline.evaluate(cfg, tmp_path, out, {"perfect": est})
        s = summary["methods"]["perfect"]
        assert s["mean_rmse_MJO"] == pytest.approx(0.0, abs=1e-9)
        assert s["mean_corr_MJO"] == pytest.approx(1.0, abs=1e-9)

    def test_missing_time_named_in_error(self, mini_run, tmp_path):
        cfg, out = mini_run
        rows = [["99.5", 0, "K", "0.1", "0"]]
        est = tmp_path / "badtimes.csv"
        storage.write_csv(est, storage.MEAN_HEADER, rows)
        with pytest.raises(storage.StorageError, match="99.5"):
            pipeline.evaluate(cfg, tmp_path, out, {"bad": est})


class TestManifest:
    def test_outputs_hashed_and_config_changes_manifest(self, mini_run, tmp_path):
        cfg, out = mini_run
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_hash"] == storage.config_hash(cfg)
        truth_entry = manifest["stages"]["simulate_truth"]
        assert truth_entry["status"] == "complete"
        assert truth_entry["outputs"]["truth.csv"] == storage.sha256_of(out / "truth.csv")
        other = tiny_config(seed=32)
        assert storage.config_hash(other) != storage.config_hash(cfg)

    def test_incomplete_marker_on_failure(self, tmp_path):
        cfg = tiny_config()
        manifest = storage.RunManifest(tmp_path, cfg)
        with pytest.raises(RuntimeError):
            with manifest.stage("doomed"):
                raise RuntimeError("boom")
        data = json.loads((tmp_path / "manifest.json").read_text())
        assert data["stages"]["doomed"]["status"].startswith("failed")


class TestCli:
    def test_full_pipeline_via_cli(self, tmp_path):
        cfg = tiny_config(run_days=9.0, eval_days=(3.6, 7.2))
        cfg_path = tmp_path / "exp.cfg"
        cfg_path.write_text(config_text(cfg))
        out = tmp_path / "run"
        base = ["--config", str(cfg_path), "--out", str(out)]
        assert cli.main(["simulate-truth", *base]) == 0
        assert cli.main(["observe", *base]) == 0
        assert cli.main(["run-filter", *base, "--method", "cenkf"]) == 0
        assert cli.main(["train-rl", *base]) == 0
        assert cli.main(["infer-rl", *base]) == 0
        assert cli.main([
            "evaluate", *base, "--truth", str(out),
            "--estimate", f"cenkf={out/'analysis_mean_cenkf.csv'}",
            "--estimate", f"rl={out/'trajectory_rl.csv'}",
            "--energies", f"cenkf={out/'member_energies_cenkf.csv'}",
        ]) == 0
        summary = json.loads((out / "skill_summary.json").read_text())
        assert summary["energy_occupancy"]["cenkf"] == 1.0
        assert cli.main([
            "export-plots-data", *base,
            str(out / "trajectory_rl.csv"),
            str(out / "member_energies_cenkf.csv"),
        ]) == 0
        assert (out / "plots_data" / "trajectory_rl.csv").exists()
        assert (out / "skill_summary.json").exists()

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("q_tilde = 2.0\n")
        code = cli.main([
            "simulate-truth", "--config", str(bad), "--out", str(tmp_path / "x")
        ])
        assert code == cli.EXIT_CONFIG

    def test_io_error_exit_code(self, tmp_path):
        code = cli.main([
            "observe", "--out", str(tmp_path), "--truth", str(tmp_path / "nope")
        ])
        assert code == cli.EXIT_IO
