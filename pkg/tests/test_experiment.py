import json
from pathlib import Path

import numpy as np
import pytest

from relcp.cli import main as cli_main
from relcp.data import ResidualSet
from relcp.experiment import (
    ConfigError,
    MissingArtifactError,
    cmd_adapt_evaluate,
    cmd_calibrate_evaluate,
    cmd_report,
    cmd_simulate,
    cmd_train_forecaster,
    config_from_dict,
    config_hash,
    forecaster_hash,
    load_config,
    read_residual_csv,
    run_pipeline,
    save_config,
    verify_manifest,
    write_residual_csv,
)


def tiny_raw(out_dir, **overrides):
    raw = {
        "name": "tiny",
        "gpvar": {"n_nodes": 8, "n_communities": 2, "n_steps": 900, "seed": 0},
        "base_model": {
            "hidden_size": 8, "epochs": 2, "window": 4, "horizon": 1,
            "batch_size": 32, "patience": 3,
        },
        "relqn": {
            "hidden_size": 8, "embedding_size": 4, "mp_layers": 1, "window": 4,
            "horizon": 1, "k_neighbors": 3, "n_dummies": 3, "epochs": 2,
            "batches_per_epoch": 4, "batch_size": 32, "sparsify_frac": 1.0,
        },
        "adaptation": {"n_folds": 2, "finetune_epochs": 1},
        "method": "scp",
        "output_dir": str(out_dir),
        "seed": 0,
    }
    raw.update(overrides)
    return raw


class TestConfig:
    def test_round_trip(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run"))
        path = tmp_path / "config.json"
        save_config(config, path)
        back = load_config(path)
        assert back == config
        assert config_hash(back) == config_hash(config)

    def test_hash_ignores_output_dir(self, tmp_path):
        a = config_from_dict(tiny_raw(tmp_path / "a"))
        b = config_from_dict(tiny_raw(tmp_path / "b"))
        assert config_hash(a) == config_hash(b)
        assert forecaster_hash(a) == forecaster_hash(b)

    def test_hash_tracks_method_but_not_for_forecaster(self, tmp_path):
        a = config_from_dict(tiny_raw(tmp_path / "r", method="scp"))
        b = config_from_dict(tiny_raw(tmp_path / "r", method="nexcp"))
        assert config_hash(a) != config_hash(b)
        assert forecaster_hash(a) == forecaster_hash(b)

    def test_unknown_method_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown method"):
            config_from_dict(tiny_raw(tmp_path / "r", method="magic"))

    def test_derived_seeds(self, tmp_path):
        raw = tiny_raw(tmp_path / "r", seed=7)
        raw["gpvar"].pop("seed", None)
        config = config_from_dict(raw)
        assert config.gpvar.seed == 7
        assert config.base_model.seed == 8
        assert config.relqn.seed == 9

    def test_invalid_json_is_config_error(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(path)


class TestResidualCache:
    def test_round_trip(self, tmp_path, rng):
        res = ResidualSet(
            residuals=rng.normal(size=(12, 3)),
            target_steps=np.arange(40, 52),
            horizon=2,
        )
        path = tmp_path / "res.csv"
        write_residual_csv(res, path)
        back = read_residual_csv(path, horizon=2)
        assert np.array_equal(back.residuals, res.residuals)
        assert np.array_equal(back.target_steps, res.target_steps)
        assert back.horizon == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_residual_csv(tmp_path / "nope.csv", horizon=1)


class TestStages:
    def test_simulate_writes_dataset(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run"))
        artifacts = cmd_simulate(config)
        values = Path(artifacts["values_csv"])
        assert values.exists()
        header = values.read_text().splitlines()[0]
        assert header.split(",")[1:] == [f"node_{i}" for i in range(8)]
        assert len(values.read_text().splitlines()) == 901

    def test_simulate_deterministic_bytes(self, tmp_path):
        config_a = config_from_dict(tiny_raw(tmp_path / "a"))
        config_b = config_from_dict(tiny_raw(tmp_path / "b"))
        a = Path(cmd_simulate(config_a)["values_csv"]).read_bytes()
        b = Path(cmd_simulate(config_b)["values_csv"]).read_bytes()
        assert a == b

    def test_train_requires_dataset(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run"))
        with pytest.raises(MissingArtifactError, match="simulate"):
            cmd_train_forecaster(config)

    def test_residual_cache_covers_blocks(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run"))
        cmd_simulate(config)
        artifacts = cmd_train_forecaster(config)
        meta = json.loads(Path(artifacts["residual_meta"]).read_text())
        cal = read_residual_csv(artifacts["residuals_cal"], meta["horizon"])
        test = read_residual_csv(artifacts["residuals_test"], meta["horizon"])
        # 900 steps at 0.4/0.4/0.2 with a quarter of cal as val
        assert cal.target_steps.tolist() == list(range(450, 720))
        assert test.target_steps.tolist() == list(range(720, 900))

    def test_evaluate_requires_cache(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run"))
        cmd_simulate(config)
        with pytest.raises(MissingArtifactError, match="train-forecaster"):
            cmd_calibrate_evaluate(config)

    def test_resume_skips_training(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run"))
        cmd_simulate(config)
        artifacts = cmd_train_forecaster(config)
        stamp = Path(artifacts["checkpoint"]).stat().st_mtime_ns
        again = cmd_train_forecaster(config, resume=True)
        assert Path(again["checkpoint"]).stat().st_mtime_ns == stamp

    def test_stale_cache_rejected(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run"))
        cmd_simulate(config)
        cmd_train_forecaster(config)
        changed = config_from_dict(
            tiny_raw(tmp_path / "run", base_model={"hidden_size": 12, "epochs": 2})
        )
        with pytest.raises(MissingArtifactError, match="different configuration"):
            cmd_calibrate_evaluate(changed)

    def test_manifest_integrity(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run"))
        run_pipeline(config)
        manifest = verify_manifest(config)
        assert "calibrate_evaluate" in manifest["stages"]

    def test_full_determinism(self, tmp_path):
        # identical config + seed in two directories: byte-identical metrics
        reports = []
        for sub in ("a", "b"):
            config = config_from_dict(tiny_raw(tmp_path / sub, method="corel"))
            artifacts = run_pipeline(config)
            reports.append(Path(artifacts["report_alpha0.1"]).read_bytes())
        assert reports[0] == reports[1]

    def test_all_methods_produce_reports(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run"))
        cmd_simulate(config)
        cmd_train_forecaster(config)
        for method in ("scp", "nexcp", "seqcp", "cornn", "corel"):
            cfg = config_from_dict(tiny_raw(tmp_path / "run", method=method))
            artifacts = cmd_calibrate_evaluate(cfg)
            report = json.loads(Path(artifacts["report_alpha0.1"]).read_text())
            assert np.isfinite(report["winkler"])
        graph_csv = Path(config.output_dir) / "evaluation" / "learned_graph.csv"
        assert graph_csv.exists()

    def test_true_graph_flag(self, tmp_path):
        config = config_from_dict(
            tiny_raw(tmp_path / "run", method="corel", true_graph=True)
        )
        cmd_simulate(config)
        cmd_train_forecaster(config)
        artifacts = cmd_calibrate_evaluate(config)
        rows = Path(artifacts["report_csv"]).read_text().splitlines()
        assert any("corel_trueA" in row for row in rows)

    def test_beta_interval_mode(self, tmp_path):
        config = config_from_dict(
            tiny_raw(tmp_path / "run", method="cornn", interval_mode="beta")
        )
        cmd_simulate(config)
        cmd_train_forecaster(config)
        artifacts = cmd_calibrate_evaluate(config)
        report = json.loads(Path(artifacts["report_alpha0.1"]).read_text())
        assert np.isfinite(report["pi_width"])

    def test_multiple_alphas(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run", alphas=[0.1, 0.2]))
        cmd_simulate(config)
        cmd_train_forecaster(config)
        artifacts = cmd_calibrate_evaluate(config)
        assert "report_alpha0.1" in artifacts
        assert "report_alpha0.2" in artifacts

    def test_adapt_evaluate(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run", method="corel"))
        cmd_simulate(config)
        cmd_train_forecaster(config)
        artifacts = cmd_adapt_evaluate(config)
        adapted = json.loads(Path(artifacts["report_adapted"]).read_text())
        frozen = json.loads(Path(artifacts["report_frozen"]).read_text())
        assert np.isfinite(adapted["winkler"]) and np.isfinite(frozen["winkler"])
        folds = Path(artifacts["folds"]).read_text().splitlines()
        assert len(folds) == 3  # header + 2 folds

    def test_adapt_requires_corel(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run", method="scp"))
        with pytest.raises(ConfigError, match="corel"):
            cmd_adapt_evaluate(config)

    def test_csv_dataset_kind(self, tmp_path, rng):
        from relcp.data import TimeSeriesCollection, write_csv

        values_csv = tmp_path / "values.csv"
        write_csv(TimeSeriesCollection(values=rng.normal(size=(600, 4))), values_csv)
        config = config_from_dict(
            tiny_raw(
                tmp_path / "run",
                dataset_kind="csv",
                csv={"values_csv": str(values_csv)},
                method="cornn",
            )
        )
        cmd_simulate(config)
        cmd_train_forecaster(config)
        artifacts = cmd_calibrate_evaluate(config)
        report = json.loads(Path(artifacts["report_alpha0.1"]).read_text())
        assert np.isfinite(report["winkler"])

    def test_csv_dataset_requires_existing_file(self, tmp_path):
        config = config_from_dict(
            tiny_raw(
                tmp_path / "run",
                dataset_kind="csv",
                csv={"values_csv": str(tmp_path / "missing.csv")},
            )
        )
        with pytest.raises(MissingArtifactError):
            cmd_simulate(config)

    def test_divergent_training_maps_to_numerical_error(self, tmp_path):
        from relcp.experiment import NumericalError

        config = config_from_dict(
            tiny_raw(
                tmp_path / "run",
                base_model={"hidden_size": 8, "epochs": 2, "window": 4,
                            "horizon": 1, "learning_rate": 1e30},
            )
        )
        cmd_simulate(config)
        with pytest.raises(NumericalError, match="non-finite"):
            cmd_train_forecaster(config)

    def test_streaming_pool_flag(self, tmp_path):
        config = config_from_dict(tiny_raw(tmp_path / "run"))
        cmd_simulate(config)
        cmd_train_forecaster(config)
        static = config_from_dict(tiny_raw(tmp_path / "run", method="seqcp",
                                           seqcp_window=20))
        streaming = config_from_dict(
            tiny_raw(tmp_path / "run", method="seqcp", seqcp_window=20,
                     streaming_pool=True)
        )
        a = json.loads(Path(cmd_calibrate_evaluate(static)["report_alpha0.1"]).read_text())
        b = json.loads(
            Path(cmd_calibrate_evaluate(streaming)["report_alpha0.1"]).read_text()
        )
        assert a["pi_width"] != b["pi_width"]


class TestReport:
    def make_run(self, run_dir, seed, winkler):
        eval_dir = Path(run_dir) / "evaluation"
        eval_dir.mkdir(parents=True)
        (eval_dir / "report.csv").write_text(
            "dataset,base_model,method,alpha,delta_cov,pi_width,winkler,seed\n"
            f"gpvar,rnn,scp,0.1,0.0,1.5,{winkler},{seed}\n"
        )

    def test_mean_std_across_seeds(self, tmp_path):
        self.make_run(tmp_path / "r0", 0, 2.0)
        self.make_run(tmp_path / "r1", 1, 2.2)
        rows = cmd_report([tmp_path / "r0", tmp_path / "r1"], tmp_path / "merged.csv")
        assert len(rows) == 1
        assert rows[0]["n_seeds"] == 2
        assert rows[0]["winkler_mean"] == pytest.approx(2.1)
        assert rows[0]["winkler_std"] == pytest.approx(0.1)

    def test_single_run_zero_std(self, tmp_path):
        self.make_run(tmp_path / "r0", 0, 2.0)
        rows = cmd_report([tmp_path / "r0"], tmp_path / "merged.csv")
        assert rows[0]["winkler_std"] == 0.0

    def test_long_format(self, tmp_path):
        self.make_run(tmp_path / "r0", 0, 2.0)
        rows = cmd_report([tmp_path / "r0"], tmp_path / "long.csv", long_format=True)
        metrics = {r["metric"] for r in rows}
        assert metrics == {"delta_cov", "pi_width", "winkler"}

    def test_missing_run_dir(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            cmd_report([tmp_path / "nothing"], tmp_path / "merged.csv")


class TestCli:
    def write_config(self, tmp_path, **overrides):
        raw = tiny_raw(tmp_path / "run", **overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(raw))
        return path

    def test_simulate_then_pipeline(self, tmp_path):
        path = self.write_config(tmp_path)
        assert cli_main(["simulate", "--config", str(path)]) == 0
        assert cli_main(["train-forecaster", "--config", str(path)]) == 0
        assert cli_main(["calibrate-evaluate", "--config", str(path)]) == 0
        report = tmp_path / "run" / "evaluation" / "report_scp_alpha0.1.json"
        assert report.exists()

    def test_missing_config_exits_2(self, tmp_path):
        assert cli_main(["simulate", "--config", str(tmp_path / "none.json")]) == 2

    def test_bad_method_override_exits_2(self, tmp_path):
        path = self.write_config(tmp_path)
        code = cli_main(["calibrate-evaluate", "--config", str(path), "--method", "bogus"])
        assert code == 2

    def test_missing_artifact_exits_3(self, tmp_path):
        path = self.write_config(tmp_path)
        assert cli_main(["calibrate-evaluate", "--config", str(path)]) == 3

    def test_out_and_alpha_overrides(self, tmp_path):
        path = self.write_config(tmp_path)
        out = tmp_path / "other"
        assert cli_main(["simulate", "--config", str(path), "--out", str(out)]) == 0
        assert (out / "data" / "values.csv").exists()

    def test_report_subcommand(self, tmp_path):
        run_dir = tmp_path / "run"
        path = self.write_config(tmp_path)
        for cmd in ("simulate", "train-forecaster", "calibrate-evaluate"):
            assert cli_main([cmd, "--config", str(path)]) == 0
        out = tmp_path / "merged.csv"
        assert cli_main(["report", str(run_dir), "--out", str(out)]) == 0
        assert out.exists()
        long_out = tmp_path / "long.csv"
        assert cli_main(["report", str(run_dir), "--out", str(long_out), "--long"]) == 0
        assert "metric,value" in long_out.read_text().splitlines()[0]
