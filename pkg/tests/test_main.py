import json

import pytest

from keyreg.main import EXIT_CONFIG, EXIT_DATASET, EXIT_OK, EXIT_PARTIAL, build_parser, main
from keyreg.trainer import DescriptorTrainer


class TestParser:
    def test_subcommand_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_unset_flags_are_none(self):
        args = build_parser().parse_args(["evaluate", "--dataset", "x"])
        assert args.budget is None
        assert args.write_overlays is None
        assert args.grid is None

    def test_grid_without_detectors(self):
        args = build_parser().parse_args(["evaluate", "--dataset", "x", "--grid", "--budgets", "100", "unlimited"])
        assert args.grid == []
        assert args.budgets == ["100", "unlimited"]


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, fire_root):
        config = tmp_path / "keyreg.json"
        config.write_text(json.dumps({"detecter": "harris"}))
        code = main(["evaluate", "--dataset", str(fire_root), "--config", str(config), "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG

    def test_bad_budget(self, tmp_path, fire_root):
        code = main(["calibrate", "--dataset", str(fire_root), "--budget", "plenty", "--out", str(tmp_path)])
        assert code == EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        code = main(["evaluate", "--dataset", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")])
        assert code == EXIT_DATASET

    def test_dataset_without_control_points(self, tmp_path):
        (tmp_path / "empty").mkdir()
        code = main(["evaluate", "--dataset", str(tmp_path / "empty"), "--out", str(tmp_path / "o")])
        assert code == EXIT_DATASET

    def test_synth_size_check(self, tmp_path):
        assert main(["synth", "--size", "8", "--out", str(tmp_path)]) == EXIT_CONFIG


class TestCommands:
    def test_synth_fire(self, tmp_path):
        out = tmp_path / "ds"
        assert main(["synth", "--count", "1", "--size", "96", "--out", str(out)]) == EXIT_OK
        assert len(list((out / "Ground Truth").glob("control_points_*_1_2.txt"))) == 3
        assert (out / "keyreg.log").exists()

    def test_synth_train(self, tmp_path):
        out = tmp_path / "train"
        assert main(["synth", "--kind", "train", "--count", "2", "--size", "64", "--out", str(out)]) == EXIT_OK
        assert (out / "img001.png").exists()

    def test_calibrate(self, tmp_path, fire_root):
        out = tmp_path / "cal"
        code = main(["calibrate", "--dataset", str(fire_root), "--detector", "fast", "--budget", "100",
                     "--working-size", "160", "--out", str(out)])
        assert code == EXIT_OK
        data = json.loads((out / "calibration.json").read_text())
        assert data["detector"] == "fast@100"
        assert len(data["calibration"]["per_image_counts"]) == 12

    def test_evaluate_and_report(self, tmp_path, fire_root, capsys):
        run = tmp_path / "run"
        code = main(["evaluate", "--dataset", str(fire_root), "--detector", "harris", "--budget", "100",
                     "--working-size", "160", "--out", str(run)])
        assert code in (EXIT_OK, EXIT_PARTIAL)
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert set(printed) == {"FIRE", "A", "P", "S", "Avg", "W.Avg"}

        table = tmp_path / "table"
        assert main(["report", str(run), "--out", str(table)]) == EXIT_OK
        rows = json.loads((table / "table.json").read_text())
        assert rows[0]["detector"] == "harris"
        assert rows[0]["FIRE"] == pytest.approx(printed["FIRE"])

    def test_grid_exit_code_ignores_earlier_runs(self, tmp_path, fire_root):
        out = tmp_path / "grid"
        stale = out / "dog_100"
        stale.mkdir(parents=True)
        (stale / "summary.json").write_text(json.dumps({"failed_pairs": 6, "metadata": {"failed_pairs": 6}}))
        code = main(["evaluate", "--dataset", str(fire_root), "--grid", "vessel:skeleton", "--working-size", "160",
                     "--out", str(out)])
        current = json.loads((out / "vessel_skeleton" / "summary.json").read_text())["metadata"]["failed_pairs"]
        assert code == (EXIT_PARTIAL if current else EXIT_OK)

    def test_report_missing_summary(self, tmp_path):
        assert main(["report", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == EXIT_DATASET

    def test_evaluate_from_manifest(self, tmp_path, fire_root):
        first = tmp_path / "first"
        main(["evaluate", "--dataset", str(fire_root), "--budget", "100", "--working-size", "160", "--out", str(first)])
        second = tmp_path / "second"
        code = main(["evaluate", "--manifest", str(first / "manifest.json"), "--budget", "100",
                     "--working-size", "160", "--out", str(second)])
        assert code in (EXIT_OK, EXIT_PARTIAL)
        assert (first / "report.csv").read_text() == (second / "report.csv").read_text()

    def test_register(self, tmp_path, fire_root, capsys):
        images = fire_root / "Images"
        code = main(["register", "--fixed", str(images / "S02_1.png"), "--moving", str(images / "S02_2.png"),
                     "--budget", "100", "--working-size", "160", "--out", str(tmp_path)])
        assert code in (EXIT_OK, EXIT_PARTIAL)
        assert (tmp_path / "pair.json").exists()
        if code == EXIT_OK:
            assert len(json.loads(capsys.readouterr().out.strip().splitlines()[-1])) == 3

    def test_train(self, tmp_path, train_root):
        out = tmp_path / "model"
        code = main(["train", "--dataset", str(train_root), "--preset", "desk", "--epochs", "1",
                     "--image-size", "64", "--out", str(out)])
        assert code == EXIT_OK
        assert (out / "checkpoint_latest.ukdc").exists()
        assert (out / "train_log.csv").exists()
        assert json.loads((out / "train_manifest.json").read_text())["train_config"]["epochs"] == 1

    def test_train_paper_preset_manifest(self, tmp_path, train_root, monkeypatch):
        def skip_training(trainer, data, params=None):
            trainer.epoch_losses = [1.0]
            return params

        monkeypatch.setattr(DescriptorTrainer, "train", skip_training)
        out = tmp_path / "model"
        assert main(["train", "--dataset", str(train_root), "--preset", "paper", "--out", str(out)]) == EXIT_OK
        cfg = json.loads((out / "train_manifest.json").read_text())["train_config"]
        assert (cfg["views"], cfg["keypoints_per_image"], cfg["fastap_bins"]) == (9, 1460, 10)
        assert (cfg["learning_rate"], cfg["epochs"]) == (1e-4, 1000)
