"""Exit codes, config plumbing, export formats, and the workflow round trip."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from m2malign import cli
from m2malign.checks import ScenarioResult
from m2malign.errors import ContractError

TINY_CONFIG = {
    "data": {
        "n_subjects": 6,
        "grid": [4, 4, 4, 2],
        "k_functional": 2,
        "k_structural": 2,
        "noise_sigma": 0.05,
        "tabular_dim": 3,
        "seed": 3,
    },
    "model": {"encoder": {"patch": [2, 2, 2, 1], "stage_channels": [8]}},
    "train": {"total_epochs": 2, "warmup_epochs": 1, "folds": 2, "batch_size": 3},
}


def write_config(tmp_path, payload=None):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload if payload is not None else TINY_CONFIG))
    return str(path)


class TestPercentileMask:
    def test_p95_on_100_distinct_scores_keeps_exactly_5(self):
        scores = np.arange(100, dtype=np.float64).reshape(10, 10) / 100.0
        mask = cli.percentile_mask(scores, 95.0)
        assert mask.sum() == 5
        assert mask.reshape(-1)[-5:].all()

    def test_uniform_scores_keep_everything(self):
        mask = cli.percentile_mask(np.full((4, 4), 0.0625), 95.0)
        assert mask.all()

    def test_ties_at_the_threshold_are_kept(self):
        scores = np.array([0.1, 0.3, 0.3, 0.3, 0.2])
        # k = ceil(5 * 0.4) = 2, threshold is the 2nd largest (0.3): all
        # three tied entries stay in
        mask = cli.percentile_mask(scores, 60.0)
        assert mask.tolist() == [False, True, True, True, False]

    @pytest.mark.parametrize("p", [0.0, 100.0, -3.0, 120.0])
    def test_out_of_range_percentile_is_rejected(self, p):
        with pytest.raises(ContractError):
            cli.percentile_mask(np.ones(4), p)


class TestAttentionCsv:
    def test_header_has_no_kept_column_without_percentile(self, tmp_path):
        path = tmp_path / "a.csv"
        cli.write_attention_csv(path, np.full((2, 3), 1.0 / 3.0))
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["query_idx", "key_idx", "score"]
        assert len(rows) == 1 + 6

    def test_kept_column_and_count_with_percentile(self, tmp_path):
        path = tmp_path / "a.csv"
        matrix = np.arange(20, dtype=np.float64).reshape(4, 5)
        kept = cli.write_attention_csv(path, matrix, percentile=90.0)
        assert kept == 2
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        flagged = [(int(r["query_idx"]), int(r["key_idx"])) for r in rows if r["kept"] == "1"]
        assert flagged == [(3, 3), (3, 4)]

    def test_scores_roundtrip_exactly_through_repr(self, tmp_path):
        rng = np.random.default_rng(5)
        matrix = rng.random((3, 4))
        path = tmp_path / "a.csv"
        cli.write_attention_csv(path, matrix)
        with open(path, newline="") as fh:
            back = np.array([float(r["score"]) for r in csv.DictReader(fh)]).reshape(3, 4)
        assert (back == matrix).all()


class TestTopTimeIndices:
    def test_ranks_by_mean_over_queries(self):
        matrix = np.array([[0.1, 0.7, 0.2], [0.3, 0.5, 0.2]])
        assert cli.top_time_indices(matrix, 2) == [1, 0]

    def test_ties_fall_back_to_position_order(self):
        matrix = np.array([[0.25, 0.25, 0.25, 0.25]])
        assert cli.top_time_indices(matrix, 3) == [0, 1, 2]

    def test_k_larger_than_width_returns_all(self):
        assert cli.top_time_indices(np.array([[0.6, 0.4]]), 5) == [0, 1]


class TestExitCodes:
    def test_no_args_prints_usage_and_exits_1(self, capsys):
        assert cli.main([]) == 1
        assert "usage:" in capsys.readouterr().err

    def test_unknown_flag_exits_1(self, capsys):
        assert cli.main(["cv", "--frobnicate"]) == 1
        assert "usage:" in capsys.readouterr().err

    def test_unknown_subcommand_exits_1(self):
        assert cli.main(["frobnicate"]) == 1

    def test_config_error_exits_1(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"train": {"lr_max": -1.0}})
        assert cli.main(["cv", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
        assert "lr_max" in capsys.readouterr().err

    def test_unknown_config_section_exits_1(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"trian": {}})
        assert cli.main(["cv", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
        assert "trian" in capsys.readouterr().err

    def test_unparseable_config_json_exits_1(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        assert cli.main(["cv", "--config", str(path), "--out", str(tmp_path / "run")]) == 1

    def test_missing_run_dir_exits_2(self, tmp_path):
        assert cli.main(["metrics", "--run", str(tmp_path / "nope")]) == 2

    def test_module_entry_point_reports_usage(self):
        proc = subprocess.run(
            [sys.executable, "-m", "m2malign"], capture_output=True, text=True
        )
        assert proc.returncode == 1
        assert "usage:" in proc.stderr


class TestGradcheckCommand:
    @staticmethod
    def fake_results(errs):
        return [
            ScenarioResult(name=f"s{i}", max_rel_err=e, n_coords=4, worst_param="p", seconds=0.0)
            for i, e in enumerate(errs)
        ]

    def test_all_passing_scenarios_exit_0(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "run_scenarios", lambda *a, **k: self.fake_results([1e-7, 2e-6]))
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "worst overall" in out

    def test_one_failing_scenario_exits_1(self, monkeypatch, capsys):
        monkeypatch.setattr(cli, "run_scenarios", lambda *a, **k: self.fake_results([1e-7, 2e-3]))
        assert cli.main(["gradcheck"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_tolerance_flag_is_respected(self, monkeypatch):
        monkeypatch.setattr(cli, "run_scenarios", lambda *a, **k: self.fake_results([2e-3]))
        assert cli.main(["gradcheck", "--tol", "0.01"]) == 0


class TestConfigPlumbing:
    def test_volume_shape_and_tabular_width_default_from_data(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out_dir = tmp_path / "run"
        assert cli.main(["train", "--config", cfg, "--out", str(out_dir)]) == 0
        resolved = json.loads((out_dir / "config.json").read_text())
        assert resolved["model"]["volume_shape"] == [4, 4, 4, 2]
        assert resolved["model"]["n_tabular"] == 3
        assert resolved["data"]["n_subjects"] == 6
        # the resolved config is echoed before any work happens
        assert '"volume_shape"' in capsys.readouterr().out

    def test_unknown_model_field_is_rejected(self, tmp_path, capsys):
        payload = dict(TINY_CONFIG, model={"head_count": 7})
        cfg = write_config(tmp_path, payload)
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
        assert "head_count" in capsys.readouterr().err


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    """One tiny gen-data + train + cv round trip shared by the export tests."""
    root = tmp_path_factory.mktemp("workflow")
    cfg = write_config(root)
    data_dir = root / "data"
    train_dir = root / "train_run"
    cv_dir = root / "cv_run"
    assert cli.main(["gen-data", "--config", cfg, "--out", str(data_dir)]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(train_dir)]) == 0
    assert cli.main(["cv", "--config", cfg, "--out", str(cv_dir)]) == 0
    return {"root": root, "config": cfg, "data": data_dir, "train": train_dir, "cv": cv_dir}


class TestWorkflowArtifacts:
    def test_gen_data_writes_a_loadable_manifest(self, workflow):
        manifest = json.loads((workflow["data"] / "manifest.json").read_text())
        assert manifest["n_subjects"] == 6
        assert (workflow["data"] / manifest["subjects"][0]["fmri"]).is_file()

    def test_train_writes_checkpoint_losses_and_figure(self, workflow):
        run = workflow["train"]
        assert (run / "checkpoint" / "manifest.json").is_file()
        assert (run / "loss_curves.png").stat().st_size > 0
        with open(run / "losses.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 and rows[0]["epoch"] == "0"

    def test_cv_writes_report_scores_and_figures(self, workflow):
        run = workflow["cv"]
        report = json.loads((run / "metrics.json").read_text())
        assert set(report) == {"folds", "mean", "std"}
        assert len(report["folds"]) == 2
        assert (run / "fold_metrics.png").stat().st_size > 0
        assert (run / "fold_0" / "scores.csv").is_file()
        assert (run / "fold_1" / "loss_curves.png").is_file()

    def test_train_on_saved_dataset_matches_generated(self, workflow, tmp_path):
        """--data DIR quantizes to float32, so histories stay close, not equal."""
        out = tmp_path / "from_disk"
        rc = cli.main(
            ["train", "--config", workflow["config"], "--data", str(workflow["data"]),
             "--out", str(out)]
        )
        assert rc == 0
        with open(out / "losses.csv", newline="") as fh:
            disk = [float(r["ce"]) for r in csv.DictReader(fh)]
        with open(workflow["train"] / "losses.csv", newline="") as fh:
            mem = [float(r["ce"]) for r in csv.DictReader(fh)]
        assert disk == pytest.approx(mem, rel=1e-3)


class TestExports:
    def test_attention_export_rows_cover_the_matrix(self, workflow, tmp_path):
        out = tmp_path / "attn.csv"
        rc = cli.main(
            ["export-attn", "--run", str(workflow["cv"]), "--fold", "1",
             "--source", "joint-spatial", "--out", str(out)]
        )
        assert rc == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        # 8 volume patches per modality + 1 tabular token, squared
        assert len(rows) == 17 * 17
        assert "kept" not in rows[0]
        assert out.with_suffix(".png").is_file()
        by_query = {}
        for r in rows:
            by_query.setdefault(int(r["query_idx"]), 0.0)
            by_query[int(r["query_idx"])] += float(r["score"])
        assert all(abs(total - 1.0) < 1e-9 for total in by_query.values())

    def test_percentile_keeps_the_documented_count(self, workflow, tmp_path, capsys):
        out = tmp_path / "attn.csv"
        rc = cli.main(
            ["export-attn", "--run", str(workflow["train"]), "--source", "refine-fmri",
             "--percentile", "95", "--no-figure", "--out", str(out)]
        )
        assert rc == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        kept = sum(int(r["kept"]) for r in rows)
        # 8 x 17 = 136 scores: ceil(136 * 0.05) = 7 before ties
        assert kept >= 7
        assert f"kept {kept} of 136" in capsys.readouterr().out

    def test_temporal_source_reports_top_time_indices(self, workflow, tmp_path, capsys):
        out = tmp_path / "attn.csv"
        rc = cli.main(
            ["export-attn", "--run", str(workflow["train"]), "--source", "temporal",
             "--no-figure", "--out", str(out)]
        )
        assert rc == 0
        assert "time indices by mean attention" in capsys.readouterr().out

    def test_missing_attention_source_is_a_config_error(self, workflow, tmp_path, capsys):
        payload = dict(TINY_CONFIG, model={
            "encoder": {"patch": [2, 2, 2, 1], "stage_channels": [8]},
            "temporal_self_fusion": False,
        })
        cfg_path = workflow["root"] / "no_temporal.json"
        cfg_path.write_text(json.dumps(payload))
        run = tmp_path / "run"
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(run)]) == 0
        rc = cli.main(
            ["export-attn", "--run", str(run), "--source", "temporal",
             "--no-figure", "--out", str(tmp_path / "x.csv")]
        )
        assert rc == 1
        assert "temporal" in capsys.readouterr().err

    def test_embedding_export_shape_and_labels(self, workflow, tmp_path):
        out = tmp_path / "embed.csv"
        rc = cli.main(["export-embed", "--run", str(workflow["train"]), "--out", str(out)])
        assert rc == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        # three modality streams, 8 channels each
        assert sum(k.startswith("e") for k in rows[0]) == 24
        assert {r["label"] for r in rows} == {"0", "1"}


class TestMetricsCommand:
    def test_recomputed_report_is_byte_identical_to_the_run(self, workflow, tmp_path, capsys):
        out = tmp_path / "recomputed.json"
        rc = cli.main(["metrics", "--run", str(workflow["cv"]), "--out", str(out)])
        assert rc == 0
        assert out.read_bytes() == (workflow["cv"] / "metrics.json").read_bytes()
        assert "pr_auc" in capsys.readouterr().out

    def test_run_without_scores_is_a_contract_error(self, workflow, tmp_path, capsys):
        assert cli.main(["metrics", "--run", str(workflow["train"])]) == 1
        assert "score" in capsys.readouterr().err


class TestAlignAnalyze:
    def test_writes_recall_losses_and_figures(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "align"
        assert cli.main(["align-analyze", "--config", cfg, "--out", str(out)]) == 0
        assert "mean recall@1" in capsys.readouterr().out
        with open(out / "recall.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        assert all(0.0 <= float(r["recall_at_1"]) <= 1.0 for r in rows)
        assert (out / "similarity_subject0.png").stat().st_size > 0
        assert (out / "loss_curves.png").stat().st_size > 0
        with open(out / "losses.csv", newline="") as fh:
            loss_rows = list(csv.DictReader(fh))
        assert loss_rows and loss_rows[0]["ce"] == ""
