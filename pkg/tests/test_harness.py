import csv
import json
from dataclasses import replace

import jsonschema
import numpy as np
import pytest

from srcpath import cli
from srcpath.config import ConfigError, build_world, read_config
from srcpath.harness import RESULT_COLUMNS, ExperimentSpec, ablation_grid, load_schema, run_experiment
from srcpath.training import TrainConfig


def tiny_spec(**kw):
    opts = dict(
        num_concepts=8,
        model={"embed_dim": 4, "lstm_hidden": 4, "score_dim": 4},
        train=TrainConfig(epochs=2, batch_size=4, eval_episodes=2),
        scenarios=[2],
        lengths=[2, 3],
        methods=["random"],
        eval_episodes=4,
        seeds=[0],
        candidate_size=4,
    )
    opts.update(kw)
    return ExperimentSpec(**opts)


class TestExperiment:
    def test_row_count(self):
        table = run_experiment(tiny_spec())
        assert len(table.rows) == 2
        assert all(r["status"] == "ok" and r["episodes"] == 4 for r in table.rows)

    def test_paired_episodes(self):
        table = run_experiment(tiny_spec(methods=["random", "rule", "mpc", "src"], lengths=[2]))
        assert len({r["episodes_hash"] for r in table.rows}) == 1

    def test_deterministic(self, tmp_path):
        spec = tiny_spec(methods=["src", "random"])
        a = run_experiment(spec, tmp_path / "a")
        b = run_experiment(spec, tmp_path / "b")
        assert a.rows == b.rows
        assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
        for ck in (tmp_path / "a" / "checkpoints").iterdir():
            assert ck.read_bytes() == (tmp_path / "b" / "checkpoints" / ck.name).read_bytes()

    def test_reports_and_schema(self, tmp_path):
        run_experiment(tiny_spec(methods=["random", "rule"]), tmp_path)
        with open(tmp_path / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == RESULT_COLUMNS and len(rows) == 4
        doc = json.loads((tmp_path / "summary.json").read_text())
        jsonschema.validate(doc, load_schema())
        lines = (tmp_path / "paths.jsonl").read_text().splitlines()
        assert len(lines) == 4 * 4
        first = json.loads(lines[0])
        assert {"episode", "method", "path", "E_T", "Y"} <= set(first)

    def test_failed_cell_recorded(self, monkeypatch, tmp_path):
        import srcpath.harness as H

        def boom(*a, **k):
            raise RuntimeError("mpc exploded")

        monkeypatch.setattr(H, "mpc_policy", boom)
        table = run_experiment(tiny_spec(methods=["mpc", "random"], lengths=[2]), tmp_path)
        status = {r["method"]: r["status"] for r in table.rows}
        assert status == {"mpc": "failed", "random": "ok"}
        jsonschema.validate(json.loads((tmp_path / "summary.json").read_text()), load_schema())

    def test_resume_skips_finished_cells(self, monkeypatch, tmp_path):
        import srcpath.harness as H

        spec = tiny_spec(methods=["random"], lengths=[2])
        first = run_experiment(spec, tmp_path)
        monkeypatch.setattr(H, "random_policy", lambda *a, **k: (_ for _ in ()).throw(AssertionError("recomputed")))
        again = run_experiment(replace(spec, lengths=[2]), tmp_path)
        assert again.rows == first.rows

    def test_validation(self):
        with pytest.raises(ValueError):
            tiny_spec(methods=[]).validate()
        with pytest.raises(ValueError):
            tiny_spec(scenarios=[]).validate()
        with pytest.raises(ValueError):
            tiny_spec(methods=["magic"]).validate()
        with pytest.raises(ValueError):
            tiny_spec(lengths=[40]).validate()

    def test_ablation_cells(self):
        table = ablation_grid(tiny_spec(lengths=[2]))
        assert len(table.rows) == 6
        assert all(r["status"] == "ok" and np.isfinite(r["mean_ET"]) for r in table.rows)


class TestConfig:
    def test_world_section(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[world]\npreset = two_cluster\nnum_concepts = 6\nseed = 2\ndecay = 0.9\n")
        world = build_world(read_config(path)["world"])
        assert world.preset == "two_cluster" and world.num_concepts == 6 and world.decay == 0.9

    def test_unknown_keys(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[world]\nspeed = 3\n")
        with pytest.raises(ConfigError):
            build_world(read_config(path)["world"])
        path.write_text("[extra]\nx = 1\n")
        with pytest.raises(ConfigError):
            read_config(path)

    def test_influence_csv(self, tmp_path):
        (tmp_path / "m.csv").write_text("0,1,0\n0,0,1\n0,0,0\n")
        (tmp_path / "c.ini").write_text("[world]\nnum_concepts = 3\ninfluence_csv = m.csv\n")
        world = build_world(read_config(tmp_path / "c.ini")["world"], tmp_path)
        assert world.influence[0, 1] == 1.0 and world.preset == "custom"


class TestCli:
    def write_config(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text(
            "[world]\nnum_concepts = 8\n\n[model]\nembed_dim = 4\nlstm_hidden = 4\nscore_dim = 4\n\n"
            "[train]\nepochs = 2\nbatch_size = 4\npath_length = 2\ncandidate_size = 4\neval_episodes = 2\n\n"
            "[experiment]\nmethods = random, rule\nscenarios = 2\nlengths = 2\nseeds = 0\neval_episodes = 3\ncandidate_size = 4\n"
        )
        return path

    def test_gradcheck(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        last = capsys.readouterr().out.strip().splitlines()[-1]
        assert last.startswith("max rel err") and float(last.split()[3]) < 1e-4

    def test_oracle_lists_twelve_paths(self, capsys):
        assert cli.main(["oracle", "--m", "4", "--n", "2"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("  ")]
        assert len(lines) == 12
        vals = [float(l.split()[-1]) for l in lines]
        assert vals == sorted(vals, reverse=True)

    def test_compare_empty_methods(self, capsys):
        assert cli.main(["compare", "--methods", ""]) == 1
        assert "method" in capsys.readouterr().err

    def test_unknown_subcommand_and_flag(self, capsys):
        assert cli.main(["bogus"]) == 1
        assert cli.main(["oracle", "--nope"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert cli.main(["--config", str(tmp_path / "none.ini"), "oracle"]) == 1

    def test_train_eval_compare(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path)
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
        assert (tmp_path / "t" / "checkpoint.json").exists()
        assert cli.main(["eval", str(tmp_path / "t" / "checkpoint.json"), "--config", str(cfg), "--episodes", "3", "--scenario", "2"]) == 0
        assert '"mean_ET"' in capsys.readouterr().out
        assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "cmp")]) == 0
        jsonschema.validate(json.loads((tmp_path / "cmp" / "summary.json").read_text()), load_schema())

    def test_saved_config_reproduces_checkpoint(self, tmp_path):
        cfg = self.write_config(tmp_path)
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["train", "--config", str(tmp_path / "a" / "config.ini"), "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()

    def test_runtime_failure_exit_code(self, monkeypatch, tmp_path):
        cfg = self.write_config(tmp_path)
        monkeypatch.setattr(cli, "train", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("disk on fire")))
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2

    def test_custom_world_round_trip(self, tmp_path):
        (tmp_path / "m.csv").write_text("0,1,0,0\n0,0,1,0\n0,0,0,1\n0,0,0,0\n")
        cfg = tmp_path / "c.ini"
        cfg.write_text(
            "[world]\nnum_concepts = 4\ninfluence_csv = m.csv\n\n[model]\nembed_dim = 4\nlstm_hidden = 4\nscore_dim = 4\n\n"
            "[train]\nepochs = 1\nbatch_size = 2\npath_length = 2\ncandidate_size = 3\neval_episodes = 1\n"
        )
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["train", "--config", str(tmp_path / "a" / "config.ini"), "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
