"""Tests for run configuration and the training pipeline."""

import os
import time

import pytest

import pipeline
from _itc_common import ConfigError, NumericalError, StageError
from gridworld import GridConfig
from pipeline import RunConfig, TrainConfig, stage, train_pipeline
from store import read_dataset, read_json, read_metrics
from world_model import WmConfig


def _tiny(out_dir, seed=1, **overrides) -> RunConfig:
    base = dict(
        grid=GridConfig(max_steps=20),
        wm=WmConfig(num_blocks=1, num_heads=2, embed_dim=32, mlp_dim=32, seq_len=4, head_hidden=16),
        train=TrainConfig(episodes=4, updates=3, batch_size=2, log_every=2),
        out_dir=str(out_dir),
        seed=seed,
    )
    base.update(overrides)
    return RunConfig(**base)


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.tokenizer.patch_shape == (1, 1, 5)
        assert cfg.ot.epsilon == 1e-5 and cfg.ot.iterations == 10
        assert cfg.wm.learning_rate == 1e-3 and cfg.wm.grad_clip_norm == 0.5

    def test_from_dict(self):
        cfg = RunConfig.from_dict({"seed": 3, "wm": {"num_blocks": 1}, "ot": {"c_d": 0.4}})
        assert cfg.seed == 3
        assert cfg.wm.num_blocks == 1
        assert cfg.ot.c_d == 0.4

    def test_dict_round_trip(self):
        cfg = RunConfig(seed=5, train=TrainConfig(updates=7))
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"sed": 1})

    def test_unknown_section_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"ot": {"epsilon": 1e-3, "temperature": 1.0}})

    def test_section_must_be_object(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"wm": 3})

    def test_invalid_section_value(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"ot": {"epsilon": 0.0}})

    def test_paths_come_together(self, tmp_path):
        data = tmp_path / "data.jsonl"
        data.write_text("")
        with pytest.raises(ConfigError):
            RunConfig(dataset_path=str(data))

    def test_missing_path(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig(dataset_path=str(tmp_path / "a"), codebook_path=str(tmp_path / "b"))

    def test_patch_shape_must_match_cells(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"tokenizer": {"patch_shape": [2, 2, 5]}})

    def test_load(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"seed": 9, "eval": {"rollout_horizon": 4}}')
        cfg = RunConfig.load(str(path))
        assert cfg.seed == 9 and cfg.eval.rollout_horizon == 4


class TestStage:
    def test_wraps_failures(self):
        with pytest.raises(StageError) as info:
            with stage("train"):
                raise NumericalError("loss went nan")
        assert info.value.stage == "train"
        assert info.value.exit_code == NumericalError.exit_code
        assert "[train]" in str(info.value)

    def test_plain_errors_exit_one(self):
        with pytest.raises(StageError) as info:
            with stage("collect"):
                raise RuntimeError("disk full")
        assert info.value.exit_code == 1


class TestTrainPipeline:
    def test_artifacts(self, tmp_path):
        artifacts = train_pipeline(_tiny(tmp_path / "run"))
        for key in ("dataset", "codebook", "checkpoint", "metrics", "config"):
            assert os.path.isfile(artifacts[key])
        steps = [row["step"] for row in read_metrics(artifacts["metrics"])]
        assert steps == [1, 2, 3]
        rows = read_metrics(artifacts["metrics"])
        assert all({"loss", "loss_state", "token_error_rate", "grad_norm"} <= set(r) for r in rows)
        assert read_json(artifacts["config"])["seed"] == 1

    def test_same_seed_same_checkpoint(self, tmp_path):
        a = train_pipeline(_tiny(tmp_path / "a"))
        b = train_pipeline(_tiny(tmp_path / "b"))
        assert a["checkpoint_sha256"] == b["checkpoint_sha256"]

    def test_reused_dataset_trains_identically(self, tmp_path):
        first = train_pipeline(_tiny(tmp_path / "a"))
        again = train_pipeline(_tiny(tmp_path / "b", dataset_path=first["dataset"],
                                     codebook_path=first["codebook"]))
        assert again["checkpoint_sha256"] == first["checkpoint_sha256"]

    def test_stage_is_tagged(self, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise NumericalError("non-finite training loss nan (batch 0123)")

        monkeypatch.setattr(pipeline, "train_world_model", explode)
        with pytest.raises(StageError) as info:
            train_pipeline(_tiny(tmp_path / "run"))
        assert info.value.stage == "train"
        assert info.value.exit_code == 3
        assert isinstance(info.value.cause, NumericalError)


class TestTinyPreset:
    def test_fits_a_ten_step_rollout(self):
        cfg = RunConfig.tiny()
        assert cfg.train.updates == 200
        assert cfg.train.episodes * cfg.grid.max_steps <= 500
        assert cfg.wm.seq_len - 1 >= 10
        assert cfg.wm.rope_pairs == (6, 2)

    def test_overrides(self, tmp_path):
        cfg = RunConfig.tiny(out_dir=str(tmp_path), seed=4)
        assert cfg.seed == 4 and cfg.out_dir == str(tmp_path)

    @pytest.mark.slow
    def test_runs_within_a_minute(self, tmp_path):
        start = time.perf_counter()
        artifacts = train_pipeline(RunConfig.tiny(out_dir=str(tmp_path / "run")))
        elapsed = time.perf_counter() - start
        assert len(read_dataset(artifacts["dataset"])) <= 500
        assert read_metrics(artifacts["metrics"])[-1]["step"] == 200
        assert elapsed < 60.0
