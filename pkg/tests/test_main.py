import pytest

from config import RunConfig
from errors import ConfigError
from main import main, parse_arenas
from storage import RunDirectory, read_json


@pytest.fixture
def small_cfg(tmp_path):
    config = RunConfig().with_overrides(
        n_units=32,
        hidden_units=16,
        batch_size=4,
        trajectory_length=5,
        checkpoint_every=5,
        eval_arenas=(2.0,),
        eval_steps=20_000,
        eval_bin_size=0.1,
    )
    return config.write(tmp_path / "small.cfg")


def only_run(runs_dir):
    runs = sorted(p for p in runs_dir.iterdir() if p.is_dir())
    assert len(runs) == 1
    return RunDirectory(runs[0])


def test_parse_arenas():
    assert parse_arenas(None) is None
    assert parse_arenas("2, 4.5") == [2.0, 4.5]
    with pytest.raises(ConfigError):
        parse_arenas("2,big")
    with pytest.raises(ConfigError):
        parse_arenas("2,-1")


def test_train_zero_steps(small_cfg, runs_dir):
    assert main(["train", "--config", str(small_cfg), "--max-steps", "0", "--no-prefetch"]) == 0
    run = only_run(runs_dir)
    assert run.checkpoint_path(0).exists()
    assert RunConfig.from_file(run.config_path).train.max_steps == 0


def test_missing_config_key_exits_2(tmp_path, runs_dir):
    text = RunConfig().to_text()
    broken = "\n".join(line for line in text.splitlines() if not line.startswith("lambda_inv"))
    path = tmp_path / "broken.cfg"
    path.write_text(broken)
    assert main(["train", "--config", str(path), "--max-steps", "0"]) == 2


def test_missing_config_file_exits_2(tmp_path, runs_dir):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_corrupt_checkpoint_exits_4(small_cfg, tmp_path, runs_dir):
    checkpoint = tmp_path / "run" / "checkpoints" / "ckpt_00000000.gsck"
    checkpoint.parent.mkdir(parents=True)
    checkpoint.write_bytes(b"GSCK but not really")
    assert main(["eval", "--checkpoint", str(checkpoint), "--config", str(small_cfg)]) == 4


def test_eval_needs_a_target(runs_dir):
    assert main(["eval"]) == 2


def test_empty_ablation_list_exits_2(small_cfg, runs_dir):
    assert main(["ablate", "--config", str(small_cfg), "--only", ""]) == 2


def test_oracle_command(runs_dir):
    assert main(["oracle", "--bin-size", "0.05", "--resolution", "0.1"]) == 0
    run = only_run(runs_dir)
    assert (run.path / "oracle" / "unit_127.gsrm").exists()
    assert (run.path / "oracle" / "montage.ppm").exists()
    report = read_json(run.report_path)
    assert [m["period"] for m in report["modules"]] == [0.30, 0.45]
    assert len(report["coding"]["distinguishable_by_modules"]) == 2


def test_train_eval_report(small_cfg, runs_dir):
    assert main(["train", "--config", str(small_cfg), "--max-steps", "0", "--no-prefetch"]) == 0
    run = only_run(runs_dir)
    checkpoint = run.checkpoint_path(0)
    assert checkpoint.exists()
    assert main(["eval", "--checkpoint", str(run.path)]) == 0

    report = read_json(run.report_path)
    assert report["arenas"][0]["arena"] == 2.0
    assert report["commutation"]["pairs"] == 256 * 5
    assert len(report["training_batch_distances"]["cdf"]) == 101
    assert (run.path / "eval" / "arena_2m" / "montage.ppm").exists()

    assert main(["report", str(run.path), "--walk-steps", "500"]) == 0
    stats = read_json(run.path / "trajectory_stats.json")
    assert sum(stats["evaluation"]["speed"]["counts"]) == 500
    assert sum(stats["training"]["speed"]["counts"]) == 4 * 5


def test_report_on_missing_directory(tmp_path):
    assert main(["report", str(tmp_path / "absent")]) == 2


def test_eval_of_run_without_checkpoints_exits_2(tmp_path):
    run = RunDirectory.create(seed=0, root=tmp_path)
    assert main(["eval", "--checkpoint", str(run.path)]) == 2


def test_unwritable_runs_root_exits_4(small_cfg, runs_dir):
    runs_dir.parent.mkdir(parents=True, exist_ok=True)
    runs_dir.write_text("not a directory")
    assert main(["train", "--config", str(small_cfg), "--max-steps", "0", "--no-prefetch"]) == 4


def test_unwritable_oracle_output_exits_4(tmp_path, monkeypatch):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    monkeypatch.setattr(RunDirectory, "create", classmethod(lambda cls, seed, root=None, label=None: cls(blocker)))
    assert main(["oracle", "--bin-size", "0.05", "--resolution", "0.1"]) == 4
