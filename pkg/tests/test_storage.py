import json
import math

import numpy as np
import pytest

from errors import StorageError
from storage import MetricsStorage, RunDirectory, read_json, step_of_checkpoint, write_json


def row(step, total=1.0):
    return {
        "step": step,
        "sep": 0.5,
        "inv": 0.25,
        "cap": -0.125,
        "coniso": 0.0,
        "total": total,
        "far_pairs": 100,
        "near_pairs": 7,
        "qualifying_steps": 3,
        "lr": 2e-5,
    }


def test_metrics_round_trip(tmp_path):
    storage = MetricsStorage(tmp_path / "metrics.csv")
    assert storage.load_all() == []
    storage.save_row(row(0, 0.1))
    storage.save_row(row(1, 1 / 3))
    rows = storage.load_all()
    assert [r["step"] for r in rows] == [0, 1]
    assert rows[1]["total"] == 1 / 3
    assert isinstance(rows[0]["near_pairs"], int)


def test_metrics_missing_column(tmp_path):
    bad = row(0)
    del bad["lr"]
    with pytest.raises(StorageError):
        MetricsStorage(tmp_path / "metrics.csv").save_row(bad)


def test_truncate_drops_resumed_steps(tmp_path):
    storage = MetricsStorage(tmp_path / "metrics.csv")
    for step in range(5):
        storage.save_row(row(step))
    assert storage.truncate(3) == 3
    assert [r["step"] for r in storage.load_all()] == [0, 1, 2]


def test_identical_rows_give_identical_files(tmp_path):
    for name in ("a.csv", "b.csv"):
        storage = MetricsStorage(tmp_path / name)
        for step in range(3):
            storage.save_row(row(step, total=0.1 * step))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_json_replaces_non_finite(tmp_path):
    path = write_json(tmp_path / "sub" / "report.json", {
        "nan": float("nan"),
        "array": np.array([1.0, np.inf]),
        "scalar": np.float32(0.5),
        "nested": {"x": [math.nan, 2]},
    })
    data = read_json(path)
    assert data == {"nan": None, "array": [1.0, None], "scalar": 0.5, "nested": {"x": [None, 2]}}
    json.loads(path.read_text())


def test_read_json_errors(tmp_path):
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(StorageError):
        read_json(tmp_path / "broken.json")
    with pytest.raises(StorageError):
        read_json(tmp_path / "missing.json")


def test_run_directory_layout(tmp_path):
    run = RunDirectory.create(seed=5, root=tmp_path, label="no-capacity")
    assert run.path.name.endswith("_seed5_no-capacity")
    assert run.checkpoints_dir.is_dir()
    assert run.checkpoint_path(20).name == "ckpt_00000020.gsck"
    assert RunDirectory.state_path(run.checkpoint_path(20)).name == "ckpt_00000020.state.npz"
    assert run.eval_root == run.path / "eval"
    assert run.latest_checkpoint() is None
    run.checkpoint_path(3).write_bytes(b"")
    run.checkpoint_path(12).write_bytes(b"")
    assert run.latest_checkpoint() == run.checkpoint_path(12)


def test_run_directories_never_collide(tmp_path):
    first = RunDirectory.create(seed=1, root=tmp_path)
    second = RunDirectory.create(seed=1, root=tmp_path)
    assert first.path != second.path


def test_run_directory_root_from_env(runs_dir):
    run = RunDirectory.create(seed=0)
    assert run.path.parent == runs_dir


def test_step_of_checkpoint():
    assert step_of_checkpoint("runs/x/checkpoints/ckpt_00001234.gsck") == 1234
    with pytest.raises(StorageError):
        step_of_checkpoint("model.gsck")
