"""
storage.py

Run directories and the plain-text artefacts written into them.
Appends one metrics row per training step to a CSV file, creating it with a
header on first write; writes JSON reports and the resolved run config.
"""

import csv
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from errors import StorageError

logger = logging.getLogger(__name__)

METRIC_FIELDS = [
    "step",
    "sep",
    "inv",
    "cap",
    "coniso",
    "total",
    "far_pairs",
    "near_pairs",
    "qualifying_steps",
    "lr",
]
_INT_FIELDS = {"step", "far_pairs", "near_pairs", "qualifying_steps"}


def _format_cell(name: str, value) -> str:
    if name in _INT_FIELDS:
        return str(int(value))
    return repr(float(value))


class MetricsStorage:
    """Handles the per-step metrics log of a training run."""

    def __init__(self, csv_file: Union[str, Path] = "metrics.csv"):
        """
        Initialize storage manager.

        Args:
            csv_file: Path to the CSV file for storing metrics rows
        """
        self.csv_file = Path(csv_file)
        self.fieldnames = METRIC_FIELDS

    def _ensure_file_exists(self) -> None:
        """Create CSV file with headers if it doesn't exist."""
        if not self.csv_file.exists():
            with open(self.csv_file, "w", newline="", encoding="utf-8") as f:
                writer = csv.DictWriter(f, fieldnames=self.fieldnames, lineterminator="\n")
                writer.writeheader()

    def save_row(self, row: Dict) -> None:
        """
        Append one metrics row.

        Args:
            row: Mapping with every metrics column

        Raises:
            StorageError: if the file cannot be written or a column is missing
        """
        try:
            cells = {name: _format_cell(name, row[name]) for name in self.fieldnames}
        except KeyError as e:
            raise StorageError(f"metrics row missing column {e}") from None
        try:
            self._ensure_file_exists()
            with open(self.csv_file, "a", newline="", encoding="utf-8") as f:
                writer = csv.DictWriter(f, fieldnames=self.fieldnames, lineterminator="\n")
                writer.writerow(cells)
        except OSError as e:
            raise StorageError(f"cannot write metrics to {self.csv_file}: {e}") from e

    def load_all(self) -> List[Dict]:
        """
        Load all metrics rows.

        Returns:
            List of row dictionaries with numeric values
        """
        if not self.csv_file.exists():
            return []
        rows = []
        try:
            with open(self.csv_file, "r", newline="", encoding="utf-8") as f:
                for row in csv.DictReader(f):
                    rows.append({
                        name: int(row[name]) if name in _INT_FIELDS else float(row[name])
                        for name in self.fieldnames
                    })
        except (OSError, KeyError, ValueError) as e:
            raise StorageError(f"cannot read metrics from {self.csv_file}: {e}") from e
        return rows

    def truncate(self, step: int) -> int:
        """Drop rows with step >= `step` (used when resuming); returns rows kept."""
        rows = [r for r in self.load_all() if r["step"] < step]
        try:
            self.csv_file.unlink(missing_ok=True)
        except OSError as e:
            raise StorageError(f"cannot rewrite {self.csv_file}: {e}") from e
        self._ensure_file_exists()
        for row in rows:
            self.save_row(row)
        return len(rows)


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def _finite_or_none(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite_or_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_none(v) for v in value]
    return value


def write_json(path: Union[str, Path], data: Dict) -> Path:
    """Write a report; NaN and infinities become null."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(_finite_or_none(json.loads(json.dumps(data, default=_json_default))), indent=2)
        path.write_text(text + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


def read_json(path: Union[str, Path]) -> Dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise StorageError(f"cannot read {path}: {e}") from e


class RunDirectory:
    """
    Layout of one run:

        <root>/<timestamp>_seed<seed>/
            config.cfg  metrics.csv  report.json  abort.json
            checkpoints/ckpt_XXXXXXXX.gsck (+ .state.npz)
            eval/arena_<side>m/...
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    @classmethod
    def create(cls, seed: int, root: Optional[Union[str, Path]] = None, label: Optional[str] = None) -> "RunDirectory":
        root = Path(root or os.getenv("GRIDSSL_RUNS_DIR", "runs"))
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        name = f"{stamp}_seed{seed}" + (f"_{label}" if label else "")
        path = root / name
        suffix = 1
        while path.exists():
            path = root / f"{name}.{suffix}"
            suffix += 1
        try:
            path.mkdir(parents=True)
            (path / "checkpoints").mkdir()
        except OSError as e:
            raise StorageError(f"cannot create run directory {path}: {e}") from e
        logger.info("Run directory %s", path)
        return cls(path)

    @property
    def config_path(self) -> Path:
        return self.path / "config.cfg"

    @property
    def metrics(self) -> MetricsStorage:
        return MetricsStorage(self.path / "metrics.csv")

    @property
    def report_path(self) -> Path:
        return self.path / "report.json"

    @property
    def abort_path(self) -> Path:
        return self.path / "abort.json"

    @property
    def checkpoints_dir(self) -> Path:
        return self.path / "checkpoints"

    def checkpoint_path(self, step: int) -> Path:
        return self.checkpoints_dir / f"ckpt_{step:08d}.gsck"

    @staticmethod
    def state_path(checkpoint: Union[str, Path]) -> Path:
        """Resume sidecar stored next to a checkpoint."""
        checkpoint = Path(checkpoint)
        return checkpoint.with_name(checkpoint.stem + ".state.npz")

    def checkpoints(self) -> List[Path]:
        return sorted(self.checkpoints_dir.glob("ckpt_*.gsck"))

    def latest_checkpoint(self) -> Optional[Path]:
        found = self.checkpoints()
        return found[-1] if found else None

    @property
    def eval_root(self) -> Path:
        """Parent of the per-arena `arena_<side>m` output directories."""
        return self.path / "eval"


def step_of_checkpoint(path: Union[str, Path]) -> int:
    """Step number encoded in a checkpoint file name."""
    stem = Path(path).stem
    try:
        return int(stem.split("_", 1)[1])
    except (IndexError, ValueError):
        raise StorageError(f"cannot read step from checkpoint name {path}") from None
