"""
ratemaps.py

Trajectory-averaged activation maps.

Activations are binned by position with a sparse bin-by-sample matrix, one
chunk at a time, so arbitrarily long rollouts never have to be held in memory.
Bins visited fewer than `min_occupancy` times are NaN. Maps can be written to
and read from the binary ratemap format and rendered as PGM/PPM images.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import sparse

from errors import StorageError
from trajectory import Box

logger = logging.getLogger(__name__)

RATEMAP_MAGIC = b"GSRM"
RATEMAP_VERSION = 1
_HEADER = struct.Struct("<4sIIIId4d")

DEAD_THRESHOLD = 1e-6
DEFAULT_BIN_SIZE = 0.02
DEFAULT_ARENA = 2.0


@dataclass
class Ratemap:
    """
    Mean activation of one unit per spatial bin.

    `values` and `occupancy` are indexed [ix, iy]; bins with too few visits
    hold NaN. `peak` is the largest activation seen along the trajectory.
    """

    unit: int
    arena: Box
    bin_size: float
    values: np.ndarray
    occupancy: np.ndarray
    peak: float

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def valid_fraction(self) -> float:
        return float(np.mean(self.valid))

    @property
    def dead(self) -> bool:
        return self.peak < DEAD_THRESHOLD

    def bin_centres(self) -> Tuple[np.ndarray, np.ndarray]:
        """x and y coordinates of the bin centres."""
        nx, ny = self.shape
        xs = self.arena[0] + (np.arange(nx) + 0.5) * self.bin_size
        ys = self.arena[2] + (np.arange(ny) + 0.5) * self.bin_size
        return xs, ys


def bin_size_for(side: float, base: float = DEFAULT_BIN_SIZE) -> float:
    """The default bin size for a 2 m arena, scaled with the arena side."""
    return base * side / DEFAULT_ARENA


def steps_for(side: float, base: int = 400_000) -> int:
    """Evaluation walk length, scaled with the arena area."""
    return int(round(base * (side / DEFAULT_ARENA) ** 2))


def grid_shape(arena: Box, bin_size: float) -> Tuple[int, int]:
    nx = int(round((arena[1] - arena[0]) / bin_size))
    ny = int(round((arena[3] - arena[2]) / bin_size))
    if nx < 1 or ny < 1:
        raise ValueError(f"bin size {bin_size} too large for arena {arena}")
    return nx, ny


class RatemapAccumulator:
    """
    Running per-bin sums for every unit.

    Args:
        n_units: Number of units
        arena: (x0, x1, y0, y1)
        bin_size: Bin side in meters
    """

    def __init__(self, n_units: int, arena: Box, bin_size: float):
        self.n_units = n_units
        self.arena = tuple(float(v) for v in arena)
        self.bin_size = float(bin_size)
        self.nx, self.ny = grid_shape(self.arena, self.bin_size)
        self.sums = np.zeros((self.nx * self.ny, n_units))
        self.counts = np.zeros(self.nx * self.ny, dtype=np.int64)
        self.peaks = np.zeros(n_units)

    def bin_index(self, positions: np.ndarray) -> np.ndarray:
        ix = np.floor((positions[:, 0] - self.arena[0]) / self.bin_size).astype(np.intp)
        iy = np.floor((positions[:, 1] - self.arena[2]) / self.bin_size).astype(np.intp)
        ix = np.clip(ix, 0, self.nx - 1)
        iy = np.clip(iy, 0, self.ny - 1)
        return ix * self.ny + iy

    def add(self, positions: np.ndarray, activations: np.ndarray) -> None:
        positions = np.asarray(positions, dtype=np.float64)
        activations = np.asarray(activations, dtype=np.float64)
        if activations.shape != (positions.shape[0], self.n_units):
            raise ValueError(f"activations {activations.shape} do not match {positions.shape[0]} positions x {self.n_units} units")
        if positions.shape[0] == 0:
            return
        bins = self.bin_index(positions)
        binning = sparse.csr_matrix(
            (np.ones(bins.size), (bins, np.arange(bins.size))),
            shape=(self.nx * self.ny, bins.size),
        )
        self.sums += binning @ activations
        self.counts += np.bincount(bins, minlength=self.nx * self.ny)
        np.maximum(self.peaks, activations.max(axis=0), out=self.peaks)

    def finish(self, min_occupancy: int = 10) -> List[Ratemap]:
        enough = self.counts >= max(min_occupancy, 1)
        means = np.full_like(self.sums, np.nan)
        means[enough] = self.sums[enough] / self.counts[enough, None]
        occupancy = self.counts.reshape(self.nx, self.ny).astype(np.uint32)
        flagged = int(np.sum(~enough))
        if flagged:
            logger.debug("%d of %d bins below occupancy %d", flagged, enough.size, min_occupancy)
        return [
            Ratemap(
                unit=u,
                arena=self.arena,
                bin_size=self.bin_size,
                values=means[:, u].reshape(self.nx, self.ny),
                occupancy=occupancy,
                peak=float(self.peaks[u]),
            )
            for u in range(self.n_units)
        ]


def compute_ratemaps(
    activations: Union[np.ndarray, Iterable[np.ndarray]],
    positions: np.ndarray,
    arena: Box,
    bin_size: float = DEFAULT_BIN_SIZE,
    min_occupancy: int = 10,
) -> List[Ratemap]:
    """
    Bin activations by position.

    Args:
        activations: P x N array, or an iterable of consecutive chunks
            that together cover the P positions
        positions: P x 2 positions
        arena: Arena box
        bin_size: Bin side in meters
        min_occupancy: Visits a bin needs before its mean is reported

    Returns:
        One Ratemap per unit
    """
    positions = np.asarray(positions, dtype=np.float64)
    chunks = [activations] if isinstance(activations, np.ndarray) else activations
    accumulator: Optional[RatemapAccumulator] = None
    offset = 0
    for chunk in chunks:
        chunk = np.asarray(chunk)
        if accumulator is None:
            accumulator = RatemapAccumulator(chunk.shape[1], arena, bin_size)
        accumulator.add(positions[offset:offset + chunk.shape[0]], chunk)
        offset += chunk.shape[0]
    if accumulator is None:
        raise ValueError("no activations given")
    if offset != positions.shape[0]:
        raise ValueError(f"{offset} activation rows for {positions.shape[0]} positions")
    return accumulator.finish(min_occupancy)


# ---------------------------------------------------------------------------
# Ratemap file
# ---------------------------------------------------------------------------

def encode_ratemap(ratemap: Ratemap) -> bytes:
    nx, ny = ratemap.shape
    header = _HEADER.pack(
        RATEMAP_MAGIC, RATEMAP_VERSION, ratemap.unit, nx, ny, ratemap.bin_size, *ratemap.arena
    )
    values = np.ascontiguousarray(ratemap.values, dtype="<f8").tobytes()
    occupancy = np.ascontiguousarray(ratemap.occupancy, dtype="<u4").tobytes()
    return header + values + occupancy


def decode_ratemap(data: bytes) -> Ratemap:
    if len(data) < _HEADER.size:
        raise StorageError("ratemap truncated: header incomplete")
    magic, version, unit, nx, ny, bin_size, x0, x1, y0, y1 = _HEADER.unpack_from(data)
    if magic != RATEMAP_MAGIC:
        raise StorageError(f"not a ratemap file (magic {magic!r})")
    if version != RATEMAP_VERSION:
        raise StorageError(f"unsupported ratemap version {version}")
    expected = _HEADER.size + nx * ny * 12
    if len(data) != expected:
        raise StorageError(f"ratemap size {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f8", count=nx * ny, offset=_HEADER.size).reshape(nx, ny).copy()
    occupancy = np.frombuffer(data, dtype="<u4", count=nx * ny, offset=_HEADER.size + 8 * nx * ny).reshape(nx, ny).copy()
    peak = float(np.nanmax(values)) if np.any(np.isfinite(values)) else 0.0
    return Ratemap(unit, (x0, x1, y0, y1), bin_size, values, occupancy, peak)


def write_ratemap(path: Union[str, Path], ratemap: Ratemap) -> Path:
    path = Path(path)
    try:
        path.write_bytes(encode_ratemap(ratemap))
    except OSError as e:
        raise StorageError(f"cannot write ratemap {path}: {e}") from e
    return path


def read_ratemap(path: Union[str, Path]) -> Ratemap:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read ratemap {path}: {e}") from e
    return decode_ratemap(data)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def _to_gray(values: np.ndarray) -> np.ndarray:
    """[ix, iy] map -> uint8 image rows (y up), NaN as black."""
    finite = np.isfinite(values)
    out = np.zeros(values.shape, dtype=np.uint8)
    if finite.any():
        lo, hi = np.min(values[finite]), np.max(values[finite])
        span = hi - lo if hi > lo else 1.0
        out[finite] = np.round(255 * (values[finite] - lo) / span).astype(np.uint8)
    return np.ascontiguousarray(out.T[::-1])


def write_pgm(path: Union[str, Path], values: np.ndarray) -> Path:
    """Grayscale image of a map or autocorrelogram."""
    path = Path(path)
    try:
        Image.fromarray(_to_gray(values)).save(path, format="PPM")
    except OSError as e:
        raise StorageError(f"cannot write image {path}: {e}") from e
    return path


def write_montage(path: Union[str, Path], ratemaps: Sequence[Ratemap], columns: int = 16, gap: int = 2) -> Path:
    """
    All maps in one colour image; dead units are drawn in red.
    """
    if not ratemaps:
        raise ValueError("no ratemaps to render")
    h, w = ratemaps[0].shape[1], ratemaps[0].shape[0]
    columns = min(columns, len(ratemaps))
    rows = -(-len(ratemaps) // columns)
    canvas = Image.new("RGB", (columns * (w + gap) + gap, rows * (h + gap) + gap), (255, 255, 255))
    for i, ratemap in enumerate(ratemaps):
        gray = _to_gray(ratemap.values)
        rgb = np.stack([gray, gray, gray], axis=-1)
        if ratemap.dead:
            rgb[..., 0] = 255
            rgb[..., 1] //= 3
            rgb[..., 2] //= 3
        r, c = divmod(i, columns)
        canvas.paste(Image.fromarray(np.ascontiguousarray(rgb)), (gap + c * (w + gap), gap + r * (h + gap)))
    path = Path(path)
    try:
        canvas.save(path, format="PPM")
    except OSError as e:
        raise StorageError(f"cannot write image {path}: {e}") from e
    return path
