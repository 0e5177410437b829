"""
Persistence of quantization grids, solved value stages and run outputs.

Binary files are little-endian: an 8-byte magic, a header of unsigned
32-bit integers, a JSON metadata block, then raw 64-bit floats. The JSON
export of the grids is lossless because floats are written with repr.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from modules.errors import ArtifactFormatError, ArtifactMismatchError, MissingArtifactError
from modules.quantizer import Grid, QuantizedChain, TrainingMetadata, WeightedNorm
from modules.solver import SolveDiagnostics, SolveResult, ValueStage
from utils.logger import setup_logger

logger = setup_logger("artifacts")

# --- CONFIGURATION ---
GRID_MAGIC = b"OPTQGRID"
SOLVE_MAGIC = b"OPTSOLVE"
FORMAT_VERSION = 1
# magic, version, N, K, dims, metadata length
HEADER = struct.Struct("<8sIIIII")
FLOAT = np.dtype("<f8")
STAGE_FIELDS = ("values", "best_time", "stop", "continue_values", "steps", "boundary_times")


@dataclass(frozen=True)
class ArtifactPaths:
    """File layout under the output directory; per-K files live in ``K<K>/``."""

    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def scales(self) -> Path:
        return self.root / "scales.json"

    @property
    def simulate_dir(self) -> Path:
        return self.root / "simulate"

    @property
    def convergence(self) -> Path:
        return self.root / "convergence.csv"

    @property
    def convergence_table(self) -> Path:
        return self.root / "convergence.txt"

    def k_dir(self, K: int) -> Path:
        return self.root / f"K{K}"

    def grids(self, K: int) -> Path:
        return self.k_dir(K) / "grids.bin"

    def grids_json(self, K: int) -> Path:
        return self.k_dir(K) / "grids.json"

    def solve(self, K: int) -> Path:
        return self.k_dir(K) / "solve.bin"

    def outcomes(self, K: int) -> Path:
        return self.k_dir(K) / "outcomes.csv"

    def summary(self, K: int) -> Path:
        return self.k_dir(K) / "summary.json"

    def paths(self, K: int) -> Path:
        return self.k_dir(K) / "paths.json"

    def report_dir(self, K: int) -> Path:
        return self.k_dir(K) / "report"


def require(path: Path, command: str) -> Path:
    """Returns ``path`` or names the command that produces it."""
    if not Path(path).is_file():
        raise MissingArtifactError(path, command)
    return Path(path)


def check_label(labels: dict, key: str, expected: str, what: str) -> None:
    found = labels.get(key)
    if found != expected:
        logger.warning(f"{what}: {key} {str(found)[:12]} does not match the active configuration {expected[:12]}")
        raise ArtifactMismatchError(
            f"{what} was built with a different configuration ({key} {str(found)[:12]} != {expected[:12]}); rebuild it"
        )


def write_json(path: Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_json(path: Path, command: str) -> dict:
    try:
        return json.loads(require(path, command).read_text())
    except json.JSONDecodeError as e:
        raise ArtifactFormatError(f"{path} is not valid JSON: {e}") from e


# --- BINARY HELPERS ---
class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ArtifactFormatError(f"{self.path} is truncated")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def floats(self, *shape: int) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * FLOAT.itemsize), dtype=FLOAT).reshape(shape).astype(float)

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise ArtifactFormatError(f"{self.path} has {len(self.data) - self.offset} trailing bytes")


def _read_header(path: Path, magic: bytes, command: str) -> tuple[_Reader, tuple[int, int, int], dict]:
    data = require(path, command).read_bytes()
    reader = _Reader(data, path)
    found, version, N, K, dims, meta_len = HEADER.unpack(reader.take(HEADER.size))
    if found != magic:
        raise ArtifactFormatError(f"{path} is not a {magic.decode()} file (magic {found!r})")
    if version != FORMAT_VERSION:
        raise ArtifactFormatError(f"{path} has unsupported version {version}")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactFormatError(f"{path} has a corrupt metadata block") from e
    return reader, (N, K, dims), meta


def _write(path: Path, magic: bytes, N: int, K: int, dims: int, meta: dict, arrays) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with path.open("wb") as handle:
        handle.write(HEADER.pack(magic, FORMAT_VERSION, N, K, dims, len(meta_bytes)))
        handle.write(meta_bytes)
        for array in arrays:
            handle.write(np.ascontiguousarray(array, dtype=FLOAT).tobytes())


# --- GRIDS ---
def save_chain(chain: QuantizedChain, path: Path) -> None:
    N, K, dims = chain.horizon, chain.size, chain.dims
    if any(grid.size != K for grid in chain.grids):
        raise ArtifactFormatError("Only chains with equal grid sizes can be stored")
    meta = {"metadata": chain.metadata.to_dict(), "labels": chain.labels}
    arrays = [np.asarray(chain.norm.scale)]
    for grid in chain.grids:
        arrays.extend([grid.points, grid.weights])
    arrays.extend(chain.transitions)
    _write(path, GRID_MAGIC, N, K, dims, meta, arrays)
    logger.info(f"Saved grids (N={N}, K={K}) to {path}")


def load_chain(path: Path, command: str = "train") -> QuantizedChain:
    reader, (N, K, dims), meta = _read_header(Path(path), GRID_MAGIC, command)
    norm = WeightedNorm(tuple(reader.floats(dims)))
    grids = [Grid(n, reader.floats(K, dims), reader.floats(K)) for n in range(N + 1)]
    transitions = [reader.floats(K, K) for _ in range(N)]
    reader.finish()
    return QuantizedChain(grids, transitions, norm, TrainingMetadata.from_dict(meta["metadata"]), meta["labels"])


def export_chain_json(chain: QuantizedChain, path: Path) -> None:
    write_json(path, {
        "format": GRID_MAGIC.decode(),
        "version": FORMAT_VERSION,
        "scale": list(chain.norm.scale),
        "grids": [{"stage": g.stage, "points": g.points.tolist(), "weights": g.weights.tolist()} for g in chain.grids],
        "transitions": [matrix.tolist() for matrix in chain.transitions],
        "metadata": chain.metadata.to_dict(),
        "labels": chain.labels,
    })


def load_chain_json(path: Path, command: str = "train") -> QuantizedChain:
    data = read_json(path, command)
    if data.get("format") != GRID_MAGIC.decode() or data.get("version") != FORMAT_VERSION:
        raise ArtifactFormatError(f"{path} is not a version {FORMAT_VERSION} grid export")
    grids = [Grid(g["stage"], np.array(g["points"]), np.array(g["weights"])) for g in data["grids"]]
    transitions = [np.array(matrix, dtype=float) for matrix in data["transitions"]]
    return QuantizedChain(
        grids, transitions, WeightedNorm(tuple(data["scale"])),
        TrainingMetadata.from_dict(data["metadata"]), data["labels"],
    )


# --- SOLVED VALUES ---
def save_solve(result: SolveResult, path: Path) -> None:
    N, K = result.horizon, result.size
    dims = result.initial_points.shape[1]
    meta = {"diagnostics": result.diagnostics.to_dict(), "labels": result.labels}
    arrays = [result.terminal, result.initial_points, result.initial_weights]
    for stage in result.stages:
        arrays.extend(getattr(stage, name) for name in STAGE_FIELDS)
    _write(path, SOLVE_MAGIC, N, K, dims, meta, arrays)
    logger.info(f"Saved solved values (N={N}, K={K}, v0={result.v0:.6g}) to {path}")


def load_solve(path: Path, command: str = "solve") -> SolveResult:
    reader, (N, K, dims), meta = _read_header(Path(path), SOLVE_MAGIC, command)
    terminal = reader.floats(K)
    initial_points = reader.floats(K, dims)
    initial_weights = reader.floats(K)
    stages = []
    for n in range(1, N + 1):
        values = {name: reader.floats(K) for name in STAGE_FIELDS}
        values["stop"] = values["stop"].astype(bool)
        stages.append(ValueStage(n, **values))
    reader.finish()
    return SolveResult(
        stages, terminal, initial_points, initial_weights,
        SolveDiagnostics.from_dict(meta["diagnostics"]), meta["labels"],
    )
