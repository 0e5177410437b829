"""
Optimal quantization of the embedded chain (Z_n, S_n).

Grids are trained stage by stage with competitive learning vector
quantization (CLVQ) under a weighted Euclidean norm. A second pass over
regenerated samples counts the empirical weights and the transition
frequencies between consecutive grids.

Samples are handled in fixed-size chunks. Each chunk is drawn from its own
generator, seeded from the caller's generator, so the second pass replays
exactly the same realizations without storing them.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from modules.errors import InputError, NumericalError
from modules.pdmp_core import HybridState, PdmpModel, simulate
from utils.logger import setup_logger

logger = setup_logger("quantizer")

# --- CONFIGURATION ---
SCALE_FLOOR = 1e-12
DISCRETE_SCALE = 1e-3
MIN_PILOT_PER_STAGE = 100
MIN_DISTORTION_SAMPLES = 1000
WEIGHT_TOLERANCE = 1e-9
DEFAULT_CHUNK = 10_000
# Bounds the (batch x K) distance matrix built per projection call.
PROJECTION_CELLS = 2_000_000

# sampler(runs, rng) -> array (runs, N + 1, dims)
ChainSampler = Callable[[int, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class WeightedNorm:
    """Euclidean norm after dividing each coordinate by its scale."""

    scale: tuple[float, ...]

    def __post_init__(self):
        scale = tuple(float(s) for s in self.scale)
        if not scale or any(not (math.isfinite(s) and s > 0) for s in scale):
            raise InputError(f"Scales must be positive and finite, got {scale}")
        object.__setattr__(self, "scale", scale)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.scale)

    @property
    def dims(self) -> int:
        return len(self.scale)

    def scaled(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) / self.array

    def distance(self, x, y) -> float:
        return float(np.sqrt(np.sum(((np.asarray(x, float) - np.asarray(y, float)) / self.array) ** 2)))

    @classmethod
    def unit(cls, dims: int) -> WeightedNorm:
        return cls((1.0,) * dims)


@dataclass(frozen=True, eq=False)
class Grid:
    stage: int
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if points.shape[0] < 1:
            raise InputError(f"Grid {self.stage} has no points")
        if weights.shape[0] != points.shape[0]:
            raise InputError(f"Grid {self.stage}: {points.shape[0]} points but {weights.shape[0]} weights")
        if not np.all(np.isfinite(points)):
            raise NumericalError(f"Grid {self.stage} has non-finite points")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise NumericalError(f"Grid {self.stage} weights are not a probability vector (sum {weights.sum()!r})")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dims(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class StepSchedule:
    """Robbins-Monro gains a/(b + k); ``b`` defaults to 10 K."""

    a: float = 1.0
    b: float | None = None

    def offset(self, K: int) -> float:
        return 10.0 * K if self.b is None else float(self.b)

    def gains(self, start: int, count: int, K: int) -> np.ndarray:
        k = np.arange(start, start + count, dtype=float)
        return self.a / (self.offset(K) + k)


@dataclass
class TrainingMetadata:
    samples: int
    seed: int | None
    distortion: list[float]
    flagged_rows: list[list[int]] = field(default_factory=list)
    schedule_a: float = 1.0
    schedule_b: float = 0.0
    chunk_size: int = DEFAULT_CHUNK

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "seed": self.seed,
            "distortion": list(self.distortion),
            "flagged_rows": [list(rows) for rows in self.flagged_rows],
            "schedule_a": self.schedule_a,
            "schedule_b": self.schedule_b,
            "chunk_size": self.chunk_size,
        }

    @classmethod
    def from_dict(cls, data: dict) -> TrainingMetadata:
        return cls(
            samples=int(data["samples"]),
            seed=data.get("seed"),
            distortion=[float(x) for x in data["distortion"]],
            flagged_rows=[[int(i) for i in rows] for rows in data.get("flagged_rows", [])],
            schedule_a=float(data.get("schedule_a", 1.0)),
            schedule_b=float(data.get("schedule_b", 0.0)),
            chunk_size=int(data.get("chunk_size", DEFAULT_CHUNK)),
        )


@dataclass(eq=False)
class QuantizedChain:
    """
    Grids Gamma_0..Gamma_N with transition matrices P_1..P_N.

    ``transitions[n - 1]`` holds P_n, whose row i is the law of the stage-n
    projection given the stage-(n-1) projection i. ``labels`` carries the
    configuration hashes the grids were built for.
    """

    grids: list[Grid]
    transitions: list[np.ndarray]
    norm: WeightedNorm
    metadata: TrainingMetadata
    labels: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.transitions) != len(self.grids) - 1:
            raise InputError(f"{len(self.grids)} grids need {len(self.grids) - 1} transition matrices")
        for n, matrix in enumerate(self.transitions, start=1):
            shape = (self.grids[n - 1].size, self.grids[n].size)
            if matrix.shape != shape:
                raise InputError(f"Transition {n} has shape {matrix.shape}, expected {shape}")
            if np.any(np.abs(matrix.sum(axis=1) - 1.0) > WEIGHT_TOLERANCE):
                raise NumericalError(f"Transition {n} is not row-stochastic")

    @property
    def horizon(self) -> int:
        return len(self.grids) - 1

    @property
    def size(self) -> int:
        return max(grid.size for grid in self.grids)

    @property
    def dims(self) -> int:
        return self.norm.dims

    def transition(self, n: int) -> np.ndarray:
        if not 1 <= n <= self.horizon:
            raise InputError(f"Transition index {n} outside 1..{self.horizon}")
        return self.transitions[n - 1]

    def project(self, n: int, point) -> int:
        return nearest(self.grids[n], point, self.norm)


# --- SAMPLING ---
def trajectory_sampler(
    model: PdmpModel,
    horizon: int,
    initial: HybridState | Callable[[np.random.Generator], HybridState],
) -> ChainSampler:
    """Chain sampler built on ``simulate`` for models without a vectorized sampler."""

    def sample(runs: int, rng: np.random.Generator) -> np.ndarray:
        chains = []
        for _ in range(runs):
            z0 = initial(rng) if callable(initial) else initial
            chains.append(simulate(model, z0, horizon, rng).chain_array(pad_to=horizon))
        return np.stack(chains)

    return sample


def _chunk_plan(n_samples: int, chunk_size: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    sizes = [chunk_size] * (n_samples // chunk_size)
    if n_samples % chunk_size:
        sizes.append(n_samples % chunk_size)
    seeds = rng.integers(0, 2**63 - 1, size=len(sizes), dtype=np.int64)
    return [(size, int(seed)) for size, seed in zip(sizes, seeds)]


def _iter_chunks(sample_source, plan):
    """Yields sample chunks ``(size, N + 1, dims)``; arrays are sliced, samplers replayed."""
    if isinstance(sample_source, np.ndarray):
        start = 0
        for size, _ in plan:
            yield sample_source[start:start + size]
            start += size
        return
    for size, seed in plan:
        chunk = np.asarray(sample_source(size, np.random.default_rng(seed)), dtype=float)
        if chunk.ndim != 3 or chunk.shape[0] != size:
            raise InputError(f"Sampler returned shape {chunk.shape}, expected ({size}, N + 1, dims)")
        yield chunk


# --- OPERATIONS ---
def _stage_samples(pilot_samples) -> list[np.ndarray]:
    if isinstance(pilot_samples, np.ndarray):
        if pilot_samples.ndim == 3:
            return [pilot_samples[:, n, :] for n in range(pilot_samples.shape[1])]
        if pilot_samples.ndim == 2:
            return [pilot_samples]
        raise InputError(f"Pilot samples must be 2-D or 3-D, got shape {pilot_samples.shape}")
    return [np.atleast_2d(np.asarray(stage, dtype=float)) for stage in pilot_samples]


def estimate_scales(
    pilot_samples,
    discrete_columns: Sequence[int] = (),
    discrete_scale: float = DISCRETE_SCALE,
    min_per_stage: int = MIN_PILOT_PER_STAGE,
) -> WeightedNorm:
    """
    Pooled within-stage standard deviation of every coordinate.

    Args:
        pilot_samples: array ``(runs, stages, dims)``, a single stage ``(runs, dims)``
            or a sequence of per-stage arrays.
        discrete_columns: coordinates holding a discrete label (the mode); they get
            ``discrete_scale`` so that distinct labels are never merged.

    Returns:
        A WeightedNorm whose scales are floored at 1e-12.
    """
    stages = _stage_samples(pilot_samples)
    if not stages or all(stage.size == 0 for stage in stages):
        raise InputError("Pilot sample set is empty")
    for n, stage in enumerate(stages):
        if stage.shape[0] < min_per_stage:
            raise InputError(f"Stage {n} has {stage.shape[0]} pilot samples, at least {min_per_stage} needed")

    squares = sum(np.sum((stage - stage.mean(axis=0)) ** 2, axis=0) for stage in stages)
    dof = max(sum(stage.shape[0] for stage in stages) - len(stages), 1)
    scale = np.maximum(np.sqrt(squares / dof), SCALE_FLOOR)
    for column in discrete_columns:
        scale[column] = discrete_scale
    logger.debug(f"Estimated scales {scale.tolist()}")
    return WeightedNorm(tuple(scale))


def nearest(grid: Grid | np.ndarray, point, norm: WeightedNorm) -> int:
    """Index of the closest grid point; ties go to the lowest index."""
    points = grid.points if isinstance(grid, Grid) else np.atleast_2d(grid)
    point = np.asarray(point, dtype=float).reshape(-1)
    if point.shape[0] != points.shape[1]:
        raise InputError(f"Point has dimension {point.shape[0]}, grid has {points.shape[1]}")
    distances = np.sum(((points - point) / norm.array) ** 2, axis=1)
    return int(np.argmin(distances))


def project(points, grid_points, norm: WeightedNorm) -> tuple[np.ndarray, np.ndarray]:
    """
    Nearest grid index and squared weighted distance for every row of ``points``.

    Works in batches so the distance matrix stays bounded.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    grid_points = np.atleast_2d(np.asarray(grid_points, dtype=float))
    if points.shape[1] != grid_points.shape[1]:
        raise InputError(f"Points have dimension {points.shape[1]}, grid has {grid_points.shape[1]}")
    scaled_grid = norm.scaled(grid_points)
    batch = max(1, PROJECTION_CELLS // grid_points.shape[0])
    index = np.empty(points.shape[0], dtype=np.int64)
    squared = np.empty(points.shape[0])
    for start in range(0, points.shape[0], batch):
        block = cdist(norm.scaled(points[start:start + batch]), scaled_grid, metric="sqeuclidean")
        found = np.argmin(block, axis=1)
        index[start:start + batch] = found
        squared[start:start + batch] = block[np.arange(found.size), found]
    return index, squared


def distortion(grid: Grid | np.ndarray, norm: WeightedNorm, fresh_samples) -> float:
    """Root mean squared weighted distance from each sample to its projection."""
    points = grid.points if isinstance(grid, Grid) else grid
    samples = np.atleast_2d(np.asarray(fresh_samples, dtype=float))
    if samples.shape[0] < MIN_DISTORTION_SAMPLES:
        logger.warning(f"Distortion estimated from only {samples.shape[0]} samples")
    _, squared = project(samples, points, norm)
    return float(np.sqrt(squared.mean()))


class _ClvqStage:
    """Online CLVQ state of one stage: seeding from distinct samples, then gradient steps."""

    def __init__(self, stage: int, K: int, norm: WeightedNorm, schedule: StepSchedule):
        self.stage = stage
        self.K = K
        self.norm = norm
        self.schedule = schedule
        self.points: np.ndarray | None = None
        self._seeds: list[np.ndarray] = []
        self._seen: set[bytes] = set()
        self.steps = 0

    def feed(self, samples: np.ndarray) -> None:
        start = 0
        while self.points is None and start < samples.shape[0]:
            row = samples[start]
            key = row.tobytes()
            if key not in self._seen:
                self._seen.add(key)
                self._seeds.append(row.copy())
                if len(self._seeds) == self.K:
                    self.points = np.vstack(self._seeds)
                    self._seen.clear()
            start += 1
        if self.points is None:
            return

        rest = samples[start:]
        gains = self.schedule.gains(self.steps + 1, rest.shape[0], self.K)
        scale = self.norm.array
        points = self.points
        for xi, gain in zip(rest, gains):
            winner = int(np.argmin(np.sum(((points - xi) / scale) ** 2, axis=1)))
            points[winner] -= gain * (points[winner] - xi)
        self.steps += rest.shape[0]

    def finish(self) -> np.ndarray:
        if self.points is None:
            raise InputError(
                f"Stage {self.stage}: only {len(self._seeds)} distinct samples, {self.K} needed to seed the grid"
            )
        return self.points


def train(
    sample_source: ChainSampler | np.ndarray,
    K: int,
    N: int,
    schedule: StepSchedule | None = None,
    norm: WeightedNorm | None = None,
    rng: np.random.Generator | None = None,
    n_samples: int | None = None,
    chunk_size: int = DEFAULT_CHUNK,
    seed: int | None = None,
) -> QuantizedChain:
    """
    Trains N + 1 grids of K points and counts weights and transitions.

    Args:
        sample_source: either an array of realizations ``(runs, N + 1, dims)`` or a
            sampler ``(runs, rng) -> array``.
        K: grid size.
        N: horizon; grids Gamma_0..Gamma_N are produced.
        schedule: gain sequence, StepSchedule() by default.
        norm: weighted norm, unit scales by default.
        rng: generator seeding the sample chunks (sampler sources only).
        n_samples: number of realizations (sampler sources only).
        seed: recorded in the metadata.

    Returns:
        The QuantizedChain, immutable once built.
    """
    if K < 1:
        raise InputError(f"Grid size must be at least 1, got {K}")
    if N < 0:
        raise InputError(f"Horizon must be nonnegative, got {N}")
    schedule = schedule or StepSchedule()

    if isinstance(sample_source, np.ndarray):
        if sample_source.ndim != 3 or sample_source.shape[1] != N + 1:
            raise InputError(f"Samples must have shape (runs, {N + 1}, dims), got {sample_source.shape}")
        n_samples = sample_source.shape[0]
        plan = [(size, 0) for size, _ in _chunk_plan(n_samples, chunk_size, np.random.default_rng(0))]
    else:
        if n_samples is None or n_samples < 1:
            raise InputError("A sampler source needs a positive n_samples")
        plan = _chunk_plan(n_samples, chunk_size, rng if rng is not None else np.random.default_rng(seed))

    stages: list[_ClvqStage] | None = None
    logger.info(f"Training {N + 1} grids of {K} points on {n_samples} realizations")
    for chunk in _iter_chunks(sample_source, plan):
        if stages is None:
            norm = norm or WeightedNorm.unit(chunk.shape[2])
            if norm.dims != chunk.shape[2]:
                raise InputError(f"Norm has {norm.dims} scales, samples have {chunk.shape[2]} coordinates")
            stages = [_ClvqStage(n, K, norm, schedule) for n in range(N + 1)]
        if chunk.shape[1] != N + 1:
            raise InputError(f"Sampler returned {chunk.shape[1]} stages, expected {N + 1}")
        if not np.all(np.isfinite(chunk)):
            raise NumericalError("Non-finite values in the training samples")
        for n, stage in enumerate(stages):
            stage.feed(chunk[:, n, :])
    grid_points = [stage.finish() for stage in stages]

    # Second pass: frozen grids, counting.
    counts = [np.zeros(K) for _ in range(N + 1)]
    pair_counts = [np.zeros(K * K) for _ in range(N)]
    squared = np.zeros(N + 1)
    for chunk in _iter_chunks(sample_source, plan):
        previous = None
        for n in range(N + 1):
            index, dist2 = project(chunk[:, n, :], grid_points[n], norm)
            counts[n] += np.bincount(index, minlength=K)
            squared[n] += dist2.sum()
            if previous is not None:
                pair_counts[n - 1] += np.bincount(previous * K + index, minlength=K * K)
            previous = index

    grids = [Grid(n, grid_points[n], counts[n] / n_samples) for n in range(N + 1)]
    transitions, flagged = [], []
    for n in range(1, N + 1):
        matrix = pair_counts[n - 1].reshape(K, K)
        visits = matrix.sum(axis=1)
        empty = np.flatnonzero(visits == 0)
        matrix = np.divide(matrix, visits[:, None], out=np.full((K, K), 1.0 / K), where=visits[:, None] > 0)
        if empty.size:
            logger.warning(f"Stage {n - 1}: {empty.size} grid points never visited; uniform transition rows used")
        transitions.append(matrix)
        flagged.append(empty.tolist())

    rms = np.sqrt(squared / n_samples)
    for n, value in enumerate(rms):
        logger.debug(f"Stage {n} distortion {value:.6g}")
    metadata = TrainingMetadata(
        samples=n_samples,
        seed=seed,
        distortion=rms.tolist(),
        flagged_rows=flagged,
        schedule_a=schedule.a,
        schedule_b=schedule.offset(K),
        chunk_size=chunk_size,
    )
    return QuantizedChain(grids, transitions, norm, metadata)
