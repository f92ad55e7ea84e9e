"""
Monte Carlo study of single-item indicator identification
Population builder, Box-Muller sampling, factor alignment and the condition grid
"""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile
from scipy.optimize import linear_sum_assignment

from cache import MemoryCache, cached
from config import config
from errors import FactorAnalysisError, InputError
from extraction import ExtractionMethod, FitOptions, LoadingMatrix, fit
from matrix_kernel import MomentMode, SymMatrix, sample_moment_matrix
from rotation import Criterion, RotationMode, RotationOptions, rotate

logger = logging.getLogger(__name__)

BLOCK_SIZE = 10
SMALL_LOADING = 0.30
SMALL_PER_FACTOR = 2
DEFAULT_DELTAS = (0.05, 0.10)

STUDY_SL = (0.50, 0.60, 0.70, 0.80)
STUDY_Q = (2, 5, 8)
STUDY_N = (200, 400, 1000)


class Method(str, Enum):
    """Extraction method tag used in simulation results"""

    CFM = "cfm"
    SPFA = "spfa"

    @property
    def extraction(self) -> ExtractionMethod:
        return ExtractionMethod.MINRES if self is Method.CFM else ExtractionMethod.SPFA


# ==================== DATA MODELS ====================


@dataclass(frozen=True, order=True)
class Condition:
    """One cell of the design"""

    sl: float
    q: int
    n: int

    def seed_key(self) -> Tuple[int, int, int]:
        return (self.q, int(round(self.sl * 100)), self.n)


STUDY_GRID: Tuple[Condition, ...] = tuple(
    Condition(sl, q, n) for sl in STUDY_SL for q in STUDY_Q for n in STUDY_N
)


@dataclass(frozen=True)
class PopulationSpec:
    """Block population pattern with one salient loading per factor"""

    q: int
    sl: float
    loadings: LoadingMatrix
    salient_index: Tuple[int, ...]

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def uniqueness(self) -> np.ndarray:
        """Psi^2 = 1 - rowSums(L^2)"""
        return 1.0 - np.sum(self.loadings.values**2, axis=1)


class Congruence(NamedTuple):
    value: float
    degenerate: bool


@dataclass
class Alignment:
    """Sample columns matched to population factors"""

    permutation: np.ndarray  # sample column assigned to each population factor
    signs: np.ndarray
    congruence: np.ndarray
    pattern: LoadingMatrix


@dataclass
class ConditionResult:
    """Aggregated outcome of one condition x method x rotation cell"""

    sl: float
    q: int
    n: int
    method: str
    rotation: str
    replications: int
    mean_congruence: float
    hit_rates: Dict[float, float]
    failures: int = 0
    congruence_se: float = float("nan")
    hit_se: Dict[float, float] = field(default_factory=dict)

    @property
    def hit_rate_05(self) -> float:
        return self.hit_rates.get(0.05, float("nan"))

    @property
    def hit_rate_10(self) -> float:
        return self.hit_rates.get(0.10, float("nan"))

    @property
    def sort_key(self) -> Tuple[float, int, int, str, str]:
        return (self.sl, self.q, self.n, self.method, self.rotation)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["hit_rates"] = {f"{k:.2f}": v for k, v in self.hit_rates.items()}
        data["hit_se"] = {f"{k:.2f}": v for k, v in self.hit_se.items()}
        return data


@dataclass
class SimulationConfig:
    """Grid definition, from flags or a flat key-value file"""

    sl_list: List[float] = field(default_factory=lambda: list(STUDY_SL))
    q_list: List[int] = field(default_factory=lambda: list(STUDY_Q))
    n_list: List[int] = field(default_factory=lambda: list(STUDY_N))
    replications: int = config.REPLICATIONS
    methods: List[str] = field(default_factory=lambda: [m.value for m in Method])
    rotations: List[str] = field(default_factory=lambda: [Criterion.VARIMAX.value])
    delta_list: List[float] = field(default_factory=lambda: list(DEFAULT_DELTAS))
    seed: int = config.SEED
    threads: int = config.THREADS

    def conditions(self) -> List[Condition]:
        return [
            Condition(float(sl), int(q), int(n))
            for sl, q, n in itertools.product(self.sl_list, self.q_list, self.n_list)
        ]

    def validate(self) -> None:
        """Raise one InputError naming every offending key"""
        errors = []
        if not self.sl_list or any(not 0.0 < sl < 1.0 for sl in self.sl_list):
            errors.append("sl_list: salient loadings must lie in (0, 1)")
        if not self.q_list or any(q < 1 for q in self.q_list):
            errors.append("q_list: factor counts must be at least 1")
        if not self.n_list or any(n < 2 for n in self.n_list):
            errors.append("n_list: sample sizes must be at least 2")
        if self.replications < 1:
            errors.append("replications: must be at least 1")
        if not self.methods or any(m not in {x.value for x in Method} for m in self.methods):
            errors.append("methods: choose from cfm, spfa")
        if not self.rotations or any(r not in {x.value for x in Criterion} for r in self.rotations):
            errors.append("rotations: choose from varimax, parsimax, infomax, target")
        if not self.delta_list or any(d <= 0.0 for d in self.delta_list):
            errors.append("delta_list: margins must be positive")
        if self.threads < 1:
            errors.append("threads: must be at least 1")
        if errors:
            raise InputError(f"invalid simulation settings: {'; '.join(errors)}")


_LIST_KEYS = {
    "sl_list": float,
    "q_list": int,
    "n_list": int,
    "methods": str,
    "rotations": str,
    "delta_list": float,
}
_SCALAR_KEYS = {"replications": int, "seed": int, "threads": int}


def load_simulation_config(path: Union[str, Path]) -> SimulationConfig:
    """
    Parse a flat key-value file

    One `key = value` per line, `#` starts a comment, list values are
    comma-separated. Unknown keys are errors.
    """
    values: Dict[str, Any] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InputError(f"cannot read simulation config {path}: {e}") from e

    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _LIST_KEYS and key not in _SCALAR_KEYS:
            raise InputError(f"{path}:{lineno}: unknown key '{key}'")
        try:
            if key in _LIST_KEYS:
                convert = _LIST_KEYS[key]
                values[key] = [convert(v.strip()) for v in value.split(",") if v.strip()]
            else:
                values[key] = _SCALAR_KEYS[key](value)
        except ValueError as e:
            raise InputError(f"{path}:{lineno}: bad value for '{key}': {value}") from e

    settings = SimulationConfig(**values)
    settings.validate()
    return settings


# ==================== POPULATION ====================


@cached(key_prefix="population", cache=MemoryCache(max_size=config.CACHE_SIZE))
def build_population(q: int, sl: float) -> PopulationSpec:
    """
    Factor j owns variables 10j..10j+9: sl on the first, .30 on the next two,
    zeros elsewhere
    """
    if q < 1:
        raise InputError(f"q must be at least 1, got {q}")
    if not 0.0 < sl < 1.0:
        raise InputError(f"salient loading must lie in (0, 1), got {sl}")
    if sl <= SMALL_LOADING:
        logger.warning(f"salient loading {sl} does not exceed the small loadings ({SMALL_LOADING})")

    p = BLOCK_SIZE * q
    lam = np.zeros((p, q))
    salient = []
    for j in range(q):
        first = BLOCK_SIZE * j
        lam[first, j] = sl
        lam[first + 1 : first + 1 + SMALL_PER_FACTOR, j] = SMALL_LOADING
        salient.append(first)

    return PopulationSpec(q=q, sl=sl, loadings=LoadingMatrix(lam), salient_index=tuple(salient))


@cached(key_prefix="population_moment", cache=MemoryCache(max_size=config.CACHE_SIZE))
def _population_moment(q: int, sl: float) -> SymMatrix:
    spec = build_population(q, sl)
    lam = spec.loadings.values
    sigma = lam @ lam.T + np.diag(spec.uniqueness)
    return SymMatrix(sigma, labels=spec.loadings.rows, mode=MomentMode.CORRELATION)


def population_moment(spec: PopulationSpec) -> SymMatrix:
    """Sigma = LL' + Psi^2 (unit diagonal), shared per (q, sl)"""
    return _population_moment(spec.q, spec.sl)


# ==================== SAMPLING ====================


def box_muller(rng: np.random.Generator, size: Union[int, Tuple[int, ...]]) -> np.ndarray:
    """Standard normal deviates by the trigonometric Box-Muller transform"""
    shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
    count = int(np.prod(shape))
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(2.0 * np.pi * u2)
    z[1::2] = radius * np.sin(2.0 * np.pi * u2)
    return z[:count].reshape(shape)


def replication_seed(
    base_seed: int, condition: Condition, replication: int
) -> np.random.SeedSequence:
    """Seed shared by every method and rotation analysing one replication"""
    return np.random.SeedSequence([int(base_seed), *condition.seed_key(), int(replication)])


def generate_sample(
    spec: PopulationSpec,
    n: int,
    seed: Union[int, np.random.SeedSequence],
    return_factors: bool = False,
):
    """
    x = Lf + Psi u rowwise with f and u standard normal

    Returns the n x p data matrix, or (data, factor scores) when return_factors.
    """
    if n < 2:
        raise InputError(f"sample size must be at least 2, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    lam = spec.loadings.values
    psi = np.sqrt(spec.uniqueness)
    factors = box_muller(rng, (n, spec.q))
    unique = box_muller(rng, (n, spec.p))
    data = factors @ lam.T + unique * psi
    if return_factors:
        return data, factors
    return data


# ==================== ALIGNMENT AND SCORING ====================


def tucker_congruence(a: Sequence[float], b: Sequence[float]) -> Congruence:
    """Sum(a*b) / sqrt(Sum(a^2) * Sum(b^2)); zero vectors give 0 flagged degenerate"""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InputError(f"congruence needs equal lengths, got {a.size} and {b.size}")
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0.0:
        return Congruence(0.0, True)
    return Congruence(float(np.clip(np.dot(a, b) / denom, -1.0, 1.0)), False)


def congruence_matrix(sample: np.ndarray, population: np.ndarray) -> np.ndarray:
    """Entry (j, k): congruence of population column j with sample column k"""
    q = population.shape[1]
    out = np.zeros((q, sample.shape[1]))
    for j in range(q):
        for k in range(sample.shape[1]):
            out[j, k] = tucker_congruence(population[:, j], sample[:, k]).value
    return out


def align_to_population(
    sample_pattern: Union[LoadingMatrix, np.ndarray],
    spec: Union[PopulationSpec, LoadingMatrix, np.ndarray],
) -> Alignment:
    """
    One-to-one column matching maximizing the summed absolute congruence,
    then signs flipped so every matched congruence is nonnegative
    """
    if isinstance(sample_pattern, LoadingMatrix):
        sample = sample_pattern
    else:
        sample = LoadingMatrix(sample_pattern)
    if isinstance(spec, PopulationSpec):
        population = spec.loadings.values
    else:
        population = np.asarray(spec, dtype=float)
    if sample.shape != population.shape:
        raise InputError(f"sample pattern {sample.shape} and population {population.shape} differ")

    C = congruence_matrix(sample.values, population)
    rows, cols = linear_sum_assignment(-np.abs(C))
    permutation = cols[np.argsort(rows)]
    matched = C[np.arange(C.shape[0]), permutation]
    signs = np.where(matched < 0.0, -1.0, 1.0)

    aligned = sample.values[:, permutation] * signs
    return Alignment(
        permutation=permutation,
        signs=signs,
        congruence=matched * signs,
        pattern=LoadingMatrix(aligned, rows=sample.rows),
    )


def single_item_hit(
    aligned_pattern: Union[LoadingMatrix, np.ndarray],
    spec: PopulationSpec,
    delta: float,
) -> np.ndarray:
    """
    Per-factor hit flags: the salient variable's absolute loading must exceed
    every other loading in its column and in its row by at least delta
    """
    L = np.abs(np.asarray(aligned_pattern, dtype=float))
    hits = np.zeros(spec.q, dtype=bool)
    slack = delta - 1e-12
    for j, i in enumerate(spec.salient_index):
        own = L[i, j]
        column_rest = np.delete(L[:, j], i)
        row_rest = np.delete(L[i, :], j)
        column_ok = own - column_rest.max(initial=0.0) >= slack
        row_ok = row_rest.size == 0 or own - row_rest.max() >= slack
        hits[j] = column_ok and row_ok
    return hits


# ==================== GRID ====================


@dataclass
class ReplicationTask:
    """Picklable unit of work for the process pool"""

    condition: Condition
    replication: int
    base_seed: int
    methods: Tuple[str, ...]
    rotations: Tuple[str, ...]
    deltas: Tuple[float, ...]
    mode: str
    rotation_starts: int
    fit_options: FitOptions


@dataclass
class CellOutcome:
    congruence: Optional[np.ndarray]
    hits: Dict[float, np.ndarray]
    failed: bool
    not_converged: bool = False


@dataclass
class ReplicationOutcome:
    condition: Condition
    replication: int
    cells: Dict[Tuple[str, str], CellOutcome]
    elapsed: float


def run_replication(task: ReplicationTask) -> ReplicationOutcome:
    """Generate one sample and analyse it with every method and rotation"""
    started = time.perf_counter()
    cond = task.condition
    spec = build_population(cond.q, cond.sl)
    seed = replication_seed(task.base_seed, cond, task.replication)
    data = generate_sample(spec, cond.n, seed)
    rotation_seed = int(seed.generate_state(1)[0])

    cells: Dict[Tuple[str, str], CellOutcome] = {}
    try:
        S = sample_moment_matrix(data, MomentMode.CORRELATION)
    except FactorAnalysisError as e:
        logger.warning(f"{cond} replication {task.replication}: {e}")
        for key in itertools.product(task.methods, task.rotations):
            cells[key] = CellOutcome(congruence=None, hits={}, failed=True)
        return ReplicationOutcome(cond, task.replication, cells, time.perf_counter() - started)

    for method in task.methods:
        try:
            solution = fit(S, cond.q, Method(method).extraction, task.fit_options)
        except FactorAnalysisError as e:
            logger.warning(f"{cond} replication {task.replication} {method}: {e}")
            for rotation in task.rotations:
                cells[(method, rotation)] = CellOutcome(congruence=None, hits={}, failed=True)
            continue

        for rotation in task.rotations:
            criterion = Criterion(rotation)
            opts = RotationOptions(starts=task.rotation_starts, seed=rotation_seed)
            try:
                rotated = rotate(
                    solution.loadings,
                    criterion,
                    task.mode,
                    target=spec.loadings.values if criterion == Criterion.TARGET else None,
                    opts=opts,
                )
            except FactorAnalysisError as e:
                logger.warning(f"{cond} replication {task.replication} {method}/{rotation}: {e}")
                cells[(method, rotation)] = CellOutcome(congruence=None, hits={}, failed=True)
                continue

            aligned = align_to_population(rotated.pattern, spec)
            hits = {d: single_item_hit(aligned.pattern, spec, d) for d in task.deltas}
            cells[(method, rotation)] = CellOutcome(
                congruence=aligned.congruence,
                hits=hits,
                failed=False,
                not_converged=not (solution.converged and rotated.converged),
            )

    return ReplicationOutcome(cond, task.replication, cells, time.perf_counter() - started)


class GridMetrics:
    """Prometheus counters for one simulation run"""

    def __init__(self):
        self.registry = CollectorRegistry()
        self.replications = Counter(
            "spfa_replications",
            "Replications analysed",
            ["method"],
            registry=self.registry,
        )
        self.failures = Counter(
            "spfa_fit_failures",
            "Failed or non-converged analyses",
            ["method"],
            registry=self.registry,
        )
        self.seconds = Histogram(
            "spfa_replication_seconds",
            "Wall time per replication",
            registry=self.registry,
        )

    def record(self, outcome: ReplicationOutcome) -> None:
        self.seconds.observe(outcome.elapsed)
        for (method, _), cell in outcome.cells.items():
            self.replications.labels(method=method).inc()
            if cell.failed or cell.not_converged:
                self.failures.labels(method=method).inc()

    def write(self, path: Union[str, Path]) -> None:
        write_to_textfile(str(path), self.registry)
        logger.info(f"Metrics written to {path}")


def _aggregate(
    cond: Condition,
    method: str,
    rotation: str,
    outcomes: List[ReplicationOutcome],
    deltas: Sequence[float],
) -> ConditionResult:
    cells = [o.cells[(method, rotation)] for o in outcomes]
    usable = [c for c in cells if not c.failed]
    failures = sum(1 for c in cells if c.failed or c.not_converged)

    if not usable:
        return ConditionResult(
            sl=cond.sl,
            q=cond.q,
            n=cond.n,
            method=method,
            rotation=rotation,
            replications=len(cells),
            mean_congruence=float("nan"),
            hit_rates={d: float("nan") for d in deltas},
            failures=failures,
            hit_se={d: float("nan") for d in deltas},
        )

    congruence = np.concatenate([c.congruence for c in usable])
    per_replication = np.array([c.congruence.mean() for c in usable])
    congruence_se = (
        float(per_replication.std(ddof=1) / np.sqrt(per_replication.size))
        if per_replication.size > 1
        else float("nan")
    )

    instances = cond.q * len(usable)
    hit_rates: Dict[float, float] = {}
    hit_se: Dict[float, float] = {}
    for d in deltas:
        share = sum(int(c.hits[d].sum()) for c in usable) / instances
        hit_rates[d] = 100.0 * share
        hit_se[d] = 100.0 * float(np.sqrt(share * (1.0 - share) / instances))

    return ConditionResult(
        sl=cond.sl,
        q=cond.q,
        n=cond.n,
        method=method,
        rotation=rotation,
        replications=len(cells),
        mean_congruence=float(congruence.mean()),
        hit_rates=hit_rates,
        failures=failures,
        congruence_se=congruence_se,
        hit_se=hit_se,
    )


def run_grid(
    conditions: Sequence[Union[Condition, Tuple[float, int, int]]],
    replications: int = config.REPLICATIONS,
    methods: Sequence[str] = ("cfm", "spfa"),
    rotations: Sequence[str] = ("varimax",),
    base_seed: int = config.SEED,
    threads: int = 1,
    deltas: Sequence[float] = DEFAULT_DELTAS,
    mode: Union[RotationMode, str] = RotationMode.ORTHOGONAL,
    rotation_starts: int = config.ROTATION_STARTS,
    fit_options: Optional[FitOptions] = None,
    metrics_path: Optional[Union[str, Path]] = None,
    progress: Optional[Callable[[ConditionResult], None]] = None,
) -> List[ConditionResult]:
    """
    Run every condition x method x rotation cell

    Replication r of a condition uses a seed derived from (base_seed, condition, r),
    so all methods and rotations analyse identical data. Work is distributed
    over `threads` processes; results are reduced in (condition, replication)
    order and do not depend on the degree of parallelism.
    """
    conds = [
        c if isinstance(c, Condition) else Condition(float(c[0]), int(c[1]), int(c[2]))
        for c in conditions
    ]
    settings = SimulationConfig(
        sl_list=sorted({c.sl for c in conds}),
        q_list=sorted({c.q for c in conds}),
        n_list=sorted({c.n for c in conds}),
        replications=replications,
        methods=list(methods),
        rotations=list(rotations),
        delta_list=list(deltas),
        seed=base_seed,
        threads=threads,
    )
    if not conds:
        raise InputError("no conditions to simulate")
    settings.validate()
    mode = RotationMode(mode)
    fit_options = fit_options or FitOptions()

    tasks = [
        ReplicationTask(
            condition=cond,
            replication=r,
            base_seed=base_seed,
            methods=tuple(methods),
            rotations=tuple(rotations),
            deltas=tuple(deltas),
            mode=mode.value,
            rotation_starts=rotation_starts,
            fit_options=fit_options,
        )
        for cond in conds
        for r in range(replications)
    ]
    logger.info(
        f"Simulating {len(conds)} conditions x {replications} replications "
        f"({', '.join(methods)}; {', '.join(rotations)}) on {threads} worker(s)"
    )

    metrics = GridMetrics()
    results: List[ConditionResult] = []
    started = time.perf_counter()

    def reduce(outcomes: List[ReplicationOutcome]) -> None:
        cond = outcomes[0].condition
        for method in methods:
            for rotation in rotations:
                result = _aggregate(cond, method, rotation, outcomes, deltas)
                results.append(result)
                logger.info(
                    f"sl={cond.sl:.2f} q={cond.q} n={cond.n} {method}/{rotation}: "
                    f"congruence={result.mean_congruence:.4f} "
                    f"hit05={result.hit_rate_05:.2f} hit10={result.hit_rate_10:.2f} "
                    f"failures={result.failures}"
                )
                if progress:
                    progress(result)

    def consume(stream) -> None:
        pending: List[ReplicationOutcome] = []
        for outcome in stream:
            metrics.record(outcome)
            pending.append(outcome)
            if len(pending) == replications:
                reduce(pending)
                pending = []

    if threads == 1:
        consume(map(run_replication, tasks))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            consume(pool.map(run_replication, tasks, chunksize=max(1, replications // threads)))

    logger.info(
        f"Grid finished in {time.perf_counter() - started:.1f}s; "
        f"population cache {build_population._cache.get_stats()['hit_rate']:.0f}% hits"
    )
    path = metrics_path if metrics_path is not None else config.METRICS_PATH
    if path:
        metrics.write(path)

    results.sort(key=lambda r: r.sort_key)
    return results
