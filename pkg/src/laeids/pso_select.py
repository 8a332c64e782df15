"""Binary particle-swarm feature selection and the device-profile repository.

Positions are feature masks. Velocities follow the usual inertia /
cognitive / social update and each bit is resampled with probability
``sigmoid(v)``. After every epoch an advisor sees a summary of the swarm and
returns the parameters for the next epoch.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from laeids.classify import Tier, bits_to_mask, mask_to_bits, predict_batch, train_tier
from laeids.errors import DegenerateSplit, EmptyRepository, InvalidDimensions, SchemaMismatch

log = logging.getLogger(__name__)

W_RANGE = (0.0, 1.2)
C_RANGE = (0.0, 4.0)
REPOSITORY_VERSION = 1


@dataclass(frozen=True)
class PsoParams:
    w: float = 0.7
    c1: float = 1.5
    c2: float = 1.5
    v_max: float = 4.0

    def is_valid(self) -> bool:
        return (W_RANGE[0] <= self.w <= W_RANGE[1] and C_RANGE[0] <= self.c1 <= C_RANGE[1]
                and C_RANGE[0] <= self.c2 <= C_RANGE[1] and self.v_max > 0)

    def clamped(self) -> "PsoParams":
        clip = lambda v, lo, hi: float(min(max(v, lo), hi))
        return PsoParams(clip(self.w, *W_RANGE), clip(self.c1, *C_RANGE), clip(self.c2, *C_RANGE),
                         self.v_max if self.v_max > 0 else 4.0)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SwarmState:
    positions: np.ndarray  # (P, F) uint8
    velocities: np.ndarray
    fitness: np.ndarray  # fitness of the current positions
    pbest_positions: np.ndarray
    pbest_fitness: np.ndarray
    gbest_position: np.ndarray
    gbest_fitness: float
    rng: np.random.Generator
    v_max: float = 4.0
    epoch: int = 0
    epochs_since_improvement: int = 0
    mean_history: list = field(default_factory=list)

    def copy(self) -> "SwarmState":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class AdvisorSummary:
    epoch: int
    best_fitness: float
    mean_fitness: float
    population_diversity: float
    epochs_since_improvement: int
    params: PsoParams
    # consecutive epochs in which the mean fitness went down
    mean_decline_streak: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["params"] = self.params.to_json()
        return d


def _repair_empty(positions: np.ndarray, rng: np.random.Generator) -> None:
    for i in np.flatnonzero(positions.sum(axis=1) == 0):
        positions[i, rng.integers(positions.shape[1])] = 1


def _evaluate(positions, fitness_fn) -> np.ndarray:
    # index order keeps results identical to a sequential run
    return np.array([fitness_fn(row.astype(bool)) for row in positions], dtype=np.float64)


def init_swarm(P: int, F: int, seed, fitness_fn: Optional[Callable] = None, v_max: float = 4.0) -> SwarmState:
    if P < 2 or F < 1:
        raise InvalidDimensions(f"need P >= 2 and F >= 1, got P={P}, F={F}")
    rng = np.random.default_rng(seed)
    pos = (rng.random((P, F)) < 0.5).astype(np.uint8)
    empty = pos.sum(axis=1) == 0
    while empty.any():
        pos[empty] = (rng.random((int(empty.sum()), F)) < 0.5).astype(np.uint8)
        empty = pos.sum(axis=1) == 0
    vel = rng.uniform(-v_max, v_max, (P, F))
    fit = _evaluate(pos, fitness_fn) if fitness_fn is not None else np.full(P, -np.inf)
    g = int(np.argmax(fit))
    return SwarmState(pos, vel, fit, pos.copy(), fit.copy(), pos[g].copy(), float(fit[g]), rng, v_max)


def pso_step(state: SwarmState, params: PsoParams, fitness_fn: Callable) -> SwarmState:
    s = state.copy()
    P, F = s.positions.shape
    x = s.positions.astype(np.float64)
    r1 = s.rng.random((P, F))
    r2 = s.rng.random((P, F))
    v = (params.w * s.velocities + params.c1 * r1 * (s.pbest_positions - x)
         + params.c2 * r2 * (s.gbest_position[None, :] - x))
    s.v_max = params.v_max
    s.velocities = np.clip(v, -params.v_max, params.v_max)
    prob = 1.0 / (1.0 + np.exp(-s.velocities))
    s.positions = (s.rng.random((P, F)) < prob).astype(np.uint8)
    _repair_empty(s.positions, s.rng)
    s.fitness = _evaluate(s.positions, fitness_fn)

    better = s.fitness > s.pbest_fitness
    s.pbest_positions[better] = s.positions[better]
    s.pbest_fitness[better] = s.fitness[better]
    g = int(np.argmax(s.pbest_fitness))
    if s.pbest_fitness[g] > s.gbest_fitness:
        s.gbest_fitness = float(s.pbest_fitness[g])
        s.gbest_position = s.pbest_positions[g].copy()
        s.epochs_since_improvement = 0
    else:
        s.epochs_since_improvement += 1
    s.mean_history.append(float(s.fitness.mean()))
    s.epoch += 1
    return s


def population_diversity(positions) -> float:
    """Mean pairwise Hamming distance divided by the mask length."""
    pos = np.asarray(positions, dtype=np.int64)
    P, F = pos.shape
    if P < 2:
        return 0.0
    ones = pos.sum(axis=0)
    differing_pairs = float(np.sum(ones * (P - ones)))
    return differing_pairs / (P * (P - 1) / 2) / F


def summarize(state: SwarmState, params: PsoParams) -> AdvisorSummary:
    streak = 0
    h = state.mean_history
    while streak + 1 < len(h) and h[-1 - streak] < h[-2 - streak]:
        streak += 1
    return AdvisorSummary(
        epoch=state.epoch,
        best_fitness=float(state.gbest_fitness),
        mean_fitness=float(np.mean(state.fitness)),
        population_diversity=population_diversity(state.positions),
        epochs_since_improvement=state.epochs_since_improvement,
        params=params,
        mean_decline_streak=streak,
    )


@dataclass
class DatasetSplits:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    class_names: tuple = ()

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.X_train, self.y_train, self.X_val, self.y_val):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]


def stratified_split(X, y, val_fraction: float, seed, class_names=()) -> DatasetSplits:
    rng = np.random.default_rng(seed)
    y = np.asarray(y)
    val = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        k = int(round(val_fraction * idx.size))
        k = min(max(k, 1), idx.size - 1) if idx.size > 1 else 0
        val.extend(idx[:k])
    val_mask = np.zeros(y.size, dtype=bool)
    val_mask[val] = True
    return DatasetSplits(X[~val_mask], y[~val_mask], X[val_mask], y[val_mask], tuple(class_names))


class MaskFitness:
    """Validation accuracy of the LIGHT tier on masked features minus a density penalty.

    Results are memoised per mask, which keeps exhaustive checks and long
    swarm runs affordable.
    """

    def __init__(self, splits: DatasetSplits, penalty: float = 0.05, seed: int = 0, tier: Tier = Tier.LIGHT):
        present_train = set(np.unique(splits.y_train).tolist())
        present_val = set(np.unique(splits.y_val).tolist())
        if present_train != present_val or len(present_train) < 2:
            raise DegenerateSplit(f"train classes {sorted(present_train)} vs val classes {sorted(present_val)}")
        self.splits = splits
        self.penalty = penalty
        self.seed = seed
        self.tier = tier
        self.n_classes = max(len(splits.class_names), int(max(present_train)) + 1)
        self._cache: dict = {}

    def accuracy(self, mask) -> float:
        mask = np.asarray(mask, dtype=bool)
        key = mask.tobytes()
        if key not in self._cache:
            sp = self.splits
            names = sp.class_names or tuple(str(i) for i in range(self.n_classes))
            model = train_tier(self.tier, sp.X_train[:, mask], sp.y_train, class_names=names, seed=self.seed)
            pred = predict_batch(model, sp.X_val[:, mask]).argmax(axis=1)
            self._cache[key] = float(np.mean(pred == sp.y_val))
        return self._cache[key]

    def __call__(self, mask) -> float:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.splits.n_features,):
            raise InvalidDimensions(f"mask length {mask.size} != {self.splits.n_features}")
        if not mask.any():
            raise ValueError("mask selects no features")
        return self.accuracy(mask) - self.penalty * mask.sum() / mask.size


def fitness(mask, splits: DatasetSplits, penalty: float = 0.05, seed: int = 0) -> float:
    return MaskFitness(splits, penalty, seed)(mask)


@dataclass(frozen=True)
class SelectionConfig:
    particles: int = 20
    epochs: int = 30
    penalty: float = 0.05
    seed: int = 0
    params: PsoParams = PsoParams()

    def to_json(self) -> dict:
        d = asdict(self)
        d["params"] = self.params.to_json()
        return d


@dataclass
class EpochRecord:
    summary: AdvisorSummary
    params_used: PsoParams
    diagnosis: str
    source: str
    fallback_reason: Optional[str] = None

    def to_json(self) -> dict:
        return {"epoch": self.summary.epoch, "summary": self.summary.to_json(),
                "params_used": self.params_used.to_json(), "diagnosis": self.diagnosis,
                "source": self.source, "fallback_reason": self.fallback_reason}


@dataclass
class SelectionResult:
    mask: np.ndarray
    fitness: float
    log: list
    digest: str


def _consult(advisor, summary: AdvisorSummary):
    from laeids.advisor import rule_advise

    try:
        directive = advisor(summary)
        params = directive.new_params
        if not isinstance(params, PsoParams):
            raise TypeError(f"advisor returned {type(params).__name__}, not PsoParams")
        if not params.is_valid():
            directive = directive.with_params(params.clamped())
        return directive
    except Exception as exc:  # advisors must never abort a run
        log.warning("advisor failed at epoch %d: %s", summary.epoch, exc)
        fb = rule_advise(summary)
        return fb.as_fallback(f"{type(exc).__name__}: {exc}")


def run_selection(splits: Optional[DatasetSplits], cfg: SelectionConfig = SelectionConfig(), advisor=None,
                  fitness_fn: Optional[Callable] = None) -> SelectionResult:
    """Run binary PSO for ``cfg.epochs`` epochs, letting ``advisor`` retune parameters.

    ``advisor`` is a callable ``summary -> AdvisorDirective``; the rule table is
    used when it is None. ``fitness_fn`` overrides the default mask fitness.
    """
    from laeids.advisor import RuleAdvisor

    advisor = advisor if advisor is not None else RuleAdvisor()
    fitness_fn = fitness_fn or MaskFitness(splits, cfg.penalty, cfg.seed)
    F = splits.n_features if splits is not None else fitness_fn.splits.n_features
    params = cfg.params
    state = init_swarm(cfg.particles, F, cfg.seed, fitness_fn, params.v_max)
    records = []
    for _ in range(cfg.epochs):
        state = pso_step(state, params, fitness_fn)
        summary = summarize(state, params)
        directive = _consult(advisor, summary)
        records.append(EpochRecord(summary, params, directive.diagnosis.value, directive.source,
                                   directive.fallback_reason))
        params = directive.new_params
    mask = state.gbest_position.astype(bool)
    h = hashlib.sha256(json.dumps(cfg.to_json(), sort_keys=True).encode())
    if splits is not None:
        h.update(splits.digest().encode())
    h.update(mask_to_bits(mask).encode())
    h.update(repr(state.gbest_fitness).encode())
    for r in records:
        h.update(json.dumps(r.to_json(), sort_keys=True).encode())
    return SelectionResult(mask, float(state.gbest_fitness), records, h.hexdigest()[:16])


def exhaustive_optimum(fitness_fn: Callable, F: int):
    """Best mask by enumerating all 2**F - 1 non-empty masks (ties keep the first)."""
    best_mask, best = None, -np.inf
    for code in range(1, 2 ** F):
        mask = np.array([(code >> j) & 1 for j in range(F)], dtype=bool)
        f = fitness_fn(mask)
        if f > best:
            best, best_mask = f, mask
    return best_mask, best


@dataclass(frozen=True)
class DeviceProfile:
    device_class: str
    attributes: tuple
    schema_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(float(a) for a in self.attributes))
        if not all(np.isfinite(self.attributes)):
            raise ValueError("profile attributes must be finite")

    def to_json(self) -> dict:
        return {"device_class": self.device_class, "attributes": list(self.attributes), "schema": self.schema_name}

    @classmethod
    def from_json(cls, d: dict) -> "DeviceProfile":
        return cls(d["device_class"], tuple(d["attributes"]), d.get("schema", d.get("schema_name", "")))


@dataclass
class RepositoryEntry:
    entry_id: str
    profile: DeviceProfile
    mask: Optional[np.ndarray]
    fitness: float
    run_digest: str
    error: Optional[str] = None

    def to_json(self) -> dict:
        return {"id": self.entry_id, **self.profile.to_json(),
                "mask": mask_to_bits(self.mask) if self.mask is not None else None,
                "fitness": self.fitness, "run_digest": self.run_digest, "error": self.error}

    @classmethod
    def from_json(cls, d: dict) -> "RepositoryEntry":
        return cls(d["id"], DeviceProfile.from_json(d), bits_to_mask(d["mask"]) if d.get("mask") else None,
                   float(d["fitness"]) if d.get("fitness") is not None else float("nan"),
                   d.get("run_digest", ""), d.get("error"))


@dataclass
class KnowledgeRepository:
    schema_name: str
    n_features: int
    entries: list = field(default_factory=list)
    version: int = REPOSITORY_VERSION

    def usable(self) -> list:
        return [e for e in self.entries if e.error is None and e.mask is not None]

    def get(self, entry_id: str) -> RepositoryEntry:
        for e in self.entries:
            if e.entry_id == entry_id:
                return e
        raise KeyError(entry_id)

    def to_json(self) -> dict:
        return {"version": self.version, "schema": self.schema_name, "n_features": self.n_features,
                "entries": [e.to_json() for e in self.entries]}

    @classmethod
    def from_json(cls, d: dict) -> "KnowledgeRepository":
        if d.get("version") != REPOSITORY_VERSION:
            raise ValueError(f"unsupported repository version {d.get('version')}")
        return cls(d["schema"], int(d["n_features"]), [RepositoryEntry.from_json(e) for e in d["entries"]])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "KnowledgeRepository":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def build_repository(profiles: Sequence[DeviceProfile], datasets: Sequence[DatasetSplits],
                     cfg: SelectionConfig = SelectionConfig(), advisor=None, schema_name: str = "") -> KnowledgeRepository:
    """Run one selection per profile. Failed profiles are kept with an error marker."""
    if not profiles:
        raise EmptyRepository("no device profiles given")
    if len(profiles) != len(datasets):
        raise ValueError("one dataset per profile is required")
    repo = KnowledgeRepository(schema_name or profiles[0].schema_name, datasets[0].n_features)
    for i, (profile, splits) in enumerate(zip(profiles, datasets), start=1):
        eid = f"e{i}"
        try:
            res = run_selection(splits, cfg, advisor)
            repo.entries.append(RepositoryEntry(eid, profile, res.mask, res.fitness, res.digest))
        except Exception as exc:
            log.warning("selection for %s failed: %s", profile.device_class, exc)
            repo.entries.append(RepositoryEntry(eid, profile, None, float("nan"), "",
                                                f"{type(exc).__name__}: {exc}"))
    return repo


@dataclass(frozen=True)
class RepositoryMatch:
    mask: np.ndarray
    entry_id: str
    score: float
    via: str  # "exact", "similarity" or "advisor"


def similarity_ranking(repo: KnowledgeRepository, profile: DeviceProfile) -> list:
    """(entry, cosine similarity of z-scored attributes), best first; ties keep repository order."""
    usable = repo.usable()
    A = np.array([e.profile.attributes for e in usable], dtype=np.float64)
    mu = A.mean(axis=0)
    sd = A.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (A - mu) / sd
    q = (np.asarray(profile.attributes) - mu) / sd
    qn = np.linalg.norm(q)
    scores = []
    for z in Z:
        zn = np.linalg.norm(z)
        scores.append(float(z @ q / (zn * qn)) if zn > 0 and qn > 0 else 0.0)
    order = sorted(range(len(usable)), key=lambda i: (-scores[i], i))
    return [(usable[i], scores[i]) for i in order]


def query_repository(repo: KnowledgeRepository, profile: DeviceProfile, advisor=None) -> RepositoryMatch:
    """Exact device-class match first, else nearest profile; an advisor may override among the top 3."""
    usable = repo.usable()
    if not usable:
        raise EmptyRepository("repository has no usable entries")
    if profile.schema_name and repo.schema_name and profile.schema_name != repo.schema_name:
        raise SchemaMismatch(f"profile schema {profile.schema_name!r} vs repository {repo.schema_name!r}")
    if len(profile.attributes) != len(usable[0].profile.attributes):
        raise SchemaMismatch("profile attribute length differs from repository profiles")
    for e in usable:
        if e.profile.device_class == profile.device_class:
            return RepositoryMatch(e.mask.copy(), e.entry_id, 1.0, "exact")
    ranked = similarity_ranking(repo, profile)
    best, score = ranked[0]
    if advisor is not None and hasattr(advisor, "repository_pick"):
        top = ranked[:3]
        try:
            pick = advisor.repository_pick([e for e, _ in top], profile)
        except Exception as exc:
            log.warning("repository advisor failed: %s", exc)
            pick = None
        for e, s in top:
            if pick is not None and e.entry_id == pick:
                return RepositoryMatch(e.mask.copy(), e.entry_id, s, "advisor")
    return RepositoryMatch(best.mask.copy(), best.entry_id, score, "similarity")
