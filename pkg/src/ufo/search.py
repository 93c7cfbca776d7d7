"""Rank-based multi-task architecture search.

Architectures are scored per task, converted to per-task ranks over the
feasible candidates, and combined as

    objective(a) = lam * sum_{t in targets} r_t(a) + (1 - lam) * sum_{t not in targets} r_t(a)

The search loop alternates between measuring a quota of candidates, fitting
per-task predictors and checking them on a hash-selected holdout, and finally
picks the minimum-objective feasible candidate (ties: smallest encoding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import predictor as pr
from .arch_space import Architecture, CostReport, Gate, SearchSpace, cost
from .objectives import average_ranks

MEASURED = "measured"
PREDICTED = "predicted"


@dataclass(frozen=True)
class SearchBudget:
    targets: tuple[int, ...]
    lam: float | None = None
    max_flops: float = math.inf
    max_params: float = math.inf
    flops_frac: float | None = None
    params_frac: float | None = None
    iterations: int = 5
    threshold: float | tuple[float, ...] = pr.DEFAULT_THRESHOLD
    quota: int = 50
    subset_size: int = 2000
    holdout_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(sorted(set(int(t) for t in self.targets))))
        if not self.targets:
            raise ValueError("target task set must be non-empty")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.iterations < 1 or self.quota < 1:
            raise ValueError("iterations and quota must be >= 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout fraction must lie in (0, 1)")

    def weight(self, num_tasks: int) -> float:
        return 1.0 / num_tasks if self.lam is None else self.lam

    def thresholds(self, num_tasks: int) -> tuple[float, ...]:
        if isinstance(self.threshold, (int, float)):
            return (float(self.threshold),) * num_tasks
        if len(self.threshold) != num_tasks:
            raise ValueError("need one readiness threshold per task")
        return tuple(float(x) for x in self.threshold)

    def limits(self, space: SearchSpace) -> tuple[float, float]:
        """Absolute (flops, params) caps; fractions refer to the max arch trimmed for the targets."""
        flops, params = self.max_flops, self.max_params
        if self.flops_frac is not None or self.params_frac is not None:
            ref = cost(space.max_arch(Gate.BOTH), space, tasks=self.targets)
            if self.flops_frac is not None:
                flops = min(flops, self.flops_frac * ref.flops)
            if self.params_frac is not None:
                params = min(params, self.params_frac * ref.params)
        return flops, params

    def to_dict(self) -> dict:
        return {
            "targets": list(self.targets),
            "lambda": self.lam,
            "max_flops": _json_num(self.max_flops),
            "max_params": _json_num(self.max_params),
            "flops_frac": self.flops_frac,
            "params_frac": self.params_frac,
            "iterations": self.iterations,
            "threshold": self.threshold if isinstance(self.threshold, (int, float)) else list(self.threshold),
            "quota": self.quota,
            "subset_size": self.subset_size,
            "holdout_fraction": self.holdout_fraction,
        }


def _json_num(x: float):
    return None if math.isinf(x) else x


# ---------------------------------------------------------------------------
# objectives


def _split_sum(values: Sequence[float], targets: Sequence[int], lam: float) -> float:
    tset = set(targets)
    on = sum(float(values[t]) for t in range(len(values)) if t in tset)
    off = sum(float(values[t]) for t in range(len(values)) if t not in tset)
    return lam * on + (1.0 - lam) * off


def avg_perf(scores: Sequence[float], targets: Sequence[int], lam: float) -> float:
    """Weighted performance: ``lam`` on the target set, ``1 - lam`` on the rest."""
    if any(s is None or not np.isfinite(s) for s in scores):
        raise ValueError("avg_perf needs a score for every task")
    return _split_sum(scores, targets, lam)


def avg_rank_objective(ranks: Sequence[float], targets: Sequence[int], lam: float) -> float:
    """Weighted rank sum to minimize."""
    return _split_sum(ranks, targets, lam)


# ---------------------------------------------------------------------------
# tables


@dataclass
class PerfTable:
    """Candidate set with per-task scores and provenance flags."""

    archs: list[Architecture]
    scores: np.ndarray
    provenance: np.ndarray

    @classmethod
    def measured(cls, archs: Sequence[Architecture], scores) -> PerfTable:
        s = np.asarray(scores, dtype=np.float64)
        if s.ndim != 2 or len(s) != len(archs):
            raise ValueError("scores must be (num_archs, num_tasks)")
        return cls(list(archs), s, np.full(s.shape, MEASURED, dtype=object))

    @property
    def num_tasks(self) -> int:
        return self.scores.shape[1]

    def encodings(self) -> list[str]:
        return [a.encode() for a in self.archs]

    def ranks(self, rows: Sequence[int] | None = None) -> np.ndarray:
        """Rank columns over ``rows`` (all rows by default); rank 1 = best score."""
        idx = np.arange(len(self.archs)) if rows is None else np.asarray(rows, dtype=np.int64)
        out = np.zeros((len(idx), self.num_tasks))
        for t in range(self.num_tasks):
            out[:, t] = average_ranks(self.scores[idx, t])
        return out

    def provenance_summary(self) -> dict[str, int]:
        vals, counts = np.unique(self.provenance.astype(str), return_counts=True)
        return {str(v): int(c) for v, c in zip(vals, counts)}


def arch_cost(arch: Architecture, space: SearchSpace, targets: Sequence[int]) -> CostReport:
    return cost(arch, space, tasks=targets)


def filter_constraints(archs: Sequence[Architecture], budget: SearchBudget, space: SearchSpace) -> list[int]:
    """Indices of archs whose target-trimmed flops and params fit the budget."""
    max_flops, max_params = budget.limits(space)
    keep = []
    for i, a in enumerate(archs):
        rep = arch_cost(a, space, budget.targets)
        if rep.flops <= max_flops and rep.params <= max_params:
            keep.append(i)
    return keep


@dataclass(frozen=True)
class Relaxation:
    """Smallest uniform scaling of both caps that admits at least one candidate."""

    factor: float
    max_flops: float
    max_params: float
    arch: str


def nearest_feasible(archs: Sequence[Architecture], budget: SearchBudget, space: SearchSpace) -> Relaxation | None:
    if not archs:
        return None
    max_flops, max_params = budget.limits(space)
    best = None
    for a in archs:
        rep = arch_cost(a, space, budget.targets)
        ratios = [rep.flops / max_flops if max_flops > 0 else math.inf, rep.params / max_params if max_params > 0 else math.inf]
        need = max(ratios)
        key = (need, rep.flops, rep.params, a.encode())
        if best is None or key < best[0]:
            best = (key, rep)
    (need, _, _, enc), rep = best
    return Relaxation(need, float(rep.flops), float(rep.params), enc)


def _argmin_objective(table: PerfTable, rows: Sequence[int], targets: Sequence[int], lam: float) -> tuple[int, float]:
    ranks = table.ranks(rows)
    best_row, best_key = -1, None
    for k, row in enumerate(rows):
        obj = avg_rank_objective(ranks[k], targets, lam)
        key = (obj, table.archs[row].encode())
        if best_key is None or key < best_key:
            best_row, best_key = row, key
    return best_row, best_key[0]


def _pairwise_ranks(col: np.ndarray) -> np.ndarray:
    """Average ranks by direct pair counting (best = 1)."""
    n = len(col)
    out = np.empty(n)
    for i in range(n):
        better = sum(1 for j in range(n) if col[j] > col[i])
        tied = sum(1 for j in range(n) if j != i and col[j] == col[i])
        out[i] = 1.0 + better + 0.5 * tied
    return out


@dataclass
class SearchOutcome:
    best: Architecture | None
    objective: float | None
    feasible: int
    relaxation: Relaxation | None = None


def brute_force_best(table: PerfTable, budget: SearchBudget, space: SearchSpace) -> SearchOutcome:
    """Exhaustive ORP solution on a fully measured table (verification oracle)."""
    if np.isnan(table.scores).any():
        raise ValueError("brute_force_best needs every cell measured")
    rows = filter_constraints(table.archs, budget, space)
    if not rows:
        return SearchOutcome(None, None, 0, nearest_feasible(table.archs, budget, space))
    lam = budget.weight(table.num_tasks)
    sub = table.scores[rows]
    ranks = np.stack([_pairwise_ranks(sub[:, t]) for t in range(table.num_tasks)], axis=1)
    objs = [avg_rank_objective(ranks[k], budget.targets, lam) for k in range(len(rows))]
    best = min(range(len(rows)), key=lambda k: (objs[k], table.archs[rows[k]].encode()))
    return SearchOutcome(table.archs[rows[best]], objs[best], len(rows))


# ---------------------------------------------------------------------------
# search loop


class Harness(Protocol):
    def __call__(self, arch: Architecture) -> Sequence[float]: ...


@dataclass
class IterationRecord:
    iteration: int
    sampled: list[int]
    evaluated: int
    kd: list[float | None]
    ready: list[bool]

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "sampled": self.sampled,
            "evaluated": self.evaluated,
            "kd": self.kd,
            "ready": self.ready,
        }


@dataclass
class SearchResult:
    best: Architecture | None
    objective: float | None
    table: PerfTable
    feasible: int
    audit: list[IterationRecord]
    budget: SearchBudget
    cost_report: CostReport | None = None
    relaxation: Relaxation | None = None
    predictors: list = field(default_factory=list)

    def to_report(self, space: SearchSpace, task_names: Sequence[str] | None = None) -> dict:
        names = list(task_names) if task_names else [f"t{t}" for t in range(self.table.num_tasks)]
        out = {
            "budget": self.budget.to_dict(),
            "limits": [_json_num(x) for x in self.budget.limits(space)],
            "tasks": names,
            "iterations": [r.to_dict() for r in self.audit],
            "chosen": self.best.encode() if self.best is not None else None,
            "objective": self.objective,
            "feasible": self.feasible,
            "cost": self.cost_report.to_dict() if self.cost_report is not None else None,
            "provenance": self.table.provenance_summary(),
        }
        if self.best is not None:
            row = self.table.encodings().index(self.best.encode())
            out["chosen_scores"] = {
                names[t]: {"score": float(self.table.scores[row, t]), "source": str(self.table.provenance[row, t])}
                for t in range(self.table.num_tasks)
            }
        if self.relaxation is not None:
            r = self.relaxation
            out["relaxation"] = {"factor": r.factor, "max_flops": r.max_flops, "max_params": r.max_params, "arch": r.arch}
        return out


def msa(
    candidates: Sequence[Architecture],
    harness: Callable[[Architecture], Sequence[float]],
    budget: SearchBudget,
    space: SearchSpace,
    seed: int = 0,
    oracle: bool = False,
    measured: dict[str, Sequence[float]] | None = None,
    alpha2: float = pr.DEFAULT_ALPHA2,
    sigma2: float = pr.DEFAULT_SIGMA2,
) -> SearchResult:
    """Iterative measure / fit / check loop, then ORP argmin over the candidates.

    ``measured`` pre-seeds ground-truth scores keyed by encoding (e.g. an
    existing benchmark table). In ``oracle`` mode every unmeasured cell is
    filled from the harness instead of a predictor.
    """
    archs = list(candidates)
    encs = [a.encode() for a in archs]
    if len(set(encs)) != len(encs):
        raise ValueError("candidate set contains duplicate architectures")
    if len(archs) < budget.quota:
        raise ValueError(f"candidate set ({len(archs)}) smaller than the per-iteration quota ({budget.quota})")
    num_tasks = space.num_tasks
    if max(budget.targets) >= num_tasks:
        raise ValueError("target task outside the search space's task set")
    thre = budget.thresholds(num_tasks)
    rng = np.random.default_rng([seed, 3])

    truth: dict[int, np.ndarray] = {}
    pos = {e: i for i, e in enumerate(encs)}
    for enc, sc in (measured or {}).items():
        if enc in pos:
            truth[pos[enc]] = np.asarray(sc, dtype=np.float64)

    def measure(i: int) -> None:
        if i not in truth:
            sc = np.asarray(harness(archs[i]), dtype=np.float64)
            if sc.shape != (num_tasks,):
                raise ValueError(f"harness returned {sc.shape} scores, expected ({num_tasks},)")
            truth[i] = sc

    audit: list[IterationRecord] = []
    ready = [False] * num_tasks
    predictors: list = [None] * num_tasks
    holdout = [pr.is_holdout(e, budget.holdout_fraction) for e in encs]
    for n in range(1, budget.iterations + 1):
        pool = [i for i in range(len(archs)) if i not in truth]
        take = min(budget.quota, len(pool))
        sampled = sorted(int(i) for i in rng.choice(pool, size=take, replace=False)) if take else []
        for i in sampled:
            measure(i)
        kd: list[float | None] = []
        if oracle:
            kd = [1.0] * num_tasks
            ready = [True] * num_tasks
        else:
            done = sorted(truth)
            tr = [i for i in done if not holdout[i]]
            ho = [i for i in done if holdout[i]]
            for t in range(num_tasks):
                y_tr = [truth[i][t] for i in tr]
                try:
                    predictors[t] = pr.fit([archs[i] for i in tr], y_tr, t, space, alpha2, sigma2)
                except ValueError:
                    predictors[t] = None
                if predictors[t] is None or len(ho) < 2:
                    kd.append(None)
                    continue
                r = pr.readiness_from_scores(
                    pr.predict_many(predictors[t], [archs[i] for i in ho], space), [truth[i][t] for i in ho], thre[t]
                )
                kd.append(None if np.isnan(r.kd) else r.kd)
                ready[t] = ready[t] or r.ready
        audit.append(IterationRecord(n, sampled, len(truth), kd, list(ready)))
        if all(ready):
            break

    scores = np.full((len(archs), num_tasks), np.nan)
    prov = np.full((len(archs), num_tasks), PREDICTED, dtype=object)
    for i, sc in truth.items():
        scores[i] = sc
        prov[i] = MEASURED
    missing = [i for i in range(len(archs)) if i not in truth]
    if missing:
        if oracle:
            for i in missing:
                measure(i)
                scores[i] = truth[i]
                prov[i] = MEASURED
        else:
            for t in range(num_tasks):
                if predictors[t] is None:
                    raise ValueError(f"no predictor could be fitted for task {t}; measure more architectures")
                scores[missing, t] = pr.predict_many(predictors[t], [archs[i] for i in missing], space)
    table = PerfTable(archs, scores, prov)

    rows = filter_constraints(archs, budget, space)
    if not rows:
        return SearchResult(None, None, table, 0, audit, budget, relaxation=nearest_feasible(archs, budget, space), predictors=predictors)
    lam = budget.weight(num_tasks)
    best_row, obj = _argmin_objective(table, rows, budget.targets, lam)
    best = archs[best_row]
    return SearchResult(best, obj, table, len(rows), audit, budget, arch_cost(best, space, budget.targets), predictors=predictors)
