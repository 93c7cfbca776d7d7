"""Run-directory orchestration behind the command-line tool.

A run directory holds::

    config.json        resolved configuration (space, model, train, loss, search)
    supernet.ufob      trained weights, gate logits and supernet config
    train_log.jsonl    one record per training step
    manifest.json      config hash, seed, data checksum, versions, artifact index
    predictors/        per-task predictor checkpoints plus a summary

Every command is deterministic given its inputs and seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autograd as ag
from . import predictor as pr
from . import task_gen
from .arch_space import Architecture, Gate, LayerChoice, SearchSpace, cost, decode
from .bench import BenchColumn, BenchRow, BenchTable, export_bench, import_bench
from .objectives import LossConfig
from .search import SearchBudget, SearchResult, msa
from .supernet import GateState, SupernetConfig, SupernetParams, extract_subnet
from .task_gen import TaskDatasets
from .trainer import TrainConfig, evaluate, init_supernet, score_embeddings, train, write_log

DATA_FILE = "tasks.ufodata"
BENCH_GROUP = "toy"

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "space": {
        "heads": [4, 5, 6],
        "mlp_ratios": [2, 3, 4],
        "num_layers": 2,
        "embed_dim": 48,
        "head_dim": 8,
        "forced_keep_layers": [0],
    },
    "model": {"patch_size": 4, "feature_dim": 32},
    "train": {},
    "loss": {},
    "search": {
        "subset_size": 300,
        "quota": 20,
        "iterations": 3,
        "threshold": 0.7,
        "alpha2": 1.0,
        "sigma2": 0.01,
        "holdout_fraction": 0.2,
    },
}


class MissingArtifact(FileNotFoundError):
    """A command's prerequisite has not been produced yet."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(raw: dict, seed_override: int | None = None) -> dict:
    cfg = _merge(DEFAULT_CONFIG, raw)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifact(f"missing {path.name} in {path.parent}")
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# tasks


def gen_tasks(spec: task_gen.TaskSuiteSpec, out_dir: str | Path) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = task_gen.generate(spec)
    task_gen.save(data, out / DATA_FILE)
    _write_json(out / "spec.json", spec.to_dict())
    sums = task_gen.checksums(data)
    _write_json(out / "checksums.json", sums)
    return sums


def load_tasks(data_dir: str | Path) -> TaskDatasets:
    path = Path(data_dir)
    if path.is_dir():
        path = path / DATA_FILE
    if not path.exists():
        raise MissingArtifact(f"no task data at {path}; run gen-tasks first")
    return task_gen.load(path)


def data_checksum(data: TaskDatasets) -> str:
    return hashlib.sha256(json.dumps(task_gen.checksums(data), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# supernet


def supernet_config(cfg: dict, data: TaskDatasets, all_shared: bool) -> SupernetConfig:
    image = data.tasks[0].train_images.shape[-1]
    channels = data.tasks[0].train_images.shape[1]
    patch = int(cfg["model"]["patch_size"])
    space_d = dict(cfg["space"])
    space_d["num_tasks"] = len(data)
    space_d.setdefault("tokens", (image // patch) ** 2 + 1)
    space_d.setdefault("patch_dim", channels * patch * patch)
    space = SearchSpace.from_dict(space_d)
    return SupernetConfig(
        space=space,
        image_size=image,
        patch_size=patch,
        channels=channels,
        feature_dim=int(cfg["model"]["feature_dim"]),
        num_classes=tuple(t.num_classes for t in data.tasks),
        all_shared=all_shared,
    )


def save_supernet(path: Path, params: SupernetParams, gates: GateState) -> None:
    arrays = dict(params.arrays())
    arrays["gates.logits"] = gates.logits.data
    manifest = {"kind": "supernet", "config": params.config.to_dict(), "tau": gates.tau}
    ag.save_bundle(path, manifest, arrays)


def load_supernet(path: Path) -> tuple[SupernetParams, GateState]:
    if not path.exists():
        raise MissingArtifact(f"missing {path.name} in {path.parent}; run train first")
    manifest, arrays = ag.load_bundle(path)
    if manifest.get("kind") != "supernet":
        raise ag.FormatError(f"{path}: not a supernet bundle")
    config = SupernetConfig.from_dict(manifest["config"])
    logits = arrays.pop("gates.logits")
    params = SupernetParams(config, {k: ag.parameter(v) for k, v in arrays.items()})
    return params, GateState(ag.parameter(logits), float(manifest["tau"]))


def train_run(
    raw_cfg: dict,
    data_dir: str | Path,
    run_dir: str | Path,
    all_shared: bool = False,
    seed_override: int | None = None,
) -> dict:
    cfg = resolve_config(raw_cfg, seed_override)
    cfg["all_shared"] = bool(all_shared or cfg.get("all_shared", False))
    data = load_tasks(data_dir)
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    sn_cfg = supernet_config(cfg, data, cfg["all_shared"])
    cfg["space"] = sn_cfg.space.to_dict()
    seed = int(cfg["seed"])
    tcfg = TrainConfig.from_dict({**cfg["train"], "seed": seed})
    lcfg = LossConfig.from_dict(cfg["loss"])
    params, gates = init_supernet(sn_cfg, seed)
    result = train(params, gates, data, tcfg, lcfg)
    _write_json(run / "config.json", cfg)
    save_supernet(run / "supernet.ufob", result.params, result.gates)
    write_log(result.log, run / "train_log.jsonl")
    manifest = {
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "seed": seed,
        "config_hash": config_hash(cfg),
        "data": str(Path(data_dir).resolve()),
        "data_checksum": data_checksum(data),
        "task_names": [t.name for t in data.tasks],
        "params_checksum": result.params.checksum(),
        "artifacts": {"supernet": "supernet.ufob", "train_log": "train_log.jsonl"},
    }
    _write_json(run / "manifest.json", manifest)
    return manifest


@dataclass
class RunState:
    run: Path
    cfg: dict
    manifest: dict
    params: SupernetParams
    gates: GateState
    data: TaskDatasets

    @property
    def space(self) -> SearchSpace:
        return self.params.config.space

    @property
    def task_names(self) -> list[str]:
        return [t.name for t in self.data.tasks]

    def save_manifest(self) -> None:
        _write_json(self.run / "manifest.json", self.manifest)


def load_run(run_dir: str | Path) -> RunState:
    run = Path(run_dir)
    if not run.is_dir():
        raise MissingArtifact(f"run directory {run} does not exist; run train first")
    cfg = _read_json(run / "config.json")
    manifest = _read_json(run / "manifest.json")
    params, gates = load_supernet(run / "supernet.ufob")
    data = load_tasks(manifest["data"])
    if data_checksum(data) != manifest["data_checksum"]:
        raise task_gen.DataFormatError("task data changed since training (checksum mismatch)")
    return RunState(run, cfg, manifest, params, gates, data)


# ---------------------------------------------------------------------------
# sub-network evaluation


def learned_gates(state: RunState) -> list[tuple[Gate, ...]]:
    if state.params.config.all_shared:
        return [(Gate.SHARED,) * state.space.num_tasks for _ in range(state.space.num_layers)]
    return state.gates.decisions()


def with_learned_gates(arch: Architecture, decisions: Sequence[tuple[Gate, ...]]) -> Architecture:
    return Architecture(tuple(LayerChoice(l.heads, l.mlp_ratio, tuple(g), l.keep) for l, g in zip(arch.layers, decisions)))


def elastic_count(space: SearchSpace) -> int:
    return math.prod(len(space.heads) * len(space.mlp_ratios) * len(space.drop_choices(i)) for i in range(space.num_layers))


def sample_candidates(state: RunState, count: int, seed: int, exclude: Sequence[str] = ()) -> list[Architecture]:
    """Distinct elastic configurations carrying the learned routing decisions."""
    space = state.space
    decisions = learned_gates(state)
    rng = np.random.default_rng([seed, 4])
    blocked = set(exclude)
    total = elastic_count(space) - len(blocked)
    count = max(0, min(count, total))
    out: dict[str, Architecture] = {}
    while len(out) < count:
        layers = []
        for i in range(space.num_layers):
            drops = space.drop_choices(i)
            h = space.heads[rng.integers(len(space.heads))]
            m = space.mlp_ratios[rng.integers(len(space.mlp_ratios))]
            d = drops[rng.integers(len(drops))]
            layers.append(LayerChoice(int(h), float(m), decisions[i], int(d)))
        a = Architecture(tuple(layers))
        e = a.encode()
        if e not in blocked:
            out.setdefault(e, a)
    return list(out.values())


def evaluate_arch(state: RunState, arch: Architecture) -> list[float]:
    """Retrieval score (mAP in points) of ``arch`` on every task's eval split."""
    return [evaluate(state.params, state.gates, arch, t, task, mode="arch")["score"] for t, task in enumerate(state.data.tasks)]


def bench_columns(state: RunState) -> list[BenchColumn]:
    return [BenchColumn(n, BENCH_GROUP) for n in state.task_names]


def eval_subnets(state: RunState, count: int, seed: int) -> BenchTable:
    archs = sample_candidates(state, count, seed)
    cols = bench_columns(state)
    all_tasks = list(range(state.space.num_tasks))
    rows = []
    for i, a in enumerate(archs):
        scores = evaluate_arch(state, a)
        rep = cost(a, state.space, tasks=all_tasks)
        rows.append(BenchRow(f"a{i:04d}", a.encode(), rep.flops, rep.params, {c.header: s for c, s in zip(cols, scores)}))
    return BenchTable(cols, rows)


def register(state: RunState, key: str, value) -> None:
    state.manifest.setdefault("artifacts", {})[key] = value
    state.save_manifest()


def bench_scores(table: BenchTable, state: RunState) -> tuple[list[Architecture], np.ndarray]:
    headers = [c.header for c in bench_columns(state)]
    missing = [h for h in headers if h not in table.headers()]
    if missing:
        raise task_gen.DataFormatError(f"benchmark lacks score columns {missing}")
    archs = [decode(r.arch, state.space) for r in table.rows]
    scores = np.array([[r.scores[h] for h in headers] for r in table.rows], dtype=np.float64)
    return archs, scores


def load_bench(path: str | Path, space: SearchSpace) -> BenchTable:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"benchmark table {path} not found; run eval-subnets first")
    table, errors = import_bench(path, space)
    if errors:
        msg = "; ".join(f"line {e.line}: {e.message}" for e in errors[:5])
        raise task_gen.DataFormatError(f"{path}: {len(errors)} malformed rows ({msg})")
    return table


# ---------------------------------------------------------------------------
# predictors


def fit_predictors(state: RunState, table: BenchTable) -> dict:
    s = state.cfg["search"]
    archs, scores = bench_scores(table, state)
    encs = [a.encode() for a in archs]
    tr, ho = pr.split_holdout(encs, s["holdout_fraction"])
    out_dir = state.run / "predictors"
    out_dir.mkdir(exist_ok=True)
    summary = {"train": len(tr), "holdout": len(ho), "tasks": {}}
    for t, name in enumerate(state.task_names):
        pred = pr.fit([archs[i] for i in tr], scores[tr, t], t, state.space, s["alpha2"], s["sigma2"])
        pred.save(out_dir / f"{name}.ufob")
        r = pr.readiness(pred, [archs[i] for i in ho], scores[ho, t], s["threshold"], state.space) if len(ho) >= 2 else pr.Readiness(float("nan"), False)
        summary["tasks"][name] = {
            "kd": None if math.isnan(r.kd) else r.kd,
            "ready": r.ready,
            "pinv_fallback": pred.pinv_fallback,
        }
    _write_json(out_dir / "summary.json", summary)
    register(state, "predictors", "predictors/summary.json")
    return summary


def load_predictors(state: RunState) -> list[pr.RankPredictor]:
    if "predictors" not in state.manifest.get("artifacts", {}):
        raise MissingArtifact("no fitted predictors in this run; run fit-predictors first")
    return [pr.RankPredictor.load(state.run / "predictors" / f"{n}.ufob") for n in state.task_names]


# ---------------------------------------------------------------------------
# search and extraction


def parse_targets(text: str | Sequence, names: Sequence[str]) -> tuple[int, ...]:
    items = text.split(",") if isinstance(text, str) else list(text)
    out = []
    for item in items:
        item = str(item).strip()
        if item in names:
            out.append(names.index(item))
        elif item.isdigit() and int(item) < len(names):
            out.append(int(item))
        else:
            raise ValueError(f"unknown target task {item!r}; known: {', '.join(names)}")
    return tuple(out)


def make_budget(state: RunState, targets: Sequence[int], flops_frac=None, params_frac=None, lam=None) -> SearchBudget:
    s = state.cfg["search"]
    return SearchBudget(
        targets=tuple(targets),
        lam=lam if lam is not None else s.get("lambda"),
        flops_frac=flops_frac,
        params_frac=params_frac,
        iterations=int(s["iterations"]),
        threshold=s["threshold"],
        quota=int(s["quota"]),
        subset_size=int(s["subset_size"]),
        holdout_fraction=float(s["holdout_fraction"]),
    )


def search_run(state: RunState, budget: SearchBudget) -> tuple[SearchResult, dict]:
    bench_rel = state.manifest.get("artifacts", {}).get("bench")
    if bench_rel is None:
        raise MissingArtifact("no benchmark table registered for this run; run eval-subnets first")
    load_predictors(state)
    table = load_bench(bench_rel, state.space)
    archs, scores = bench_scores(table, state)
    encs = [a.encode() for a in archs]
    extra = sample_candidates(state, budget.subset_size - len(archs), int(state.cfg["seed"]), exclude=encs)
    candidates = archs + extra
    measured = {e: scores[i] for i, e in enumerate(encs)}
    s = state.cfg["search"]
    result = msa(
        candidates,
        lambda a: evaluate_arch(state, a),
        budget,
        state.space,
        seed=int(state.cfg["seed"]),
        measured=measured,
        alpha2=s["alpha2"],
        sigma2=s["sigma2"],
    )
    report = result.to_report(state.space, state.task_names)
    report["initial_predictors"] = _read_json(state.run / "predictors" / "summary.json")
    if result.best is not None:
        report["supernet_params"] = cost(state.space.max_arch(), state.space).params
    return result, report


def extract(state: RunState, arch: Architecture, targets: Sequence[int], out: str | Path | None = None) -> dict:
    model = extract_subnet(state.params, arch, list(targets), state.gates, use_arch_gates=True)
    if out is not None:
        model.save(out)
    scores = {}
    for t in targets:
        task = state.data.tasks[t]
        q = model.forward(task.query_images, t)
        g = model.forward(task.gallery_images, t)
        scores[task.name] = score_embeddings(q, g, task)["score"]
    return {
        "arch": model.arch.encode(),
        "targets": [state.task_names[t] for t in targets],
        "params": model.cost_report.params,
        "flops": model.cost_report.flops,
        "stored_params": model.num_params(),
        "supernet_params": cost(state.space.max_arch(), state.space).params,
        "scores": scores,
    }


def write_report(report: dict, path: str | Path) -> None:
    _write_json(Path(path), report)


def export_run_bench(state: RunState, path: str | Path) -> None:
    bench_rel = state.manifest.get("artifacts", {}).get("bench")
    if bench_rel is None:
        raise MissingArtifact("no benchmark table registered for this run; run eval-subnets first")
    export_bench(load_bench(bench_rel, state.space), path)


def run_pipeline(
    spec: task_gen.TaskSuiteSpec,
    run_cfg: dict,
    out_dir: str | Path,
    targets: Sequence[int | str],
    count: int = 60,
    all_shared: bool = False,
    seed: int | None = None,
    flops_frac: float | None = None,
    params_frac: float | None = None,
) -> dict:
    """Generate data, train, benchmark, fit predictors, search and extract in one go.

    Artifacts land under ``out_dir`` (``data/``, ``run/``, ``bench.csv``,
    ``search.json``, ``model.ufob``); the returned summary points at them.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if seed is not None:
        spec = task_gen.TaskSuiteSpec.from_dict({**spec.to_dict(), "seed": seed})
    gen_tasks(spec, out / "data")
    train_run(run_cfg, out / "data", out / "run", all_shared=all_shared, seed_override=seed)
    state = load_run(out / "run")
    table = eval_subnets(state, count, int(state.cfg["seed"]))
    export_bench(table, out / "bench.csv")
    register(state, "bench", str((out / "bench.csv").resolve()))
    fit_predictors(state, table)
    target_ids = parse_targets(list(targets), state.task_names)
    budget = make_budget(state, target_ids, flops_frac, params_frac)
    result, report = search_run(state, budget)
    write_report(report, out / "search.json")
    summary = {"bench": str(out / "bench.csv"), "search": str(out / "search.json"), "chosen": report["chosen"]}
    if result.best is not None:
        summary["extract"] = extract(state, result.best, target_ids, out / "model.ufob")
    return summary
