"""End-to-end runs: data pipeline, federated training, personalization,
metrics, sweeps and CSV/JSON reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .augmentation import AugmentationConfig
from .config import ExperimentConfig
from .data import (Dataset, PartitionSpec, apply_longtail, dirichlet_partition, generate_synthetic,
                   train_test_split)
from .federation import (ClientState, GlobalState, PersonalizationInfo, SGDConfig, _map,
                         personalize_fedafa, personalize_fedavg_ft, personalize_local,
                         personalize_ros, run_round, steps_per_epoch, stream)
from .model import SplitModel, init_model, save_checkpoint

log = logging.getLogger(__name__)

_PARTITION, _LONGTAIL, _SPLIT = 101, 102, 103
_TEST_SAMPLE_OFFSET = 1_000_003

SWEEP_PARAMS = {"lambda": "lam", "p_d": "p_d", "boundary_index": "boundary_index"}


@dataclass
class Benchmark:
    clients: list[ClientState]
    global_test: Dataset
    global_counts: np.ndarray  # class histogram of the long-tailed training pool


def build_benchmark(cfg: ExperimentConfig) -> Benchmark:
    pool = generate_synthetic(cfg.num_classes, cfg.dim, cfg.n_per_class, cfg.cluster_spread, cfg.seed)
    lt = apply_longtail(pool, cfg.imbalance_factor, stream(cfg.seed, _LONGTAIL))
    shards = dirichlet_partition(lt, PartitionSpec(cfg.num_clients, cfg.alpha, cfg.imbalance_factor, cfg.seed))
    clients = []
    for k, shard in enumerate(shards):
        train, test = train_test_split(shard, cfg.test_fraction, stream(cfg.seed, _SPLIT, k))
        clients.append(ClientState(k, train, test))
    test = generate_synthetic(cfg.num_classes, cfg.dim, cfg.test_per_class, cfg.cluster_spread, cfg.seed,
                              sample_seed=cfg.seed + _TEST_SAMPLE_OFFSET)
    return Benchmark(clients, test, lt.class_counts())


# -- metrics --------------------------------------------------------------------

def accuracy(model: SplitModel, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    pred = model.predict(data.features).argmax(axis=1)
    return 100.0 * float((pred == data.labels).mean())


def per_class_accuracy(model: SplitModel, data: Dataset) -> np.ndarray:
    pred = model.predict(data.features).argmax(axis=1)
    out = np.full(data.num_classes, np.nan)
    for c in range(data.num_classes):
        m = data.labels == c
        if m.any():
            out[c] = 100.0 * float((pred[m] == c).mean())
    return out


@dataclass
class MetricsTable:
    client_ids: list[int]
    n_k: list[int]
    local_acc: list[float]    # each client's held-out shard (local distribution)
    global_acc: list[float]   # each client's model on the balanced global test set
    per_class_acc: list[float]
    eval_on: str = "global"

    @property
    def client_acc(self) -> list[float]:
        return self.global_acc if self.eval_on == "global" else self.local_acc

    @property
    def mean_acc(self) -> float:
        return float(np.nanmean(self.client_acc))

    @property
    def std_acc(self) -> float:
        return float(np.nanstd(self.client_acc))

    def half_means(self) -> tuple[float, float]:
        """Mean per-class accuracy over the head half and the tail half of the classes."""
        pc = np.asarray(self.per_class_acc)
        h = len(pc) // 2
        return float(pc[:h].mean()), float(pc[h:].mean())


def compute_metrics(models: dict[int, SplitModel], clients: Sequence[ClientState], global_test: Dataset,
                    eval_on: str = "global") -> MetricsTable:
    """Per-client accuracy on both test views and per-class accuracy pooled over all
    clients' predictions on the global balanced test set."""
    missing = [c.client_id for c in clients if c.client_id not in models]
    if missing:
        raise KeyError(f"no personalized model for clients {missing}")
    local, glob, correct = [], [], np.zeros(global_test.num_classes)
    per_class_n = np.bincount(global_test.labels, minlength=global_test.num_classes).astype(float)
    for c in clients:
        m = models[c.client_id]
        local.append(accuracy(m, c.test))
        pred = m.predict(global_test.features).argmax(axis=1)
        hit = pred == global_test.labels
        glob.append(100.0 * float(hit.mean()))
        correct += np.bincount(global_test.labels[hit], minlength=global_test.num_classes)
    per_class = 100.0 * correct / (len(clients) * np.maximum(per_class_n, 1))
    return MetricsTable([c.client_id for c in clients], [c.n_k for c in clients], local, glob,
                        per_class.tolist(), eval_on)


# -- runs -----------------------------------------------------------------------

@dataclass
class RoundReport:
    round: int
    participants: list[int]
    mean_acc: float
    std_acc: float
    client_acc: list[float]
    per_class_acc: list[float]
    wall_clock: float = 0.0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rounds: list[RoundReport]
    metrics: MetricsTable
    global_model: SplitModel
    models: dict[int, SplitModel]
    info: dict[int, PersonalizationInfo] = field(default_factory=dict)


_FEDERATION_KEYS = ("seed", "num_classes", "dim", "n_per_class", "imbalance_factor", "cluster_spread",
                    "test_per_class", "test_fraction", "num_clients", "alpha", "hidden", "rounds",
                    "clients_per_round", "local_epochs", "batch_size", "lr", "momentum", "weight_decay",
                    "eval_on")
_global_cache: dict[tuple, tuple[SplitModel, list[RoundReport]]] = {}


def federation_key(cfg: ExperimentConfig) -> tuple:
    return tuple(getattr(cfg, k) for k in _FEDERATION_KEYS)


def _round_report(r: int, chosen: list[int], model: SplitModel, bench: Benchmark, eval_on: str,
                  elapsed: float) -> RoundReport:
    models = {c.client_id: model for c in bench.clients}
    m = compute_metrics(models, bench.clients, bench.global_test, eval_on)
    return RoundReport(r, chosen, m.mean_acc, m.std_acc, m.client_acc, m.per_class_acc, elapsed)


def train_global(cfg: ExperimentConfig, bench: Benchmark, use_cache: bool = True, on_round=None):
    """FedAvg for ``cfg.rounds`` rounds. Cached on the federation-relevant config keys.

    ``on_round(state, chosen, elapsed)`` may return a replacement RoundReport;
    runs with a callback bypass the cache.
    """
    key = federation_key(cfg)
    use_cache = use_cache and on_round is None
    if use_cache and key in _global_cache:
        model, reports = _global_cache[key]
        return model.with_boundary(cfg.boundary_index), reports
    state = GlobalState(0, init_model(cfg.layer_sizes, cfg.boundary_index, cfg.seed))
    sgd = SGDConfig(cfg.lr, cfg.momentum, cfg.weight_decay)
    reports = []
    for _ in range(cfg.rounds):
        t0 = time.perf_counter()
        state, chosen = run_round(state, bench.clients, cfg.clients_per_round, cfg.local_epochs,
                                  cfg.batch_size, sgd, cfg.seed, cfg.workers)
        elapsed = time.perf_counter() - t0
        report = on_round(state, chosen, elapsed) if on_round else None
        reports.append(report or _round_report(state.round, chosen, state.model, bench, cfg.eval_on, elapsed))
    if use_cache:
        _global_cache[key] = (state.model.copy(), reports)
    return state.model, reports


def aug_config(cfg: ExperimentConfig) -> AugmentationConfig:
    return AugmentationConfig(p_d=cfg.p_d, steps=cfg.perturb_steps, step_size=cfg.step_size,
                              step_scale=cfg.step_scale, max_attempts_per_slot=cfg.max_attempts_per_slot)


def personalize_client(cfg: ExperimentConfig, client: ClientState, global_model: SplitModel,
                       method: Optional[str] = None):
    method = method or cfg.method
    sgd = SGDConfig(cfg.personal_lr, cfg.momentum, cfg.weight_decay)
    bs, seed = cfg.batch_size, cfg.seed
    if method == "local":
        return personalize_local(client, global_model, SGDConfig(cfg.lr, cfg.momentum, cfg.weight_decay),
                                 cfg.local_only_epochs, bs, seed), None
    if method == "fedavg_ft":
        steps = cfg.personal_epochs * steps_per_epoch(client.n_k, bs)
        return personalize_fedavg_ft(client, global_model, sgd, steps, bs, seed), None
    if method == "fedavg_ros":
        return personalize_ros(client, global_model, sgd, cfg.personal_epochs, bs, seed), None
    if method in ("fedafa", "fedafa_loc"):
        base = global_model
        if method == "fedafa_loc":
            steps = cfg.personal_epochs * steps_per_epoch(client.n_k, bs)
            base = personalize_fedavg_ft(client, global_model, sgd, steps, bs, seed)
        return personalize_fedafa(client, base, aug_config(cfg), cfg.lam, cfg.personal_epochs, bs, sgd, seed,
                                  perturb_classifier=cfg.perturb_classifier)
    raise ValueError(f"unknown method {method!r}")


def run_experiment(cfg: ExperimentConfig, bench: Optional[Benchmark] = None,
                   use_cache: bool = True) -> ExperimentResult:
    """Federated training (skipped for the local baseline) followed by post-hoc
    personalization of every client and evaluation."""
    bench = bench or build_benchmark(cfg)
    if cfg.method == "local":
        global_model, rounds = init_model(cfg.layer_sizes, cfg.boundary_index, cfg.seed), []
    elif cfg.every_round:
        def on_round(state, chosen, elapsed):
            # personalized view of this round's participants; never fed back into aggregation
            members = [bench.clients[k] for k in chosen]
            models = {c.client_id: personalize_client(cfg, c, state.model)[0] for c in members}
            m = compute_metrics(models, members, bench.global_test, cfg.eval_on)
            return RoundReport(state.round, chosen, m.mean_acc, m.std_acc, m.client_acc, m.per_class_acc, elapsed)

        global_model, rounds = train_global(cfg, bench, use_cache, on_round)
    else:
        global_model, rounds = train_global(cfg, bench, use_cache)

    def work(client):
        return personalize_client(cfg, client, global_model)

    outs = _map(work, bench.clients, cfg.workers)
    models = {c.client_id: m for c, (m, _) in zip(bench.clients, outs)}
    info = {c.client_id: i for c, (_, i) in zip(bench.clients, outs) if i is not None}
    metrics = compute_metrics(models, bench.clients, bench.global_test, cfg.eval_on)
    return ExperimentResult(cfg, rounds, metrics, global_model, models, info)


def validate_sweep(param: str, values: Sequence[float], base: ExperimentConfig) -> list:
    if param not in SWEEP_PARAMS:
        raise cfgmod.ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}, got {param!r}")
    name = SWEEP_PARAMS[param]
    out = []
    for v in values:
        v = int(v) if name == "boundary_index" else float(v)
        if name == "boundary_index" and float(v) != float(int(v)):
            raise cfgmod.ConfigError(f"boundary_index values must be integers, got {v}")
        base.replace(**{name: v})  # raises ConfigError when out of range
        out.append(v)
    return out


@dataclass
class SweepRow:
    param: str
    value: float
    mean_acc: float
    std_acc: float
    per_seed: list[float]


def sweep(base: ExperimentConfig, param: str, values: Sequence[float], seeds: Sequence[int] = (0,)) -> list[SweepRow]:
    """One row per value; mean over seeds of the mean client accuracy, std over all clients of all seeds."""
    vals = validate_sweep(param, values, base)
    name = SWEEP_PARAMS[param]
    rows = []
    benches = {s: build_benchmark(base.replace(seed=s)) for s in seeds}
    for v in vals:
        per_seed, pooled = [], []
        for s in seeds:
            res = run_experiment(base.replace(seed=s, **{name: v}), benches[s])
            per_seed.append(res.metrics.mean_acc)
            pooled.extend(res.metrics.client_acc)
        rows.append(SweepRow(param, v, float(np.mean(per_seed)), float(np.nanstd(pooled)), per_seed))
    return rows


# -- reports --------------------------------------------------------------------

def _f(x: float) -> str:
    return "nan" if x != x else f"{x:.4f}"


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_f(x) if isinstance(x, float) else x for x in r])


def write_rounds_csv(path, rounds: Sequence[RoundReport]) -> None:
    write_csv(path, ["round", "mean_acc", "std_acc"], [(r.round, r.mean_acc, r.std_acc) for r in rounds])


def write_final_csv(path, m: MetricsTable) -> None:
    write_csv(path, ["client_id", "n_k", "acc"], list(zip(m.client_ids, m.n_k, [float(a) for a in m.client_acc])))


def write_per_class_csv(path, global_counts: Sequence[int], baseline: Sequence[float],
                        method: Sequence[float]) -> None:
    rows = [(c, int(n), float(b), float(a), float(a) - float(b))
            for c, (n, b, a) in enumerate(zip(global_counts, baseline, method))]
    write_csv(path, ["class_id", "global_count", "acc_baseline", "acc_method", "delta"], rows)


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    write_csv(path, ["param", "value", "mean_acc", "std_acc"],
              [(r.param, r.value if isinstance(r.value, int) else float(r.value), r.mean_acc, r.std_acc)
               for r in rows])


def write_manifest(path, cfg: ExperimentConfig, **extra) -> None:
    payload = {"config": cfgmod.dumps(cfg), "seed": cfg.seed, **extra}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_run(out_dir, result: ExperimentResult, bench: Benchmark) -> None:
    """Persist metrics CSVs, checkpoints (global + one per client) and the manifest."""
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    write_rounds_csv(out / "rounds.csv", result.rounds)
    write_final_csv(out / "final.csv", result.metrics)
    write_csv(out / "per_class.csv", ["class_id", "global_count", "acc"],
              [(c, int(n), float(a)) for c, (n, a) in enumerate(zip(bench.global_counts, result.metrics.per_class_acc))])
    save_checkpoint(result.global_model, out / "models" / "global.fafa")
    for k, m in sorted(result.models.items()):
        save_checkpoint(m, out / "models" / f"client_{k:03d}.fafa")
    write_manifest(out / "manifest.json", result.config, round_reached=len(result.rounds),
                   method=result.config.method, eval_on=result.config.eval_on,
                   mean_acc=round(result.metrics.mean_acc, 4))
