"""NSGA-II search over (accuracy up, latency down) with an all-time Pareto archive."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .latsim import count_flops, simulate_latency
from .space import SpaceSpec, crossover, mutate, sample_random
from .surrogate import FittedSurrogate, encode_many, rank_metrics
from .supernet import SupernetParams

log = logging.getLogger(__name__)


@dataclass
class Individual:
    genes: tuple[int, ...]
    accuracy: float = float("nan")
    latency: float = float("nan")
    generation: int = 0
    parents: tuple[int, ...] = ()
    verified_latency: float | None = None

    @property
    def evaluated(self) -> bool:
        return not (math.isnan(self.accuracy) or math.isnan(self.latency))


@dataclass
class SearchConfig:
    population: int = 128
    top_k: int = 64
    generations: int = 20
    p_mutation: float = 0.2
    seed: int = 0
    device: str = "nx"
    surrogate_kind: str = ""
    objective: str = "latency"  # latency | flops
    max_resample: int = 10

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if not 1 <= self.top_k <= self.population:
            raise ValueError(f"need 1 <= top_k <= population, got {self.top_k} / {self.population}")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not 0.0 <= self.p_mutation <= 1.0:
            raise ValueError("p_mutation must lie in [0, 1]")
        if self.objective not in ("latency", "flops"):
            raise ValueError(f"unknown objective {self.objective!r}")


def _obj(x) -> tuple[float, float]:
    if isinstance(x, Individual):
        return x.accuracy, x.latency
    return float(x[0]), float(x[1])


def dominates(a, b) -> bool:
    """a is no worse on both objectives and strictly better on one (acc up, latency down)."""
    (aa, al), (ba, bl) = _obj(a), _obj(b)
    return aa >= ba and al <= bl and (aa > ba or al < bl)


def _min_matrix(pop) -> np.ndarray:
    """Objectives as a minimisation matrix (-accuracy, latency)."""
    f = np.array([_obj(p) for p in pop], dtype=np.float64).reshape(-1, 2)
    f[:, 0] = -f[:, 0]
    return f


def front_ranks(pop) -> np.ndarray:
    """0-based non-domination rank of every member."""
    if len(pop) == 0:
        return np.zeros(0, dtype=np.int64)
    return _kernels.front_ranks(np.ascontiguousarray(_min_matrix(pop)))


def fast_nondominated_sort(pop) -> list[list[int]]:
    """Fronts as lists of indices into ``pop``, best front first."""
    ranks = front_ranks(pop)
    if len(ranks) == 0:
        return []
    return [np.flatnonzero(ranks == r).tolist() for r in range(int(ranks.max()) + 1)]


def crowding_distance(front) -> np.ndarray:
    """NSGA-II crowding distance of each member of one front.

    Equal objective values are ordered by the other objective and then by genes
    (when available), so the result does not depend on the order of ``front``.
    """
    n = len(front)
    dist = np.zeros(n)
    if n <= 2:
        dist[:] = np.inf
        return dist
    f = _min_matrix(front)
    genes = [p.genes if isinstance(p, Individual) else () for p in front]
    for m in range(2):
        order = sorted(range(n), key=lambda i: (f[i, m], f[i, 1 - m], genes[i]))
        lo, hi = f[order[0], m], f[order[-1], m]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = hi - lo
        if span == 0:
            continue
        for j in range(1, n - 1):
            dist[order[j]] += (f[order[j + 1], m] - f[order[j - 1], m]) / span
    return dist


def nsga2_select(pop: Sequence[Individual], k: int) -> list[Individual]:
    """Top-k by front rank, then descending crowding distance, then (latency, genes)."""
    if not 0 <= k <= len(pop):
        raise ValueError(f"cannot select {k} of {len(pop)}")
    chosen: list[Individual] = []
    for front in fast_nondominated_sort(pop):
        members = [pop[i] for i in front]
        if len(chosen) + len(members) <= k:
            chosen.extend(sorted(members, key=lambda p: (p.latency, p.genes)))
            if len(chosen) == k:
                break
            continue
        cd = crowding_distance(members)
        order = sorted(range(len(members)), key=lambda i: (-cd[i], members[i].latency, members[i].genes))
        chosen.extend(members[i] for i in order[:k - len(chosen)])
        break
    return chosen


def hypervolume_2d(front, ref_point: tuple[float, float]) -> float:
    """Area dominated by ``front`` inside the box bounded by ref = (acc_ref, lat_ref)."""
    ra, rl = ref_point
    pts = sorted((_obj(p)[1], _obj(p)[0]) for p in front)
    for lat, acc in pts:
        if acc < ra or lat > rl:
            raise ValueError(f"point (acc {acc}, lat {lat}) lies outside the reference box {ref_point}")
    vol = 0.0
    best = ra
    for i, (lat, acc) in enumerate(pts):
        best = max(best, acc)
        nxt = pts[i + 1][0] if i + 1 < len(pts) else rl
        vol += (best - ra) * (nxt - lat)
    return vol


def pareto_front(pop: Sequence[Individual]) -> list[Individual]:
    """Non-dominated members sorted by latency; identical objective pairs keep the smallest genes."""
    ranks = front_ranks(pop)
    best: dict[tuple[float, float], Individual] = {}
    for p, r in zip(pop, ranks):
        if r == 0:
            key = (p.accuracy, p.latency)
            if key not in best or p.genes < best[key].genes:
                best[key] = p
    return sorted(best.values(), key=lambda p: (p.latency, p.genes))


HISTORY_FIELDS = ("generation", "hypervolume", "front_size", "best_acc", "min_lat",
                  "evaluated", "elapsed_s")


@dataclass
class SearchResult:
    front: list[Individual]
    history: list[dict]
    ref_point: tuple[float, float]
    config: SearchConfig
    n_evaluated: int
    evaluated: list[tuple[tuple[int, ...], float, float]] = field(default_factory=list)
    verification: dict = field(default_factory=dict)


def _unique_random(spec, rng, n, seen) -> list[tuple[int, ...]]:
    out = []
    tries = 0
    while len(out) < n:
        g = sample_random(spec, rng)
        tries += 1
        if g not in seen or tries > 1000 * n:
            seen.add(g)
            out.append(g)
    return out


def _offspring(spec, parents: list[Individual], cfg: SearchConfig, rng, seen) -> list[Individual]:
    n_cross = cfg.population // 2
    kids = []
    for i in range(cfg.population):
        for _attempt in range(cfg.max_resample + 1):
            if i < n_cross and len(parents) >= 2:
                a, b = rng.choice(len(parents), size=2, replace=False)
                child = crossover(spec, parents[a].genes, parents[b].genes, rng)
                pid = (int(a), int(b))
            else:
                a = int(rng.integers(len(parents)))
                child = mutate(spec, parents[a].genes, cfg.p_mutation, rng)
                pid = (a,)
            if child not in seen:
                break
        seen.add(child)
        kids.append(Individual(child, parents=pid))
    return kids


def run_search(spec: SpaceSpec, params: SupernetParams | None, surrogate: FittedSurrogate | None,
               val_set, cfg: SearchConfig,
               accuracy_fn: Callable[[tuple[int, ...]], float] | None = None,
               ref_latency: float | None = None) -> SearchResult:
    """Algorithm loop: evaluate, keep the archive, select top-K, breed P offspring.

    ``accuracy_fn`` overrides inherited-weight evaluation (used by tests).
    With ``cfg.objective == "flops"`` the cost objective is the FLOP count in
    MFLOPs and no surrogate is needed.
    """
    if cfg.objective == "latency":
        if surrogate is None:
            raise ValueError("a fitted surrogate is required for the latency objective")
        if surrogate.dim != spec.n_genes:
            raise ValueError(f"surrogate expects {surrogate.dim} features but the space has "
                             f"{spec.n_genes} genes")
    if accuracy_fn is None:
        if params is None or val_set is None:
            raise ValueError("need supernet params and a validation split")
        from .train import evaluate
        accuracy_fn = lambda g: evaluate(spec, params, g, val_set)  # noqa: E731

    def cost(genomes):
        if cfg.objective == "flops":
            return np.array([count_flops(spec, g) / 1e6 for g in genomes])
        return surrogate.predict(encode_many(spec, genomes))

    acc_cache: dict[tuple, float] = {}
    cost_cache: dict[tuple, float] = {}

    def evaluate_pop(pop):
        todo = [p.genes for p in pop if p.genes not in cost_cache]
        todo = list(dict.fromkeys(todo))
        if todo:
            for g, c in zip(todo, cost(todo)):
                cost_cache[g] = max(float(c), 1e-6)
        for p in pop:
            if p.genes not in acc_cache:
                acc_cache[p.genes] = float(accuracy_fn(p.genes))
            p.accuracy, p.latency = acc_cache[p.genes], cost_cache[p.genes]

    if ref_latency is None:
        from .space import sample_max
        ref_latency = 2.0 * float(cost([sample_max(spec)])[0])
    ref = (0.0, float(ref_latency))

    t0 = time.perf_counter()
    seen: set[tuple] = set()
    rng = np.random.default_rng([cfg.seed, 0])
    pop = [Individual(g, generation=1) for g in _unique_random(spec, rng, cfg.population, seen)]
    archive: list[Individual] = []
    parents: list[Individual] = []
    history = []
    for gen in range(1, cfg.generations + 1):
        evaluate_pop(pop)
        archive = pareto_front(archive + pop)
        inside = [p for p in archive if p.latency <= ref[1]]
        history.append({
            "generation": gen,
            "hypervolume": hypervolume_2d(inside, ref) if inside else 0.0,
            "front_size": len(archive),
            "best_acc": max(p.accuracy for p in archive),
            "min_lat": min(p.latency for p in archive),
            "evaluated": len(acc_cache),
            "elapsed_s": time.perf_counter() - t0,
        })
        log.info("gen %d hv %.5f front %d best_acc %.4f min_lat %.4f", gen,
                 history[-1]["hypervolume"], len(archive), history[-1]["best_acc"],
                 history[-1]["min_lat"])
        if gen == cfg.generations:
            break
        # elitist: the previous parents compete with their offspring
        pool = list({p.genes: p for p in parents + pop}.values())
        parents = nsga2_select(pool, cfg.top_k)
        rng = np.random.default_rng([cfg.seed, gen])
        pop = _offspring(spec, parents, cfg, rng, seen)
        for p in pop:
            p.generation = gen + 1
    points = [(g, acc_cache[g], cost_cache[g]) for g in acc_cache]
    return SearchResult(archive, history, ref, cfg, len(acc_cache), points)


def verify_front(spec: SpaceSpec, front: Sequence[Individual], device: str,
                 seed: int | None = None, objective: str = "latency") -> dict:
    """Re-score the front with the simulator and summarise the surrogate's error.

    With objective="flops" there is no prediction to compare, so only the
    simulated latencies are filled in.
    """
    if not front:
        return {"n": 0}
    for p in front:
        p.verified_latency = simulate_latency(spec, p.genes, device, seed)
    if objective == "flops":
        return {"n": len(front), "device": device}
    pred = np.array([p.latency for p in front])
    true = np.array([p.verified_latency for p in front])
    out = {"n": len(front), "device": device,
           "mae_ms": float(np.mean(np.abs(pred - true))),
           "max_rel_err": float(np.max(np.abs(pred - true) / true))}
    if len(front) >= 2:
        rho, tau, rmse = rank_metrics(pred, true)
        out.update(rho=rho, tau=tau, rmse_ms=rmse)
    return out


def front_records(spec: SpaceSpec, front: Sequence[Individual], objective: str = "latency") -> list[dict]:
    recs = []
    for p in front:
        rec = {"genes": list(p.genes), "accuracy": p.accuracy,
               "predicted_latency_ms": p.latency if objective == "latency" else None,
               "verified_latency_ms": p.verified_latency,
               "flops": count_flops(spec, p.genes)}
        recs.append(rec)
    return recs


def history_csv(history: list[dict], header_comment: str = "") -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def config_dict(cfg: SearchConfig) -> dict:
    return asdict(cfg)
