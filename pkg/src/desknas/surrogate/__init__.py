"""Latency surrogates: feature encoding, the four regressors, metrics, sweeps, selection.

One surrogate is fitted per device.  Features are gene indices scaled to
[0, 1], so every kind sees the same input regardless of space size.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..space import SpaceSpec, validate_genes
from .metrics import kendall, rank_metrics, spearman
from .models import KINDS, MODELS, SurrogateError, median_distance

__all__ = [
    "KINDS", "FittedSurrogate", "SurrogateError", "encode_features", "encode_many", "fit",
    "predict", "rank_metrics", "spearman", "kendall", "split_indices", "device_arrays",
    "sample_efficiency_sweep", "summarize_sweep", "select_best", "sweep_to_csv",
    "median_distance",
]

FORMAT_VERSION = 1


def encode_features(spec: SpaceSpec, genes: Sequence[int]) -> np.ndarray:
    """Gene index / (arity - 1); single-choice genes map to 0."""
    validate_genes(spec, genes)
    arity = np.asarray(spec.arity(), dtype=np.float64)
    denom = np.where(arity > 1, arity - 1, 1.0)
    return np.asarray(genes, dtype=np.float64) / denom


def encode_many(spec: SpaceSpec, genomes) -> np.ndarray:
    genomes = list(genomes)
    if not genomes:
        return np.zeros((0, spec.n_genes))
    return np.stack([encode_features(spec, g) for g in genomes])


def _data_hash(X, y) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class FittedSurrogate:
    kind: str
    model: object
    n: int
    seed: int
    device: str = ""
    data_hash: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.model.dim

    @property
    def hyper(self) -> dict:
        return self.model.hyper

    def predict(self, X) -> np.ndarray:
        out = self.model.predict(X)
        if not np.all(np.isfinite(out)):
            raise SurrogateError(f"{self.kind}: non-finite prediction")
        return out

    def predict_genes(self, spec: SpaceSpec, genomes) -> np.ndarray:
        return self.predict(encode_many(spec, genomes))

    def to_dict(self) -> dict:
        hyper = {k: list(v) if isinstance(v, tuple) else v for k, v in self.model.hyper.items()}
        return {"format_version": FORMAT_VERSION, "kind": self.kind, "hyper": hyper,
                "n": self.n, "seed": self.seed, "device": self.device,
                "data_hash": self.data_hash, "meta": self.meta, "state": self.model.state()}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "FittedSurrogate":
        try:
            kind = d["kind"]
            model = MODELS[kind](d["hyper"], d["seed"])
            model.load_state(d["state"])
        except KeyError as e:
            raise ValueError(f"malformed surrogate document: missing or unknown {e}") from None
        return cls(kind, model, d["n"], d["seed"], d.get("device", ""), d.get("data_hash", ""),
                   d.get("meta", {}))

    @classmethod
    def load(cls, path: str | Path) -> "FittedSurrogate":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit(kind: str, X, y, hyper: dict | None = None, seed: int = 0, device: str = "") -> FittedSurrogate:
    if kind not in MODELS:
        raise ValueError(f"unknown surrogate kind {kind!r}; choose from {KINDS}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    model = MODELS[kind](hyper, seed).fit(X, y)
    return FittedSurrogate(kind, model, len(y), seed, device, _data_hash(X, y))


def predict(model: FittedSurrogate, x) -> np.ndarray | float:
    """Predictions for a batch (2-D) or a single feature vector (1-D -> float)."""
    x = np.asarray(x, dtype=np.float64)
    out = model.predict(x)
    return float(out[0]) if x.ndim == 1 else out


def split_indices(n: int, seed: int = 0, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Fixed shuffled train/test split."""
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(train_frac * n))
    return perm[:k], perm[k:]


def device_arrays(spec: SpaceSpec, samples, device: str) -> tuple[np.ndarray, np.ndarray]:
    """Features and latencies of one device's rows from a list of LatencySample."""
    rows = [s for s in samples if s.device == device]
    if not rows:
        raise ValueError(f"no latency samples for device {device!r}")
    return encode_many(spec, [s.genes for s in rows]), np.array([s.latency_ms for s in rows])


def sample_efficiency_sweep(X, y, sizes: Sequence[int], n_seeds: int = 5,
                            kinds: Sequence[str] = KINDS, split_seed: int = 0,
                            hypers: dict | None = None) -> list[dict]:
    """Fit every kind on random subsets of the training split; score on the fixed test split.

    Returns one row per (kind, size, seed) with rho, tau and rmse.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tr, te = split_indices(len(y), split_seed)
    for s in sizes:
        if not 0 < s <= len(tr):
            raise ValueError(f"sweep size {s} outside (0, {len(tr)}]")
    rows = []
    for kind in kinds:
        for size in sizes:
            for seed in range(n_seeds):
                sub = np.random.default_rng([seed, size]).choice(tr, size=size, replace=False)
                m = fit(kind, X[sub], y[sub], (hypers or {}).get(kind), seed)
                rho, tau, rmse = rank_metrics(m.predict(X[te]), y[te])
                rows.append({"kind": kind, "size": int(size), "seed": seed,
                             "rho": rho, "tau": tau, "rmse": rmse})
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Mean and (population) standard deviation of rho and tau per (kind, size)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["kind"], r["size"]), []).append(r)
    out = []
    for (kind, size), rs in groups.items():
        rho = np.array([r["rho"] for r in rs])
        tau = np.array([r["tau"] for r in rs])
        out.append({"kind": kind, "size": size, "n": len(rs), "rho_mean": float(rho.mean()),
                    "rho_std": float(rho.std()), "tau_mean": float(tau.mean()),
                    "tau_std": float(tau.std())})
    return out


def sweep_to_csv(rows: list[dict], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["kind", "size", "seed", "rho", "tau", "rmse"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()
                    if k in w.fieldnames})
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def select_best(X, y, seed: int = 0, kinds: Sequence[str] = KINDS,
                hypers: dict | None = None) -> tuple[str, dict]:
    """Kind with the best held-out (rho, tau, -rmse) on the 80/20 split, plus all scores."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 100:
        raise ValueError(f"select_best needs at least 100 rows, got {len(y)}")
    tr, te = split_indices(len(y), seed)
    scores = {}
    for kind in kinds:
        m = fit(kind, X[tr], y[tr], (hypers or {}).get(kind), seed)
        rho, tau, rmse = rank_metrics(m.predict(X[te]), y[te])
        scores[kind] = {"rho": rho, "tau": tau, "rmse": rmse}
    best = max(kinds, key=lambda k: (scores[k]["rho"], scores[k]["tau"], -scores[k]["rmse"]))
    return best, scores
