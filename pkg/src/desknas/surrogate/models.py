"""Latency regressors: MLP, regression tree, Gaussian RBF interpolant and GP.

All models share ``fit(X, y)`` / ``predict(X)`` / ``state()`` and are
deterministic given their seed.  Targets are centred (and, where a scale
matters, standardised) before fitting; constant targets give a constant model.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

from .. import _kernels


class SurrogateError(RuntimeError):
    pass


def _check_fit(X, y, min_n):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
        raise ValueError(f"X must be (n, d) and y (n,), got {X.shape} and {y.shape}")
    if len(y) < min_n:
        raise ValueError(f"need at least {min_n} training points, got {len(y)}")
    return X, y


class _Base:
    kind = ""
    min_n = 2
    DEFAULTS: dict = {}

    def __init__(self, hyper: dict | None = None, seed: int = 0):
        unknown = set(hyper or {}) - set(self.DEFAULTS)
        if unknown:
            raise ValueError(f"{self.kind}: unknown hyperparameters {sorted(unknown)}")
        self.hyper = {**self.DEFAULTS, **(hyper or {})}
        self.seed = seed
        self.dim: int | None = None

    def _check_predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.dim is None:
            raise SurrogateError("model is not fitted")
        if X.shape[1] != self.dim:
            raise ValueError(f"input dimension {X.shape[1]} != training dimension {self.dim}")
        return X


class MLPSurrogate(_Base):
    kind = "mlp"
    min_n = 10
    DEFAULTS = {"hidden": 64, "epochs": 500, "lr": 0.05, "momentum": 0.9}

    def fit(self, X, y):
        X, y = _check_fit(X, y, self.min_n)
        n, d = X.shape
        self.dim = d
        self.y_mean = float(y.mean())
        std = float(y.std())
        self.y_scale = std if std > 0 else 0.0
        t = (y - self.y_mean) / std if std > 0 else np.zeros_like(y)
        h = int(self.hyper["hidden"])
        rng = np.random.default_rng(self.seed)
        self.W = [rng.normal(0, np.sqrt(2.0 / d), (d, h)), rng.normal(0, np.sqrt(2.0 / h), (h, h)),
                  rng.normal(0, np.sqrt(1.0 / h), (h, 1))]
        self.b = [np.zeros(h), np.zeros(h), np.zeros(1)]
        vel = [np.zeros_like(p) for p in self.W + self.b]
        lr, mu = float(self.hyper["lr"]), float(self.hyper["momentum"])
        t = t[:, None]
        for _ in range(int(self.hyper["epochs"])):
            z1 = X @ self.W[0] + self.b[0]
            a1 = np.maximum(z1, 0)
            z2 = a1 @ self.W[1] + self.b[1]
            a2 = np.maximum(z2, 0)
            out = a2 @ self.W[2] + self.b[2]
            g = 2.0 * (out - t) / n
            gW2, gb2 = a2.T @ g, g.sum(0)
            g = (g @ self.W[2].T) * (z2 > 0)
            gW1, gb1 = a1.T @ g, g.sum(0)
            g = (g @ self.W[1].T) * (z1 > 0)
            gW0, gb0 = X.T @ g, g.sum(0)
            for p, v, gp in zip(self.W + self.b, vel, [gW0, gW1, gW2, gb0, gb1, gb2]):
                v *= mu
                v -= lr * gp
                p += v
        return self

    def predict(self, X):
        X = self._check_predict(X)
        a1 = np.maximum(X @ self.W[0] + self.b[0], 0)
        a2 = np.maximum(a1 @ self.W[1] + self.b[1], 0)
        out = (a2 @ self.W[2] + self.b[2])[:, 0]
        return self.y_mean + self.y_scale * out

    def state(self):
        return {"y_mean": self.y_mean, "y_scale": self.y_scale,
                "W": [w.tolist() for w in self.W], "b": [b.tolist() for b in self.b]}

    def load_state(self, st):
        self.y_mean, self.y_scale = st["y_mean"], st["y_scale"]
        self.W = [np.array(w, dtype=np.float64) for w in st["W"]]
        self.b = [np.array(b, dtype=np.float64) for b in st["b"]]
        self.dim = self.W[0].shape[0]


class CARTSurrogate(_Base):
    """Greedy variance-reduction regression tree with mean-valued leaves."""

    kind = "cart"
    min_n = 10
    DEFAULTS = {"max_depth": 12, "min_leaf": 5}

    def fit(self, X, y):
        X, y = _check_fit(X, y, self.min_n)
        self.dim = X.shape[1]
        max_depth, min_leaf = int(self.hyper["max_depth"]), int(self.hyper["min_leaf"])
        feat, thr, left, right, value = [], [], [], [], []

        def new_node(idx):
            feat.append(-1)
            thr.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(float(y[idx].mean()))
            return len(feat) - 1

        root = new_node(np.arange(len(y)))
        stack = [(root, np.arange(len(y)), 0)]
        while stack:
            node, idx, depth = stack.pop()
            if depth >= max_depth or len(idx) < 2 * min_leaf:
                continue
            yn = y[idx]
            f, t, score = _kernels.best_split(np.ascontiguousarray(X[idx]), yn, min_leaf)
            parent = yn.sum() ** 2 / len(yn)
            if f < 0 or not score > parent + 1e-12 * max(1.0, abs(parent)):
                continue
            go_left = X[idx, f] <= t
            li, ri = idx[go_left], idx[~go_left]
            feat[node], thr[node] = int(f), float(t)
            left[node] = new_node(li)
            right[node] = new_node(ri)
            stack.append((right[node], ri, depth + 1))
            stack.append((left[node], li, depth + 1))
        self.feature = np.array(feat, dtype=np.int64)
        self.threshold = np.array(thr)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.value = np.array(value)
        return self

    def apply(self, X):
        """Leaf index reached by every row."""
        X = self._check_predict(X)
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            n = node[active]
            go_left = X[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, X):
        leaves = self.apply(X)
        return self.value[leaves]

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def state(self):
        return {k: getattr(self, k).tolist()
                for k in ("feature", "threshold", "left", "right", "value")} | {"dim": self.dim}

    def load_state(self, st):
        for k in ("feature", "left", "right"):
            setattr(self, k, np.array(st[k], dtype=np.int64))
        self.threshold = np.array(st["threshold"], dtype=np.float64)
        self.value = np.array(st["value"], dtype=np.float64)
        self.dim = st["dim"]


def median_distance(X) -> float:
    d = pdist(X)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def _chol_with_retry(K, ridge, kind):
    """Cholesky of K + ridge*I; one retry with a 1000x larger ridge."""
    for r in (ridge, ridge * 1e3):
        try:
            return cho_factor(K + r * np.eye(len(K)), lower=True), r
        except LinAlgError:
            continue
    raise SurrogateError(f"{kind}: kernel matrix is singular even with ridge {ridge * 1e3:g}")


class RBFSurrogate(_Base):
    """Gaussian RBF interpolant exp(-(r / sigma)^2) centred on every training point."""

    kind = "rbf"
    DEFAULTS = {"sigma": None, "ridge": 1e-8}

    def fit(self, X, y):
        X, y = _check_fit(X, y, self.min_n)
        self.dim = X.shape[1]
        self.centers = X.copy()
        self.sigma = float(self.hyper["sigma"] or median_distance(X))
        self.y_mean = float(y.mean())
        K = np.exp(-(cdist(X, X) / self.sigma) ** 2)
        cf, self.ridge_used = _chol_with_retry(K, float(self.hyper["ridge"]), self.kind)
        self.weights = cho_solve(cf, y - self.y_mean)
        return self

    def predict(self, X):
        X = self._check_predict(X)
        K = np.exp(-(cdist(X, self.centers) / self.sigma) ** 2)
        return self.y_mean + K @ self.weights

    def state(self):
        return {"centers": self.centers.tolist(), "weights": self.weights.tolist(),
                "sigma": self.sigma, "y_mean": self.y_mean, "ridge_used": self.ridge_used}

    def load_state(self, st):
        self.centers = np.array(st["centers"], dtype=np.float64)
        self.weights = np.array(st["weights"], dtype=np.float64)
        self.sigma, self.y_mean, self.ridge_used = st["sigma"], st["y_mean"], st["ridge_used"]
        self.dim = self.centers.shape[1]


class GPSurrogate(_Base):
    """Squared-exponential GP; length-scale and noise picked by log marginal likelihood.

    The signal variance is profiled out analytically, so the grid search runs
    over (length-scale multiplier, relative noise) only.
    """

    kind = "gp"
    DEFAULTS = {"length_multipliers": (0.25, 0.5, 1.0, 2.0), "noises": (1e-6, 1e-4, 1e-2)}

    def fit(self, X, y):
        X, y = _check_fit(X, y, self.min_n)
        n = len(y)
        self.dim = X.shape[1]
        self.X = X.copy()
        self.y_mean = float(y.mean())
        std = float(y.std())
        self.y_scale = std if std > 0 else 0.0
        t = (y - self.y_mean) / std if std > 0 else np.zeros_like(y)
        sigma = median_distance(X)
        D2 = cdist(X, X, "sqeuclidean")
        best = None
        for mult in self.hyper["length_multipliers"]:
            ell = mult * sigma
            R = np.exp(-D2 / (2 * ell * ell))
            for noise in self.hyper["noises"]:
                try:
                    cf = cho_factor(R + noise * np.eye(n), lower=True)
                except LinAlgError:
                    continue
                alpha = cho_solve(cf, t)
                quad = float(t @ alpha)
                s2 = max(quad / n, 1e-300)
                logdet = 2.0 * np.log(np.diag(cf[0])).sum()
                lml = -0.5 * n * np.log(s2) - 0.5 * logdet - 0.5 * n * (1 + np.log(2 * np.pi))
                if best is None or lml > best[0]:
                    best = (lml, ell, noise, alpha)
        if best is None:
            raise SurrogateError("gp: no (length-scale, noise) pair gave a positive-definite kernel")
        self.log_ml, self.length_scale, self.noise, self.alpha = best
        return self

    def predict(self, X):
        X = self._check_predict(X)
        k = np.exp(-cdist(X, self.X, "sqeuclidean") / (2 * self.length_scale ** 2))
        return self.y_mean + self.y_scale * (k @ self.alpha)

    def state(self):
        return {"X": self.X.tolist(), "alpha": self.alpha.tolist(), "y_mean": self.y_mean,
                "y_scale": self.y_scale, "length_scale": self.length_scale, "noise": self.noise,
                "log_ml": self.log_ml}

    def load_state(self, st):
        self.X = np.array(st["X"], dtype=np.float64)
        self.alpha = np.array(st["alpha"], dtype=np.float64)
        for k in ("y_mean", "y_scale", "length_scale", "noise", "log_ml"):
            setattr(self, k, st[k])
        self.dim = self.X.shape[1]


MODELS = {cls.kind: cls for cls in (MLPSurrogate, CARTSurrogate, RBFSurrogate, GPSurrogate)}
KINDS = tuple(MODELS)
