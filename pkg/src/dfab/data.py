"""Datasets: CSV loading, standardisation, holdout splits and the synthetic tree generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import ModelParams, TaskKind, predict_batch


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Standardization:
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0

    def transform_X(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_scale

    def transform_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_scale

    def inverse_y(self, y):
        return np.asarray(y, dtype=float) * self.y_scale + self.y_mean

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.asarray(d["x_mean"], float), np.asarray(d["x_scale"], float), float(d["y_mean"]), float(d["y_scale"]))


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    task: TaskKind = TaskKind.REGRESSION
    standardization: Standardization | None = None
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "task", TaskKind(self.task))
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
        if X.shape[1] < 1:
            raise DataError("dataset needs at least one feature")
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise DataError("dataset contains missing or non-finite values")
        if self.task is TaskKind.CLASSIFICATION and not np.isin(y, (-1.0, 1.0)).all():
            raise DataError("classification targets must be -1 or +1")
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{d}" for d in range(X.shape[1])))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx])


def load_csv(path, target: str, task: TaskKind | str = TaskKind.REGRESSION) -> Dataset:
    task = TaskKind(task)
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if target not in header:
            raise DataError(f"{path}: no target column '{target}'")
        t_col = header.index(target)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for col, cell in enumerate(row):
                cell = cell.strip()
                if cell == "":
                    raise DataError(f"{path}:{lineno}: missing value in column '{header[col]}'")
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column '{header[col]}'") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: non-finite value in column '{header[col]}'")
                vals.append(v)
            if task is TaskKind.CLASSIFICATION and vals[t_col] not in (-1.0, 1.0):
                raise DataError(f"{path}:{lineno}: label {row[t_col].strip()!r} is not -1 or +1")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: dataset has no rows")
    arr = np.array(rows)
    feat = [c for c in range(len(header)) if c != t_col]
    return Dataset(arr[:, feat], arr[:, t_col], task, feature_names=tuple(header[c] for c in feat))


def write_csv(data: Dataset, path, target: str = "y") -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(data.feature_names) + [target])
        for x, y in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def fit_standardization(data: Dataset) -> Standardization:
    if data.n < 2:
        raise DataError("standardisation needs at least two samples")
    mean = data.X.mean(axis=0)
    scale = data.X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    if data.task is TaskKind.REGRESSION:
        ys = data.y.std()
        return Standardization(mean, scale, float(data.y.mean()), float(ys) if ys > 0 else 1.0)
    return Standardization(mean, scale)


def apply_standardization(data: Dataset, st: Standardization) -> Dataset:
    y = st.transform_y(data.y) if data.task is TaskKind.REGRESSION else data.y
    return replace(data, X=st.transform_X(data.X), y=y, standardization=st)


def standardize(data: Dataset) -> Dataset:
    return apply_standardization(data, fit_standardization(data))


def split_train_test(data: Dataset, fraction: float, seed: int = 0, standardize_features: bool = True):
    """Seeded holdout split; standardisation statistics come from the train side only."""
    if not 0 < fraction < 1:
        raise DataError("fraction must lie in (0, 1)")
    n_train = min(max(int(math.floor(fraction * data.n)), 1), data.n - 1)
    if n_train < 1 or data.n - n_train < 1:
        raise DataError("split leaves an empty side")
    perm = np.random.default_rng(seed).permutation(data.n)
    train, test = data.subset(perm[:n_train]), data.subset(perm[n_train:])
    if standardize_features:
        st = fit_standardization(train)
        train, test = apply_standardization(train, st), apply_standardization(test, st)
    return train, test


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    depth: int = 3
    n_experts: int = 5
    n_features: int = 100
    n_samples: int = 10_000
    nonzero_range: tuple[int, int] = (10, 20)
    noise: float = 0.1
    noise_is_std: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise DataError("depth must be >= 1")
        if not self.depth + 1 <= self.n_experts <= 2**self.depth:
            raise DataError(
                f"{self.n_experts} experts cannot form a tree of depth exactly {self.depth} "
                f"(need {self.depth + 1}..{2**self.depth})"
            )
        lo, hi = self.nonzero_range
        if not 1 <= lo <= hi:
            raise DataError("invalid nonzero range")
        if self.n_features < 1 or self.n_samples < 1:
            raise DataError("need at least one feature and one sample")
        if self.noise <= 0:
            raise DataError("noise must be positive")


def random_leaf_regions(depth: int, n_leaves: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Random binary tree with maximum leaf depth exactly ``depth``.

    Leaves are returned as (heap node id, node depth) in left-to-right order.
    """
    # one chain reaching full depth, then random splits of shallower leaves
    leaves = [(0, 0)]

    def split(k):
        node, dep = leaves.pop(k)
        leaves.extend([(2 * node + 1, dep + 1), (2 * node + 2, dep + 1)])

    for _ in range(depth):
        deepest = max(range(len(leaves)), key=lambda k: leaves[k][1])
        split(deepest)
    while len(leaves) < n_leaves:
        open_ = [k for k, (_, dep) in enumerate(leaves) if dep < depth]
        split(int(rng.choice(open_)))

    def order_key(leaf):
        node, dep = leaf
        # left-most descendant at full depth gives in-order position
        for _ in range(depth - dep):
            node = 2 * node + 1
        return node

    return sorted(leaves, key=order_key)


def synth_generate(spec: SyntheticSpec) -> tuple[Dataset, ModelParams]:
    """Random gated tree with deterministic gates, sparse experts and Gaussian noise."""
    rng = np.random.default_rng(spec.seed)
    D, N, depth = spec.n_features, spec.n_samples, spec.depth
    E_full = 2**depth
    G = E_full - 1
    leaves = random_leaf_regions(depth, spec.n_experts, rng)

    gamma = rng.integers(0, D, size=G)
    thr = rng.uniform(0.0, 1.0, size=G)
    active = np.zeros(E_full, dtype=bool)
    W = np.zeros((E_full, D))
    lo, hi = spec.nonzero_range
    lo, hi = min(lo, D), min(hi, D)
    for node, dep in leaves:
        # representative full-depth leaf: the left-most descendant
        for _ in range(depth - dep):
            node = 2 * node + 1
        j = node - G
        active[j] = True
        k = int(rng.integers(lo, hi + 1))
        support = rng.choice(D, size=k, replace=False)
        W[j, support] = rng.uniform(0.0, 1.0, size=k)
        W[j, support] = np.where(W[j, support] == 0, 0.5, W[j, support])

    truth = ModelParams(
        depth=depth,
        task=TaskKind.REGRESSION,
        gamma=gamma,
        threshold=thr,
        g=np.ones(G),
        weights=W,
        intercept=np.zeros(E_full),
        sigma2=np.full(E_full, spec.noise**2 if spec.noise_is_std else spec.noise),
        active=active,
    )
    X = rng.uniform(0.0, 1.0, size=(N, D))
    j = route_hard(X, truth)
    sd = spec.noise if spec.noise_is_std else math.sqrt(spec.noise)
    y = np.einsum("nd,nd->n", X, W[j]) + rng.normal(0.0, sd, size=N)
    return Dataset(X, y, TaskKind.REGRESSION), truth


def route_hard(X, model: ModelParams) -> np.ndarray:
    """Follow each row down the tree with deterministic gates, skipping pass-throughs."""
    X = np.atleast_2d(X)
    topo = model.topology
    node = np.zeros(X.shape[0], dtype=np.int64)
    G = model.n_gates
    for _ in range(model.depth):
        gate = node
        below = X[np.arange(X.shape[0]), model.gamma[gate]] < model.threshold[gate]
        go_left = np.where(model.g[gate] >= 0.5, below, ~below)
        pt = topo.passthrough[gate]
        if pt.any():
            left_alive = ((topo.side[gate] == 1) & model.active[None, :]).any(axis=1)
            go_left = np.where(pt, left_alive, go_left)
        node = np.where(go_left, 2 * gate + 1, 2 * gate + 2)
    return node - G


def rmse(model: ModelParams, data: Dataset) -> float:
    pred = predict_batch(data.X, model)
    return float(np.sqrt(np.mean((pred - data.y) ** 2)))
