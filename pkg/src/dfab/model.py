"""Gated binary tree of sparse linear experts.

The tree is always stored as a complete binary tree of a fixed depth in heap
order: gate ``i`` has children ``2i+1`` and ``2i+2``; node ``G + j`` is expert
``j``.  Pruning never removes storage, it only marks experts inactive and turns
gates whose left or right subtree has no active expert into pass-throughs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Any

import numpy as np

PROB_CLAMP = 1e-6
FORMAT_VERSION = 1


class TaskKind(str, Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


class ModelError(ValueError):
    """Invalid model state (no active experts, bad indices, ...)."""


class ShrinkageCollapse(ModelError):
    pass


class ModelParseError(ValueError):
    def __init__(self, message: str, location: str = "<document>"):
        super().__init__(f"{location}: {message}")
        self.location = location


def clamp_prob(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


class TreeTopology:
    """Path and subtree index sets of a complete binary tree plus an active mask."""

    def __init__(self, depth: int, active: np.ndarray | None = None):
        if depth < 1:
            raise ModelError(f"depth must be >= 1, got {depth}")
        self.depth = int(depth)
        self.n_experts = 2**depth
        self.n_gates = self.n_experts - 1
        if active is None:
            active = np.ones(self.n_experts, dtype=bool)
        self.active = np.asarray(active, dtype=bool).copy()
        if self.active.shape != (self.n_experts,):
            raise ModelError("active mask length does not match expert count")

        # side[i, j] = +1 if expert j is in gate i's left subtree, -1 right, 0 neither
        side = np.zeros((self.n_gates, self.n_experts), dtype=np.int8)
        for j in range(self.n_experts):
            node = self.n_gates + j
            while node > 0:
                parent = (node - 1) // 2
                side[parent, j] = 1 if node == 2 * parent + 1 else -1
                node = parent
        self.side = side

    @cached_property
    def passthrough(self) -> np.ndarray:
        left_alive = ((self.side == 1) & self.active[None, :]).any(axis=1)
        right_alive = ((self.side == -1) & self.active[None, :]).any(axis=1)
        return ~(left_alive & right_alive)

    @cached_property
    def left_mask(self) -> np.ndarray:
        """(G, E) bool: expert in the left subtree of a live gate."""
        live = ~self.passthrough
        return (self.side == 1) & live[:, None] & self.active[None, :]

    @cached_property
    def right_mask(self) -> np.ndarray:
        live = ~self.passthrough
        return (self.side == -1) & live[:, None] & self.active[None, :]

    @property
    def subtree_mask(self) -> np.ndarray:
        return self.left_mask | self.right_mask

    def path(self, j: int) -> list[int]:
        """Live gates on the root-to-leaf path of expert ``j``."""
        return [int(i) for i in np.flatnonzero(self.subtree_mask[:, j])]

    def left_set(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.left_mask[i])]

    def right_set(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.right_mask[i])]

    def subtree_set(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.subtree_mask[i])]

    @property
    def n_live_gates(self) -> int:
        return int((~self.passthrough).sum())


@dataclass(frozen=True)
class GateParams:
    gamma: int
    threshold: float
    g: float
    d_beta: float = 1.0


@dataclass(frozen=True)
class ExpertParams:
    weights: np.ndarray
    intercept: float = 0.0
    sigma2: float = 1.0

    @property
    def cardinality(self) -> int:
        return int(np.count_nonzero(self.weights))

    def __eq__(self, other):
        if not isinstance(other, ExpertParams):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and self.intercept == other.intercept
            and self.sigma2 == other.sigma2
        )


@dataclass(eq=False)
class ModelParams:
    """Full parameter set of the gated tree, stored as flat arrays.

    ``gamma``, ``threshold``, ``g`` have length G; ``weights`` is (E, D) and
    ``intercept``, ``sigma2``, ``active`` have length E.
    """

    depth: int
    task: TaskKind
    gamma: np.ndarray
    threshold: np.ndarray
    g: np.ndarray
    weights: np.ndarray
    intercept: np.ndarray
    sigma2: np.ndarray
    active: np.ndarray
    d_beta: float = 1.0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.task = TaskKind(self.task)
        self.gamma = np.asarray(self.gamma, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        self.intercept = np.asarray(self.intercept, dtype=float)
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        self.active = np.asarray(self.active, dtype=bool)
        E = 2**self.depth
        G = E - 1
        for name, arr, n in [
            ("gamma", self.gamma, G),
            ("threshold", self.threshold, G),
            ("g", self.g, G),
            ("intercept", self.intercept, E),
            ("sigma2", self.sigma2, E),
            ("active", self.active, E),
        ]:
            if arr.shape != (n,):
                raise ModelError(f"{name} has shape {arr.shape}, expected ({n},)")
        if self.weights.shape[0] != E:
            raise ModelError(f"weights has {self.weights.shape[0]} rows, expected {E}")
        if G and (self.gamma.min() < 0 or self.gamma.max() >= self.n_features):
            raise ModelError("gate feature index out of range")
        if np.any(self.sigma2 <= 0):
            raise ModelError("sigma2 must be positive")

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    @property
    def n_experts(self) -> int:
        return 2**self.depth

    @property
    def n_gates(self) -> int:
        return self.n_experts - 1

    @cached_property
    def topology(self) -> TreeTopology:
        return TreeTopology(self.depth, self.active)

    @property
    def cardinality(self) -> np.ndarray:
        return np.count_nonzero(self.weights, axis=1)

    def gate(self, i: int) -> GateParams:
        return GateParams(int(self.gamma[i]), float(self.threshold[i]), float(self.g[i]), self.d_beta)

    def expert(self, j: int) -> ExpertParams:
        return ExpertParams(self.weights[j].copy(), float(self.intercept[j]), float(self.sigma2[j]))

    def copy(self, **changes) -> "ModelParams":
        base = dict(
            gamma=self.gamma.copy(),
            threshold=self.threshold.copy(),
            g=self.g.copy(),
            weights=self.weights.copy(),
            intercept=self.intercept.copy(),
            sigma2=self.sigma2.copy(),
            active=self.active.copy(),
            meta=dict(self.meta),
        )
        base.update(changes)
        return replace(self, **base)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.depth == other.depth
            and self.task == other.task
            and self.d_beta == other.d_beta
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("gamma", "threshold", "g", "weights", "intercept", "sigma2", "active")
            )
        )

    @classmethod
    def initial(
        cls,
        depth: int,
        n_features: int,
        task: TaskKind | str = TaskKind.REGRESSION,
        *,
        gamma=None,
        threshold=None,
        g: float = 0.8,
        intercept: float = 0.0,
        d_beta: float = 1.0,
    ) -> "ModelParams":
        E = 2**depth
        G = E - 1
        return cls(
            depth=depth,
            task=TaskKind(task),
            gamma=np.zeros(G, dtype=np.int64) if gamma is None else gamma,
            threshold=np.zeros(G) if threshold is None else threshold,
            g=np.full(G, g),
            weights=np.zeros((E, n_features)),
            intercept=np.full(E, float(intercept)),
            sigma2=np.ones(E),
            active=np.ones(E, dtype=bool),
            d_beta=d_beta,
        )


# -- evaluation ---------------------------------------------------------------


def gate_prob(x, beta: GateParams) -> float:
    x = np.asarray(x, dtype=float)
    if not 0 <= beta.gamma < x.shape[-1]:
        raise ModelError(f"gate feature {beta.gamma} out of range for D={x.shape[-1]}")
    return beta.g if x[beta.gamma] < beta.threshold else 1.0 - beta.g


def gate_probs(X: np.ndarray, model: ModelParams) -> np.ndarray:
    """(n, G) probability of taking the left branch at every gate."""
    X = np.atleast_2d(X)
    below = X[:, model.gamma] < model.threshold[None, :]
    return np.where(below, model.g[None, :], 1.0 - model.g[None, :])


def path_log_probs(X: np.ndarray, model: ModelParams) -> np.ndarray:
    """(n, E) log path probabilities; inactive experts get -inf."""
    topo = model.topology
    a = clamp_prob(gate_probs(X, model))
    out = np.log(a) @ topo.left_mask.astype(float) + np.log1p(-a) @ topo.right_mask.astype(float)
    out[:, ~model.active] = -np.inf
    return out


def path_log_prob(x, model: ModelParams, j: int) -> float:
    if not model.active[j]:
        raise ModelError(f"expert {j} is inactive")
    return float(path_log_probs(np.atleast_2d(x), model)[0, j])


def _margin(X, y, model: ModelParams) -> np.ndarray:
    return np.atleast_2d(X) @ model.weights.T + model.intercept[None, :]


def expert_log_likelihoods(X, y, model: ModelParams) -> np.ndarray:
    """(n, E) log p(y | x, phi_j) for every expert."""
    y = np.asarray(y, dtype=float).reshape(-1)
    f = _margin(X, y, model)
    if model.task is TaskKind.REGRESSION:
        s2 = model.sigma2[None, :]
        return -0.5 * np.log(2 * np.pi * s2) - (y[:, None] - f) ** 2 / (2 * s2)
    return -np.logaddexp(0.0, -y[:, None] * f)


def scaling_factors(X, y, model: ModelParams) -> np.ndarray:
    """(n, E) per-sample FIC scaling factor of every expert."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if model.task is TaskKind.REGRESSION:
        return np.broadcast_to(1.0 / model.sigma2[None, :], (y.shape[0], model.n_experts)).copy()
    mu = 1.0 / (1.0 + np.exp(-y[:, None] * _margin(X, y, model)))
    return mu * (1.0 - mu)


def expert_log_likelihood(y: float, x, phi: ExpertParams, task: TaskKind | str) -> float:
    task = TaskKind(task)
    f = float(np.dot(phi.weights, x) + phi.intercept)
    if task is TaskKind.REGRESSION:
        if phi.sigma2 <= 0:
            raise ModelError("sigma2 must be positive")
        return -0.5 * math.log(2 * math.pi * phi.sigma2) - (y - f) ** 2 / (2 * phi.sigma2)
    return -float(np.logaddexp(0.0, -y * f))


def scaling_factor(y: float, x, phi: ExpertParams, task: TaskKind | str) -> float:
    task = TaskKind(task)
    if task is TaskKind.REGRESSION:
        return 1.0 / phi.sigma2
    mu = 1.0 / (1.0 + math.exp(-y * float(np.dot(phi.weights, x) + phi.intercept)))
    return mu * (1.0 - mu)


def route(X, model: ModelParams) -> np.ndarray:
    """Index of the most probable active path for each row (lowest index on ties)."""
    if not model.active.any():
        raise ModelError("model has no active experts")
    return np.argmax(path_log_probs(X, model), axis=1)


def predict_batch(X, model: ModelParams) -> np.ndarray:
    """Regression output, or P(y=+1) for classification, for each row of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    j = route(X, model)
    f = np.einsum("nd,nd->n", X, model.weights[j]) + model.intercept[j]
    if model.task is TaskKind.REGRESSION:
        return f
    return 1.0 / (1.0 + np.exp(-f))


def predict(x, model: ModelParams):
    """Prediction for one sample; classification returns ``(probability, label)``."""
    out = float(predict_batch(np.atleast_2d(x), model)[0])
    if model.task is TaskKind.REGRESSION:
        return out
    return out, (1 if out >= 0.5 else -1)


def prune_topology(model: ModelParams, eliminated) -> ModelParams:
    eliminated = sorted(set(int(j) for j in eliminated))
    if not eliminated:
        return model
    if any(not model.active[j] for j in eliminated):
        raise ModelError("can only eliminate active experts")
    active = model.active.copy()
    active[eliminated] = False
    if not active.any():
        raise ShrinkageCollapse("all experts eliminated")
    return model.copy(active=active)


# -- model document -----------------------------------------------------------


def model_to_dict(model: ModelParams) -> dict:
    topo = model.topology
    return {
        "format": "dfab-model",
        "version": FORMAT_VERSION,
        "task": model.task.value,
        "depth": model.depth,
        "n_features": model.n_features,
        "d_beta": model.d_beta,
        "gates": [
            {
                "gamma": int(model.gamma[i]),
                "t": float(model.threshold[i]),
                "g": float(model.g[i]),
                "passthrough": bool(topo.passthrough[i]),
            }
            for i in range(model.n_gates)
        ],
        "experts": [
            {
                "active": bool(model.active[j]),
                "intercept": float(model.intercept[j]),
                "sigma2": float(model.sigma2[j]),
                "weights": [[int(d), float(model.weights[j, d])] for d in np.flatnonzero(model.weights[j])],
            }
            for j in range(model.n_experts)
        ],
        "train_config": model.meta.get("train_config", {}),
        "fic": model.meta.get("fic"),
        "standardization": model.meta.get("standardization"),
        "feature_names": model.meta.get("feature_names"),
    }


def serialize_model(model: ModelParams) -> str:
    return json.dumps(model_to_dict(model), indent=1)


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ModelParseError(f"missing field '{key}'", where)
    return doc[key]


def model_from_dict(doc: Any) -> ModelParams:
    if not isinstance(doc, dict):
        raise ModelParseError("top level must be an object")
    if doc.get("format") != "dfab-model":
        raise ModelParseError("not a dfab model document", "format")
    depth = _require(doc, "depth", "depth")
    D = _require(doc, "n_features", "n_features")
    if not isinstance(depth, int) or depth < 1:
        raise ModelParseError(f"invalid depth {depth!r}", "depth")
    gates = _require(doc, "gates", "gates")
    experts = _require(doc, "experts", "experts")
    E = 2**depth
    if len(experts) != E:
        raise ModelParseError(f"{len(experts)} experts, expected {E} for depth {depth}", "experts")
    if len(gates) != E - 1:
        raise ModelParseError(f"{len(gates)} gates, expected E-1 = {E - 1}", "gates")
    try:
        gamma = [int(_require(g, "gamma", f"gates[{i}]")) for i, g in enumerate(gates)]
        thr = [float(_require(g, "t", f"gates[{i}]")) for i, g in enumerate(gates)]
        gv = [float(_require(g, "g", f"gates[{i}]")) for i, g in enumerate(gates)]
        pt = [bool(_require(g, "passthrough", f"gates[{i}]")) for i, g in enumerate(gates)]
        W = np.zeros((E, D))
        b, s2, act = [], [], []
        for j, e in enumerate(experts):
            where = f"experts[{j}]"
            act.append(bool(_require(e, "active", where)))
            b.append(float(_require(e, "intercept", where)))
            s2.append(float(_require(e, "sigma2", where)))
            for k, pair in enumerate(_require(e, "weights", where)):
                d, v = pair
                if not 0 <= int(d) < D:
                    raise ModelParseError(f"feature index {d} out of range", f"{where}.weights[{k}]")
                W[j, int(d)] = float(v)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelParseError):
            raise
        raise ModelParseError(str(exc)) from exc
    try:
        model = ModelParams(
            depth=depth,
            task=TaskKind(_require(doc, "task", "task")),
            gamma=gamma,
            threshold=thr,
            g=gv,
            weights=W,
            intercept=b,
            sigma2=s2,
            active=act,
            d_beta=float(doc.get("d_beta", 1.0)),
        )
    except ValueError as exc:
        raise ModelParseError(str(exc)) from exc
    if not model.active.any():
        raise ModelParseError("no active experts", "experts")
    if list(model.topology.passthrough) != pt:
        raise ModelParseError("pass-through flags inconsistent with active experts", "gates")
    model.meta["train_config"] = doc.get("train_config", {})
    model.meta["fic"] = doc.get("fic")
    model.meta["standardization"] = doc.get("standardization")
    model.meta["feature_names"] = doc.get("feature_names")
    return model


def deserialize_model(text: str) -> ModelParams:
    if not text or not text.strip():
        raise ModelParseError("empty document")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from exc
    return model_from_dict(doc)
