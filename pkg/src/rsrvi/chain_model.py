"""Finite controlled Markov chains with multiplicative stage costs.

A model holds a transition tensor ``P[x, u, y] = p(y | x, u)`` and a stage
cost matrix ``k[x, u]``.  Value functions are plain positive float arrays of
shape ``(n_states,)`` and stationary policies are integer arrays of action
indices of the same shape.

Two storage layouts share one interface (``expect``, ``log_expect``,
``select``):

* :class:`ChainModel` keeps ``P`` dense.  This is the layout of the JSON
  problem format and of everything in the discrete-time toolkit.
* :class:`SparseChainModel` keeps one CSR matrix per action.  Grid chains built
  from diffusions have a handful of nonzeros per row, so a dense tensor would
  waste memory quadratically.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Sequence

import numpy as np
import scipy.sparse as sp

ROW_SUM_TOL = 1e-12
POSITIVITY_FLOOR = 1e-15


class ModelError(ValueError):
    """Raised when a problem document or model fails validation."""


@dataclass(frozen=True, eq=False)
class ChainModel:
    """Dense finite controlled Markov chain.

    Attributes:
        P: transition tensor of shape ``(n, m, n)``.
        k: stage costs of shape ``(n, m)``.
        labels: optional per-state labels (names or coordinates).
        strictly_positive: asserts every transition probability is positive.
    """

    P: np.ndarray
    k: np.ndarray
    labels: list | None = None
    strictly_positive: bool = False
    ek: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        k = np.array(self.k, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ModelError(f"P must have shape (n, m, n), got {P.shape}")
        if k.shape != P.shape[:2]:
            raise ModelError(f"k must have shape {P.shape[:2]}, got {k.shape}")
        if self.labels is not None and len(self.labels) != P.shape[0]:
            raise ModelError("labels length does not match n_states")
        P.flags.writeable = False
        k.flags.writeable = False
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "k", k)
        with np.errstate(over="ignore"):
            object.__setattr__(self, "ek", np.exp(k))

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def expect(self, J: np.ndarray) -> np.ndarray:
        """Return ``E[x, u] = sum_y P[x, u, y] J[y]`` with shape ``(n, m)``."""
        # contiguous last-axis reduction: fixed pairwise order, reproducible
        return (self.P * J).sum(axis=-1)

    def log_expect(self, logJ: np.ndarray) -> np.ndarray:
        """Return ``log sum_y P[x, u, y] exp(logJ[y])`` without overflow."""
        with np.errstate(divide="ignore"):
            terms = np.log(self.P) + logJ
        top = terms.max(axis=-1, keepdims=True)
        return top[..., 0] + np.log(np.exp(terms - top).sum(axis=-1))

    def select(self, policy: np.ndarray) -> np.ndarray:
        """Dense ``(n, n)`` transition matrix of the chain under ``policy``."""
        policy = check_policy(self, policy)
        return self.P[np.arange(self.n_states), policy, :]

    def dense(self) -> "ChainModel":
        return self


@dataclass(frozen=True, eq=False)
class SparseChainModel:
    """Controlled chain stored as one CSR matrix per action."""

    mats: tuple
    k: np.ndarray
    labels: list | None = None
    strictly_positive: bool = False
    ek: np.ndarray = field(init=False, repr=False)
    _log: tuple = field(init=False, repr=False)

    def __post_init__(self):
        mats = tuple(sp.csr_matrix(M, dtype=float) for M in self.mats)
        for M in mats:
            M.sort_indices()
        k = np.array(self.k, dtype=float)
        n = mats[0].shape[0]
        if any(M.shape != (n, n) for M in mats):
            raise ModelError("all action matrices must be square and equal-sized")
        if k.shape != (n, len(mats)):
            raise ModelError(f"k must have shape {(n, len(mats))}, got {k.shape}")
        k.flags.writeable = False
        object.__setattr__(self, "mats", mats)
        object.__setattr__(self, "k", k)
        with np.errstate(over="ignore"):
            object.__setattr__(self, "ek", np.exp(k))
        with np.errstate(divide="ignore"):
            logs = tuple(np.log(M.data) for M in mats)
        object.__setattr__(self, "_log", logs)

    @property
    def n_states(self) -> int:
        return self.mats[0].shape[0]

    @property
    def n_actions(self) -> int:
        return len(self.mats)

    def expect(self, J: np.ndarray) -> np.ndarray:
        return np.stack([M @ J for M in self.mats], axis=1)

    def log_expect(self, logJ: np.ndarray) -> np.ndarray:
        out = np.empty((self.n_states, self.n_actions))
        for u, (M, logp) in enumerate(zip(self.mats, self._log)):
            terms = logp + logJ[M.indices]
            starts = M.indptr[:-1]
            top = np.maximum.reduceat(terms, starts)
            rows = np.repeat(np.arange(self.n_states), np.diff(M.indptr))
            s = np.add.reduceat(np.exp(terms - top[rows]), starts)
            out[:, u] = top + np.log(s)
        return out

    def select(self, policy: np.ndarray) -> np.ndarray:
        policy = check_policy(self, policy)
        rows = [self.mats[u].getrow(x) for x, u in enumerate(policy)]
        return sp.vstack(rows).toarray()

    def dense(self) -> ChainModel:
        P = np.stack([M.toarray() for M in self.mats], axis=1)
        return ChainModel(P, self.k, self.labels, self.strictly_positive)


def check_policy(model, policy: Sequence[int]) -> np.ndarray:
    """Coerce ``policy`` to an index array and check it against ``model``."""
    policy = np.asarray(policy)
    if policy.shape != (model.n_states,):
        raise ModelError(
            f"policy must have shape ({model.n_states},), got {policy.shape}")
    if not np.issubdtype(policy.dtype, np.integer):
        raise ModelError("policy entries must be integers")
    bad = np.flatnonzero((policy < 0) | (policy >= model.n_actions))
    if bad.size:
        x = int(bad[0])
        raise ModelError(f"policy action {int(policy[x])} at state {x} out of "
                         f"range [0, {model.n_actions})")
    return policy.astype(np.intp)


def check_values(V) -> np.ndarray:
    """Coerce ``V`` to a float array and require strictly positive finite entries."""
    V = np.asarray(V, dtype=float)
    if V.ndim != 1:
        raise ValueError("value function must be one-dimensional")
    if not np.all(np.isfinite(V)) or np.any(V <= 0):
        bad = int(np.flatnonzero(~(np.isfinite(V) & (V > 0)))[0])
        raise ValueError(f"value function must be positive and finite; "
                         f"entry {bad} is {V[bad]!r}")
    return V


def validate(model) -> list[str]:
    """List every violated model invariant; an empty list means valid."""
    report = []
    if isinstance(model, SparseChainModel):
        for u, M in enumerate(model.mats):
            if np.any(M.data < 0):
                r, c = (M.multiply(M < 0)).nonzero()
                report.append(f"negative probability at (x={r[0]}, u={u}, y={c[0]})")
            sums = np.asarray(M.sum(axis=1)).ravel()
            for x in np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL):
                report.append(f"row (x={x}, u={u}) sums to {float(sums[x])!r}, not 1")
            if model.strictly_positive and M.nnz < M.shape[0] * M.shape[1]:
                report.append(f"action {u}: zero transitions but strictly_positive set")
    else:
        P = model.P
        for x, u, y in np.argwhere(P < 0):
            report.append(f"negative probability {float(P[x, u, y])!r} at (x={x}, u={u}, y={y})")
        if not np.all(np.isfinite(P)):
            report.append("non-finite transition probability")
        sums = P.sum(axis=-1)
        for x, u in np.argwhere(np.abs(sums - 1.0) > ROW_SUM_TOL):
            report.append(f"row (x={x}, u={u}) sums to {float(sums[x, u])!r}, not 1")
        if model.strictly_positive:
            for x, u, y in np.argwhere((P >= 0) & (P < POSITIVITY_FLOOR)):
                report.append(f"probability {float(P[x, u, y])!r} at (x={x}, u={u}, y={y}) "
                              f"below {POSITIVITY_FLOOR} but strictly_positive set")
    if not np.all(np.isfinite(model.k)):
        for x, u in np.argwhere(~np.isfinite(model.k)):
            report.append(f"non-finite cost at (x={x}, u={u})")
    return report


def restrict(model, policy) -> ChainModel:
    """Single-action model obtained by fixing the action at each state."""
    policy = check_policy(model, policy)
    k = model.k[np.arange(model.n_states), policy][:, None]
    if isinstance(model, SparseChainModel):
        M = sp.vstack([model.mats[u].getrow(x) for x, u in enumerate(policy)])
        return SparseChainModel((M,), k, model.labels, model.strictly_positive)
    P = model.select(policy)[:, None, :]
    return ChainModel(P, k, model.labels, model.strictly_positive)


def random_model(seed: int, n: int, m: int, delta: float) -> ChainModel:
    """Random strictly positive model, reproducible from ``seed``.

    Each row is ``delta + (1 - n*delta) * w`` with ``w`` uniform on the simplex,
    so every probability is at least ``delta``; costs are uniform on [-1, 1].
    """
    if n < 1 or m < 1:
        raise ModelError("n and m must be positive")
    if delta < 0 or n * delta > 1 + 1e-15:
        raise ModelError(f"infeasible delta={delta} for n={n} (need n*delta <= 1)")
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(n), size=(n, m))
    P = delta + (1.0 - n * delta) * w
    k = rng.uniform(-1.0, 1.0, size=(n, m))
    return ChainModel(P, k, strictly_positive=delta > 0)


# -- serialization ---------------------------------------------------------

def model_from_dict(doc: dict[str, Any]) -> ChainModel:
    if doc.get("type", "chain") != "chain":
        raise ModelError(f"expected a chain document, got type={doc.get('type')!r}")
    try:
        n, m = int(doc["n_states"]), int(doc["n_actions"])
        P, k = doc["P"], doc["k"]
    except KeyError as e:
        raise ModelError(f"missing field {e.args[0]!r}") from None
    if n < 1 or m < 1:
        raise ModelError("n_states and n_actions must be positive")
    try:
        P = np.array(P, dtype=float)
        k = np.array(k, dtype=float)
    except (TypeError, ValueError):
        raise ModelError("P and k must be rectangular numeric arrays") from None
    if P.shape != (n, m, n):
        raise ModelError(f"dimension mismatch: P has shape {P.shape}, expected {(n, m, n)}")
    if k.shape != (n, m):
        raise ModelError(f"dimension mismatch: k has shape {k.shape}, expected {(n, m)}")
    model = ChainModel(P, k, doc.get("labels"), bool(doc.get("strictly_positive", False)))
    report = validate(model)
    if report:
        raise ModelError("; ".join(report))
    return model


def load_model(source: BinaryIO | bytes | str) -> ChainModel:
    """Parse a chain problem document and validate it.

    ``source`` may be a binary stream, raw bytes or a JSON string.
    """
    if hasattr(source, "read"):
        source = source.read()
    try:
        doc = json.loads(source)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ModelError(f"parse error: {e}") from None
    if not isinstance(doc, dict):
        raise ModelError("parse error: top-level value must be an object")
    return model_from_dict(doc)


def model_to_dict(model) -> dict[str, Any]:
    model = model.dense()
    doc = {
        "type": "chain",
        "n_states": model.n_states,
        "n_actions": model.n_actions,
        "P": model.P.tolist(),
        "k": model.k.tolist(),
        "strictly_positive": model.strictly_positive,
    }
    if model.labels is not None:
        doc["labels"] = [lab.tolist() if isinstance(lab, np.ndarray) else lab
                         for lab in model.labels]
    return doc


def serialize(model) -> bytes:
    """JSON bytes for ``model``; floats are written with shortest round-trip repr."""
    buf = io.StringIO()
    json.dump(model_to_dict(model), buf)
    return buf.getvalue().encode()
