"""Ground truth for the multiplicative eigenvalue by policy enumeration.

For a fixed stationary policy ``v`` the DP equation is linear:
``Q_v(x, y) = exp(k(x, v(x))) P[x, v(x), y]`` and its Perron root ``rho(Q_v)``
is the growth factor under ``v``.  Any positive solution of the DP equation
satisfies ``Lambda V <= Q_v V`` for every ``v``, so ``Lambda = min_v rho(Q_v)``,
attained at the greedy policy.  This module computes that minimum by brute
force and is independent of the iteration code in :mod:`rsrvi.rvi_core`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .chain_model import check_policy

ENUMERATION_CAP = 10**6
DENSE_CAP = 50
_CHUNK = 4096


class OracleError(RuntimeError):
    pass


@dataclass
class PerronResult:
    rho: float
    eigvec: np.ndarray
    iterations: int
    residual: float


def policy_matrix(model, policy) -> np.ndarray:
    """Nonnegative matrix ``Q_v`` of the chain restricted to ``policy``."""
    policy = check_policy(model, policy)
    kv = model.k[np.arange(model.n_states), policy]
    return np.exp(kv)[:, None] * model.select(policy)


def _residual(Q, rho, v):
    return np.max(np.abs(Q @ v - rho * v) / (rho * v))


def _batched_power(Q: np.ndarray, x0: int, tol: float, max_iter: int):
    """Power iteration on a stack of matrices ``Q[b]``, normalized at ``x0``.

    Returns per-matrix ``(rho, eigvec, iterations, residual)`` arrays.  Each
    matrix stops updating once its relative residual is within ``tol``.
    """
    B, n, _ = Q.shape
    v = np.ones((B, n))
    rho = np.ones(B)
    iters = np.zeros(B, dtype=int)
    res = np.full(B, np.inf)
    active = np.arange(B)
    for it in range(1, max_iter + 1):
        va = v[active]
        w = np.einsum("bxy,by->bx", Q[active], va)
        r = w[:, x0]  # va[:, x0] == 1
        resid = np.max(np.abs(w - r[:, None] * va) / (r[:, None] * va), axis=1)
        rho[active] = r
        res[active] = resid
        iters[active] = it
        done = resid <= tol
        # converged rows keep the vector whose residual was measured
        keep = active[~done]
        v[keep] = w[~done] / r[~done, None]
        active = keep
        if active.size == 0:
            break
    return rho, v, iters, res


def policy_perron(model, policy, tol: float = 1e-13, max_iter: int = 100_000,
                  x0: int = 0) -> PerronResult:
    """Perron root of ``Q_v`` by power iteration, normalized so ``eigvec[x0] = 1``.

    Raises:
        OracleError: if the residual is not below ``tol`` after ``max_iter``.
    """
    Q = policy_matrix(model, policy)
    rho, v, iters, res = _batched_power(Q[None], x0, tol, max_iter)
    if not res[0] <= tol:
        raise OracleError(f"power iteration did not reach tol={tol} in {max_iter} "
                          f"iterations (residual {res[0]:.3e})")
    return PerronResult(float(rho[0]), v[0], int(iters[0]), float(res[0]))


def dense_perron(model, policy) -> PerronResult:
    """Perron root of ``Q_v`` from a full eigendecomposition (``n <= 50``)."""
    if model.n_states > DENSE_CAP:
        raise OracleError(f"dense_perron limited to {DENSE_CAP} states")
    Q = policy_matrix(model, policy)
    w, U = np.linalg.eig(Q)
    i = int(np.argmax(w.real))
    rho = float(w[i].real)
    v = U[:, i].real
    v = v / v[np.argmax(np.abs(v))]
    return PerronResult(rho, v, 0, float(_residual(Q, rho, v)))


def n_policies(model) -> int:
    return model.n_actions ** model.n_states


def enumerate_min(model, cap: int = ENUMERATION_CAP, tol: float = 1e-13,
                  max_iter: int = 100_000) -> tuple[float, np.ndarray]:
    """Minimize the Perron root over all deterministic stationary policies.

    Policies are visited in lexicographic order and the first minimizer wins.

    Returns:
        ``(lambda_star, best_policy)``.
    """
    total = n_policies(model)
    if total > cap:
        raise OracleError(f"{total} policies exceeds enumeration cap {cap}")
    n = model.n_states
    rows = np.arange(n)
    Ek = np.exp(model.k)
    best_rho, best = np.inf, None
    policies = itertools.product(range(model.n_actions), repeat=n)
    while True:
        chunk = np.array(list(itertools.islice(policies, _CHUNK)), dtype=np.intp)
        if chunk.size == 0:
            break
        Q = Ek[rows, chunk][:, :, None] * model.P[rows, chunk, :]
        rho, _, _, res = _batched_power(Q, 0, tol, max_iter)
        if not np.all(res <= tol):
            raise OracleError("power iteration failed to converge for some policy")
        i = int(np.argmin(rho))
        if rho[i] < best_rho:
            best_rho, best = float(rho[i]), chunk[i].copy()
    return best_rho, best
