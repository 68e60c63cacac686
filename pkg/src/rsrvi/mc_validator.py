"""Monte Carlo checks of eigen-solutions through exact finite-horizon identities.

For an eigen-triple ``(Lambda, V, v)`` of a chain, iterating the DP equation
under the minimizing selector gives

    E_x[ exp(sum_{m<N} k(X_m, v(X_m))) V(X_N) ] = Lambda^N V(x),

and for a diffusion with ground state ``Psi`` and eigenvalue ``lambda``

    E_x[ exp(int_0^T (c - lambda) dt) Psi(X_T) ] = Psi(x).

Both estimators below should average to 1.  Random numbers come from Philox
streams keyed by ``seed`` with the block index in the counter, so results
do not depend on how blocks are scheduled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .chain_model import check_policy, check_values
from .rvi_core import dp_residual
from .spectral_oracle import policy_matrix

BLOCK = 8192


@dataclass
class McConfig:
    seed: int = 0
    n_paths: int = 100_000
    horizon: float = 5
    dt_sim: float = 0.01

    def check(self):
        if self.n_paths < 100:
            raise ValueError("n_paths must be at least 100")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be positive")


@dataclass
class McResult:
    ratio_mean: float
    std_err: float
    n_paths: int
    aborted_paths: int
    seed: int
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GrowthEstimate:
    lambda_hat: float
    ci_half_width: float
    n_paths: int
    aborted_paths: int
    seed: int
    horizon: float
    note: str = ("finite-horizon estimate of a limsup growth rate; biased and "
                 "dominated by the upper tail, use as a sanity bound only")

    def to_dict(self) -> dict:
        return asdict(self)


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, block]))


def _blocks(n_paths: int):
    for b, start in enumerate(range(0, n_paths, BLOCK)):
        yield b, min(BLOCK, n_paths - start)


def _mean_se(w: np.ndarray) -> tuple[float, float]:
    return float(np.mean(w)), float(np.std(w, ddof=1) / np.sqrt(w.size))


def chain_identity_check(model, policy, V, lam: float, x_start: int, cfg: McConfig,
                         tol: float = 1e-10) -> McResult:
    """Estimate ``E[exp(sum k) V(X_N)] / (lam^N V(x_start))`` over ``N = cfg.horizon`` steps.

    Raises:
        ValueError: if ``(lam, V, policy)`` is not an eigen-triple to within
            ``100 * tol`` (both the DP residual and the residual under ``policy``).
    """
    cfg.check()
    V = check_values(V)
    policy = check_policy(model, policy)
    Q = policy_matrix(model, policy)
    pol_res = float(np.max(np.abs(Q @ V - lam * V) / (lam * V)))
    res = dp_residual(model, V, lam)
    if res > 100 * tol or pol_res > 100 * tol:
        raise ValueError(f"not an eigen-triple: DP residual {res:.3e}, policy residual "
                         f"{pol_res:.3e} exceed {100 * tol:.1e}")
    N = int(cfg.horizon)
    if N != cfg.horizon:
        raise ValueError("chain horizon must be an integer number of steps")
    n = model.n_states
    rows = np.arange(n)
    kv = model.k[rows, policy]
    cum = np.cumsum(model.select(policy), axis=1)
    logV = np.log(V)
    shift = N * np.log(lam) + logV[x_start]
    out = np.empty(cfg.n_paths)
    pos = 0
    for b, size in _blocks(cfg.n_paths):
        rng = block_rng(cfg.seed, b)
        X = np.full(size, x_start)
        logw = np.zeros(size)
        for _ in range(N):
            logw += kv[X]
            u = rng.random(size)
            X = np.minimum((u[:, None] >= cum[X]).sum(axis=1), n - 1)
        out[pos:pos + size] = np.exp(logw + logV[X] - shift)
        pos += size
    mean, se = _mean_se(out)
    return McResult(mean, se, cfg.n_paths, 0, cfg.seed)


# -- diffusions ------------------------------------------------------------

def _node_index(problem, X: np.ndarray) -> np.ndarray:
    """Nearest grid node for each row of ``X`` (clamped to the box)."""
    idx = np.zeros(X.shape[0], dtype=np.intp)
    for i, (n, h) in enumerate(zip(problem.shape, problem.h)):
        j = np.clip(np.rint((X[:, i] + problem.model.radius) / h), 0, n - 1).astype(np.intp)
        idx = idx * n + j
    return idx


def _interpolator(problem, values: np.ndarray):
    axes = problem.axes
    R = problem.model.radius
    if len(axes) == 1:
        ax = axes[0]
        return lambda X: np.interp(np.clip(X[:, 0], -R, R), ax, values)
    from scipy.interpolate import RegularGridInterpolator
    f = RegularGridInterpolator(axes, values.reshape(problem.shape))
    return lambda X: f(np.clip(X, -R, R))


def _simulate(model, cfg: McConfig, problem, policy, x_start, lam: float, terminal):
    """Euler-Maruyama paths; returns per-path ``(int_0^T (c - lam) dt, terminal(X_T))``
    with aborted paths removed, plus the abort count and effective horizon."""
    cfg.check()
    steps = int(round(cfg.horizon / cfg.dt_sim))
    dt = cfg.dt_sim
    sq = np.sqrt(dt)
    dim = model.dim
    x_start = np.zeros(dim) if x_start is None else np.asarray(x_start, dtype=float).reshape(dim)
    if policy is not None:
        if problem is None:
            raise ValueError("a grid policy needs the discretized problem for lookup")
        policy = check_policy(problem.chain, policy)
    limit = 10.0 * model.radius
    ints, terms = [], []
    aborted = 0
    for b, size in _blocks(cfg.n_paths):
        rng = block_rng(cfg.seed, b)
        X = np.tile(x_start, (size, 1))
        csum = np.zeros(size)
        alive = np.ones(size, dtype=bool)
        for _ in range(steps):
            if policy is None:
                acts = np.zeros(size, dtype=np.intp)
            else:
                acts = policy[_node_index(problem, X)]
            drift = np.empty_like(X)
            cost = np.empty(size)
            for j in np.unique(acts):
                m = acts == j
                u = model.actions[j]
                drift[m] = model.drift(X[m], u)
                cost[m] = model.cost(X[m], u)
            csum += np.where(alive, cost, 0.0)
            Z = rng.standard_normal((size, dim))
            X = X + drift * dt + model.sigma(X) * sq * Z
            blown = alive & ~(np.max(np.abs(X), axis=1) <= limit)
            if blown.any():
                alive &= ~blown
                X[~alive] = 0.0
        aborted += int(size - alive.sum())
        ints.append((csum * dt - steps * dt * lam)[alive])
        terms.append(terminal(X[alive]))
    return np.concatenate(ints), np.concatenate(terms), aborted, steps * dt


def sde_growth_estimate(model, cfg: McConfig, problem=None, policy=None,
                        x_start=None) -> GrowthEstimate:
    """``(1/T) log E[exp(int_0^T c dt)]`` by Euler-Maruyama simulation.

    ``policy`` is an action index per grid node of ``problem`` and is applied
    at the nearest node; ``None`` uses the first action everywhere.  Paths
    leaving ``|x| <= 10 R`` are dropped and counted.
    """
    ints, _, aborted, T = _simulate(model, cfg, problem, policy, x_start, 0.0,
                                    lambda X: np.ones(X.shape[0]))
    if ints.size < 2:
        raise RuntimeError("all simulated paths exploded")
    if T == 0:
        return GrowthEstimate(0.0, 0.0, cfg.n_paths, aborted, cfg.seed, T)
    top = ints.max()
    w = np.exp(ints - top)
    mean, se = _mean_se(w)
    lam_hat = (top + np.log(mean)) / T
    return GrowthEstimate(float(lam_hat), float(1.96 * se / mean / T), cfg.n_paths,
                          aborted, cfg.seed, T)


def sde_martingale_check(model, problem, psi_h, lam: float, cfg: McConfig, policy=None,
                         x_start=None) -> McResult:
    """Estimate ``E_x[exp(int (c - lam) dt) Psi_h(X_T)] / Psi_h(x)``.

    ``psi_h`` lives on the grid of ``problem`` and is linearly interpolated;
    states outside the box use the value at the nearest face.
    """
    psi_h = check_values(psi_h)
    interp = _interpolator(problem, psi_h)
    dim = model.dim
    x = np.zeros((1, dim)) if x_start is None else np.asarray(x_start, dtype=float).reshape(1, dim)
    ints, terms, aborted, _ = _simulate(model, cfg, problem, policy, x[0], lam, interp)
    w = np.exp(ints) * terms / interp(x)[0]
    mean, se = _mean_se(w)
    return McResult(mean, se, cfg.n_paths, aborted, cfg.seed,
                    "expected 1 up to time-step, grid and truncation error")
