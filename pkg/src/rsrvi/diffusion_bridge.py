"""Markov chain approximation of controlled diffusions on a box.

The generator ``L_u f = 1/2 sum_i a_ii f_ii + sum_i b_i f_i`` (diagonal
``a = sigma^2``) is discretized on a uniform grid over ``[-R, R]^dim`` with
central second differences.  Multiplying the rates by ``dt`` gives transition
probabilities.  With the ``"upwind"`` first difference

    p(x +- h e_i | x, u) = dt * (a_ii / (2 h^2) + b_i^{+-} / h),

and with the ``"central"`` one (the default)

    p(x +- h e_i | x, u) = dt * (a_ii / (2 h^2) +- b_i / (2 h)),

used wherever ``h |b_i| <= a_ii`` keeps both probabilities nonnegative; other
nodes fall back to upwind.  Upwinding adds numerical diffusion ``h |b| / 2``,
an O(h) eigenvalue bias that the central form avoids.  In both cases
``p(x | x, u) = 1 - (sum of the moves)`` and the stage cost is
``k_h = dt * c``.  Moves that would leave the box stay put (reflecting
boundary).  The multiplicative eigenvalue ``Lambda_h`` of the
chain approximates ``exp(lambda* dt)``, so ``lambda* ~ log(Lambda_h) / dt``.

Two time-stepping schemes are provided for the value iteration and relative
value iteration flows:

``"normalized"``
    the multiplicative chain recursion ``Phi <- T_h Phi / normalizer``;
``"euler-ode"``
    explicit Euler for ``dPhi/dt = min_u [L_u Phi + c Phi] - Phi(x0) Phi``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
import scipy.sparse as sp

from .chain_model import ModelError, SparseChainModel, check_values
from .expr import Expr, ExprError, variables
from .rvi_core import SolveReport, SolverConfig, bellman_min, solve_rvi

MODES = ("normalized", "euler-ode")
SCHEMES = ("central", "upwind")
CFL_SAFETY = 0.9


class DiscretizationError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionModel:
    """Controlled diffusion ``dX = b(X, U) dt + sigma(X) dW`` on ``[-R, R]^dim``.

    ``drift(x, u)`` and ``sigma(x)`` map states of shape ``(N, dim)`` to arrays
    of the same shape; ``cost(x, u)`` returns shape ``(N,)``.  Continuous action
    sets must be sampled into ``actions`` beforehand.
    """

    dim: int
    drift: Callable
    sigma: Callable
    cost: Callable
    actions: tuple
    radius: float
    source: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise DiscretizationError(f"dim must be 1 or 2, got {self.dim}")
        if not self.radius > 0:
            raise DiscretizationError("radius must be positive")
        if len(self.actions) == 0:
            raise DiscretizationError("at least one action is required")
        object.__setattr__(self, "actions", tuple(float(a) for a in self.actions))

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "DiffusionModel":
        if doc.get("type") != "diffusion":
            raise ModelError(f"expected a diffusion document, got type={doc.get('type')!r}")
        try:
            dim = int(doc["dim"])
            drift, sigma, cost = doc["drift"], doc["sigma"], doc["cost"]
            actions, radius = doc["actions"], float(doc["radius"])
        except KeyError as e:
            raise ModelError(f"missing field {e.args[0]!r}") from None
        drift = [drift] if isinstance(drift, str) else list(drift)
        sigma = [sigma] if isinstance(sigma, str) else list(sigma)
        if len(drift) != dim or len(sigma) != dim:
            raise ModelError(f"drift and sigma need {dim} component(s)")
        try:
            drift_e = [Expr(s) for s in drift]
            sigma_e = [Expr(s) for s in sigma]
            cost_e = Expr(cost)
        except ExprError as e:
            raise ModelError(f"bad expression: {e}") from None
        allowed = {f"x{i + 1}" for i in range(dim)}
        for e in drift_e + [cost_e]:
            if not variables(e.tree) <= allowed | {"u"}:
                raise ModelError(f"{e.text!r} uses variables outside {sorted(allowed | {'u'})}")
        for e in sigma_e:
            if not variables(e.tree) <= allowed:
                raise ModelError(f"sigma {e.text!r} may only depend on the state")
        source = {"type": "diffusion", "dim": dim, "drift": drift, "sigma": sigma,
                  "cost": cost, "actions": list(actions), "radius": radius}
        return cls(
            dim,
            lambda x, u: np.stack([e(x, u) for e in drift_e], axis=1),
            lambda x: np.stack([e(x) for e in sigma_e], axis=1),
            lambda x, u: cost_e(x, u),
            tuple(actions),
            radius,
            source,
        )

    def with_cost_shift(self, c0: float) -> "DiffusionModel":
        cost = self.cost
        source = None
        if self.source is not None:
            source = dict(self.source, cost=f"({self.source['cost']}) + ({c0!r})")
        return DiffusionModel(self.dim, self.drift, self.sigma,
                              lambda x, u: cost(x, u) + c0, self.actions, self.radius, source)

    def with_radius(self, radius: float) -> "DiffusionModel":
        source = None if self.source is None else dict(self.source, radius=radius)
        return DiffusionModel(self.dim, self.drift, self.sigma, self.cost,
                              self.actions, radius, source)


@dataclass(frozen=True)
class GridSpec:
    """Mesh width ``h`` (scalar or per dimension) and time step ``dt``.

    ``dt=None`` selects ``0.9`` times the largest step allowed by the CFL bound.
    """

    h: float | tuple
    dt: float | None = None
    boundary: str = "reflecting"
    scheme: str = "central"

    def __post_init__(self):
        if self.boundary != "reflecting":
            raise DiscretizationError("only reflecting boundaries are supported")
        if self.scheme not in SCHEMES:
            raise DiscretizationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")


@dataclass(frozen=True, eq=False)
class DiscretizedProblem:
    chain: SparseChainModel
    coords: np.ndarray
    dt: float
    x0: int
    shape: tuple
    h: tuple
    lambda_ref: float | None = None
    model: DiffusionModel | None = None

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.unique(self.coords[:, i]) for i in range(self.coords.shape[1])]


def grid_axes(radius: float, h: tuple) -> list[np.ndarray]:
    axes = []
    for hi in h:
        cells = 2.0 * radius / hi
        n = int(round(cells))
        if n < 2 or abs(n - cells) > 1e-9 * max(1.0, cells):
            raise DiscretizationError(f"mesh width {hi} must divide 2R={2 * radius} "
                                      "into at least two cells")
        axes.append(-radius + hi * np.arange(n + 1))
    return axes


def _rates(model: DiffusionModel, X: np.ndarray, h: np.ndarray):
    """Per-action ``(a, b)`` arrays of shape (N, dim) and the CFL load per node."""
    s = np.asarray(model.sigma(X), dtype=float)
    if not np.all(np.isfinite(s)):
        raise DiscretizationError("sigma is not finite on the grid")
    if np.any(s <= 0):
        x = int(np.flatnonzero((s <= 0).any(axis=1))[0])
        raise DiscretizationError(f"non-elliptic sigma at state {x} (x={X[x].tolist()})")
    a = s * s
    out = []
    for u in model.actions:
        b = np.asarray(model.drift(X, u), dtype=float)
        if not np.all(np.isfinite(b)):
            raise DiscretizationError(f"drift is not finite on the grid for action {u}")
        load = (a / h**2 + np.abs(b) / h).sum(axis=1)
        out.append((b, load))
    return a, out


def cfl_dt(model: DiffusionModel, h) -> float:
    """Largest ``dt`` keeping every self-transition probability nonnegative."""
    h = np.broadcast_to(np.asarray(h, dtype=float), (model.dim,))
    axes = grid_axes(model.radius, tuple(h))
    X = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    _, rates = _rates(model, X, h)
    return 1.0 / max(load.max() for _, load in rates)


def build_chain(model: DiffusionModel, grid: GridSpec) -> DiscretizedProblem:
    """Assemble the Markov chain approximation on the grid.

    States are grid nodes in C order (first coordinate slowest).  The
    reference state is the node nearest the origin.

    Raises:
        DiscretizationError: on a CFL violation (naming the first offending
            state) or a non-positive ``sigma``.
    """
    h = np.broadcast_to(np.asarray(grid.h, dtype=float), (model.dim,)).copy()
    axes = grid_axes(model.radius, tuple(h))
    shape = tuple(len(ax) for ax in axes)
    X = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    N = X.shape[0]
    a, rates = _rates(model, X, h)
    max_load = max(load.max() for _, load in rates)
    dt = CFL_SAFETY / max_load if grid.dt is None else float(grid.dt)
    if not dt > 0:
        raise DiscretizationError("dt must be positive")
    for j, (_, load) in enumerate(rates):
        bad = np.flatnonzero(dt * load > 1.0 + 1e-12)
        if bad.size:
            x = int(bad[0])
            raise DiscretizationError(
                f"CFL violated at state {x} (x={X[x].tolist()}, action {model.actions[j]}): "
                f"dt*load = {dt * load[x]:.6g} > 1; need dt <= {1.0 / load[x]:.6g}")

    strides = [int(np.prod(shape[i + 1:])) for i in range(model.dim)]
    multi = np.stack(np.unravel_index(np.arange(N), shape), axis=1)
    mats, costs = [], []
    for j, (b, _) in enumerate(rates):
        rows, cols, vals = [], [], []
        off = np.zeros(N)
        for i in range(model.dim):
            diff = dt * a[:, i] / (2 * h[i] ** 2)
            up = diff + dt * np.maximum(b[:, i], 0.0) / h[i]
            down = diff + dt * np.maximum(-b[:, i], 0.0) / h[i]
            if grid.scheme == "central":
                ok = h[i] * np.abs(b[:, i]) <= a[:, i]
                half = dt * b[:, i] / (2 * h[i])
                up = np.where(ok, diff + half, up)
                down = np.where(ok, diff - half, down)
            has_up = multi[:, i] < shape[i] - 1
            has_down = multi[:, i] > 0
            for mask, p, step in ((has_up, up, strides[i]), (has_down, down, -strides[i])):
                r = np.flatnonzero(mask)
                rows.append(r)
                cols.append(r + step)
                vals.append(p[r])
                off[r] += p[r]
        rows.append(np.arange(N))
        cols.append(np.arange(N))
        vals.append(1.0 - off)
        M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(N, N))
        mats.append(M)
        c = np.asarray(model.cost(X, model.actions[j]), dtype=float)
        if not np.all(np.isfinite(c)):
            raise DiscretizationError(f"cost is not finite on the grid for action {j}")
        costs.append(dt * c)
    chain = SparseChainModel(tuple(mats), np.stack(costs, axis=1))
    x0 = int(np.argmin(np.sum(X * X, axis=1)))
    return DiscretizedProblem(chain, X, dt, x0, shape, tuple(h), None, model)


def load_diffusion(source) -> tuple[DiffusionModel, GridSpec]:
    """Parse a diffusion problem document into a model and grid."""
    if hasattr(source, "read"):
        source = source.read()
    try:
        doc = json.loads(source)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ModelError(f"parse error: {e}") from None
    if not isinstance(doc, dict):
        raise ModelError("parse error: top-level value must be an object")
    model = DiffusionModel.from_dict(doc)
    if "h" not in doc:
        raise ModelError("missing field 'h'")
    h = doc["h"]
    h = float(h) if not isinstance(h, list) else tuple(float(v) for v in h)
    dt = doc.get("dt", "auto")
    scheme = doc.get("scheme", "central")
    try:
        grid = GridSpec(h, None if dt in ("auto", None) else float(dt), scheme=scheme)
    except DiscretizationError as e:
        raise ModelError(str(e)) from None
    return model, grid


def diffusion_to_dict(model: DiffusionModel, grid: GridSpec) -> dict:
    if model.source is None:
        raise ModelError("only expression-defined models can be serialized")
    doc = dict(model.source)
    doc["h"] = list(grid.h) if isinstance(grid.h, tuple) else grid.h
    doc["dt"] = "auto" if grid.dt is None else grid.dt
    doc["scheme"] = grid.scheme
    return doc


# -- time stepping ---------------------------------------------------------

@dataclass
class ParabolicResult:
    """Final iterate and the path of the value at the reference node.

    For relative value iteration ``lambda_path`` is the running eigenvalue
    estimate and ``lambda_est`` its last entry.  ``ground_state`` is the final
    iterate scaled to 1 at the reference node.
    """

    phi: np.ndarray
    times: np.ndarray
    x0_path: np.ndarray
    mode: str
    steps: int
    x0: int
    lambda_est: float | None = None
    lambda_path: np.ndarray | None = None
    negative: bool = False

    @property
    def ground_state(self) -> np.ndarray:
        return self.phi / self.phi[self.x0]


def _initial(problem: DiscretizedProblem, Phi0) -> np.ndarray:
    if Phi0 is None:
        return np.ones(problem.chain.n_states)
    Phi0 = check_values(Phi0)
    if Phi0.shape != (problem.chain.n_states,):
        raise ValueError("Phi0 does not match the grid size")
    return Phi0.copy()


def _n_steps(problem: DiscretizedProblem, t_end: float) -> int:
    if t_end < 0:
        raise ValueError("t_end must be nonnegative")
    return int(round(t_end / problem.dt))


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _euler_min(chain, phi):
    """``min_u [P_u phi + k_h(., u) phi]``: one explicit Euler step without the eigen term."""
    vals = chain.expect(phi) + chain.k * phi[:, None]
    g = np.argmin(vals, axis=1)
    return vals[np.arange(chain.n_states), g]


def run_parabolic_vi(problem: DiscretizedProblem, lambda_ref: float, Phi0=None,
                     t_end: float = 1.0, mode: str = "normalized") -> ParabolicResult:
    """Value iteration flow with a known eigenvalue ``lambda_ref``.

    ``normalized``: ``Phi <- exp(-lambda_ref dt) T_h Phi``.
    ``euler-ode``:  ``Phi <- min_u [P_u Phi + dt c Phi] - dt lambda_ref Phi``.
    """
    _check_mode(mode)
    phi = _initial(problem, Phi0)
    n = _n_steps(problem, t_end)
    chain, dt, x0 = problem.chain, problem.dt, problem.x0
    damp = np.exp(-lambda_ref * dt)
    path = np.empty(n + 1)
    path[0] = phi[x0]
    negative = False
    steps = 0
    for step in range(1, n + 1):
        if mode == "normalized":
            phi = bellman_min(chain, phi)[0] * damp
        else:
            phi = _euler_min(chain, phi) - dt * lambda_ref * phi
            if np.any(phi <= 0):
                negative = True
                path[step] = phi[x0]
                steps = step
                break
        path[step] = phi[x0]
        steps = step
    return ParabolicResult(phi, dt * np.arange(steps + 1), path[:steps + 1], mode, steps,
                           x0, negative=negative)


def run_parabolic_rvi(problem: DiscretizedProblem, Phi0=None, t_end: float = 1.0,
                      mode: str = "normalized", tol: float | None = None) -> ParabolicResult:
    """Relative value iteration flow; the eigenvalue emerges at the reference node.

    ``normalized``: ``V <- T_h V / V(x0)``; the running estimate is
    ``log(V(x0)) / dt`` after each step.
    ``euler-ode``: ``Phi <- min_u [P_u Phi + dt c Phi] - dt Phi(x0) Phi``; the
    running estimate is ``Phi(x0)`` itself.

    If ``tol`` is given the run stops early once the step change (span of the
    log increment, or the sup-norm change of ``Phi`` divided by ``dt``) is
    below it.  Negative values in euler-ode mode stop the run with
    ``negative=True``; reduce ``dt``.
    """
    _check_mode(mode)
    phi = _initial(problem, Phi0)
    n = _n_steps(problem, t_end)
    chain, dt, x0 = problem.chain, problem.dt, problem.x0
    path = np.empty(n + 1)
    lam_path = np.full(n + 1, np.nan)
    path[0] = phi[x0]
    lam_path[0] = np.log(phi[x0]) / dt if mode == "normalized" else phi[x0]
    negative = False
    steps = 0
    for step in range(1, n + 1):
        if mode == "normalized":
            TV = bellman_min(chain, phi)[0]
            new = TV / phi[x0]
            change = np.ptp(np.log(TV / phi)) if tol is not None else None
            lam_path[step] = np.log(new[x0]) / dt
        else:
            new = _euler_min(chain, phi) - dt * phi[x0] * phi
            change = np.max(np.abs(new - phi)) / dt if tol is not None else None
            lam_path[step] = new[x0]
        phi = new
        path[step] = phi[x0]
        steps = step
        if mode == "euler-ode" and np.any(phi <= 0):
            negative = True
            break
        if tol is not None and change < tol:
            break
    return ParabolicResult(phi, dt * np.arange(steps + 1), path[:steps + 1], mode, steps,
                           x0, float(lam_path[steps]), lam_path[:steps + 1], negative)


@dataclass
class RatioDiagnostic:
    """Spatial coefficient of variation of ``Phi_vi / Phi_rvi`` at each step.

    ``constant`` is ``max_cov / dt``, the first-order constant for euler-ode mode.
    """

    times: np.ndarray
    cov: np.ndarray
    mode: str
    dt: float
    lambda_ref: float

    @property
    def max_cov(self) -> float:
        return float(np.max(self.cov))

    @property
    def constant(self) -> float:
        return self.max_cov / self.dt


def ratio_diagnostic(problem: DiscretizedProblem, Phi0=None, t_end: float = 1.0,
                     mode: str = "normalized", lambda_ref: float | None = None) -> RatioDiagnostic:
    """Run VI and RVI from the same start and track how far their ratio is from constant."""
    _check_mode(mode)
    if lambda_ref is None:
        lambda_ref = lambda_from_chain(problem)
    vi = _initial(problem, Phi0)
    rvi = vi.copy()
    n = _n_steps(problem, t_end)
    chain, dt, x0 = problem.chain, problem.dt, problem.x0
    damp = np.exp(-lambda_ref * dt)
    cov = np.zeros(n + 1)
    for step in range(1, n + 1):
        if mode == "normalized":
            vi = bellman_min(chain, vi)[0] * damp
            rvi = bellman_min(chain, rvi)[0] / rvi[x0]
        else:
            vi = _euler_min(chain, vi) - dt * lambda_ref * vi
            rvi = _euler_min(chain, rvi) - dt * rvi[x0] * rvi
        r = vi / rvi
        cov[step] = np.std(r) / np.mean(r)
    return RatioDiagnostic(dt * np.arange(n + 1), cov, mode, dt, lambda_ref)


# -- eigenvalue extraction -------------------------------------------------

def solve_chain(problem: DiscretizedProblem, config: SolverConfig | None = None,
                V0=None) -> SolveReport:
    """Relative value iteration on the grid chain with the origin as reference."""
    config = config or SolverConfig(tol=1e-10, max_iter=10**7, record_trace=False)
    config = SolverConfig(problem.x0, config.tol, config.max_iter, None,
                          config.log_space, config.record_trace)
    return solve_rvi(problem.chain, config, V0)


class NonConvergenceError(RuntimeError):
    pass


def lambda_from_chain(problem: DiscretizedProblem, report: SolveReport | None = None) -> float:
    """Continuous-time eigenvalue ``log(Lambda_h) / dt`` of the grid chain."""
    report = report or solve_chain(problem)
    if not report.converged:
        raise NonConvergenceError(f"relative value iteration did not converge in "
                                  f"{report.iterations} iterations")
    return float(np.log(report.lambda_est) / problem.dt)


# -- closed-form benchmark -------------------------------------------------

def ou_reference(alpha: float) -> tuple[float, Callable]:
    """Exact eigenpair for ``b = -x``, ``sigma = sqrt(2)``, ``c = alpha x^2`` in 1D.

    ``Psi(x) = exp(beta x^2)`` solves ``Psi'' - x Psi' + alpha x^2 Psi = lambda Psi``
    when ``4 beta^2 - 2 beta + alpha = 0``; the smaller root gives the ground
    state, ``beta = (1 - sqrt(1 - 4 alpha)) / 4`` and ``lambda = 2 beta``.
    """
    if not 0 < alpha < 0.25:
        raise ValueError(f"alpha must lie in (0, 1/4), got {alpha}")
    beta = (1.0 - np.sqrt(1.0 - 4.0 * alpha)) / 4.0
    return 2.0 * beta, lambda x: np.exp(beta * np.asarray(x, dtype=float) ** 2)


def ou_model(alpha: float = 3 / 16, radius: float = 6.0) -> DiffusionModel:
    return DiffusionModel.from_dict({
        "type": "diffusion", "dim": 1, "drift": "-x1", "sigma": "2^0.5",
        "cost": f"{alpha!r} * x1^2", "actions": [0.0], "radius": radius,
    })
