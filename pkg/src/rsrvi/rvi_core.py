"""Multiplicative dynamic programming on finite controlled chains.

The Bellman operator is

    T J(x) = min_u exp(k(x, u)) * sum_y P[x, u, y] J(y),

positive, monotone and positively 1-homogeneous.  Its eigenvalue ``Lambda``
(``T V = Lambda V`` with ``V > 0``) is exp of the optimal risk-sensitive cost
rate.  Value iteration divides by a known ``Lambda`` each step; relative value
iteration divides by the current value at a fixed reference state ``x0`` and
recovers ``Lambda`` as the limiting normalizer.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .chain_model import check_policy, check_values

UNDERFLOW_GUARD = 1e-150
OVERFLOW_GUARD = 1e150


@dataclass
class SolverConfig:
    x0: int = 0
    tol: float = 1e-10
    max_iter: int = 100_000
    lam: float | None = None
    log_space: bool = False
    record_trace: bool = True

    def check(self, model) -> None:
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if not 0 <= self.x0 < model.n_states:
            raise ValueError(f"x0={self.x0} out of range [0, {model.n_states})")
        if self.lam is not None and not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class TraceRecord:
    iter: int
    v_x0: float
    span_log_increment: float
    policy_changes: int
    cw_lower: float
    cw_upper: float


@dataclass
class SolveReport:
    """Outcome of :func:`solve_rvi` or :func:`solve_vi`.

    ``cw_lower``/``cw_upper`` are Collatz-Wielandt bounds from the last Bellman
    evaluation; they always bracket the true eigenvalue.
    """

    lambda_est: float
    value: np.ndarray
    policy: np.ndarray
    converged: bool
    iterations: int
    cw_lower: float
    cw_upper: float
    method: str = "rvi"
    diverged: bool = False
    trace: list[TraceRecord] = field(default_factory=list)

    def to_dict(self, with_trace: bool = True) -> dict:
        doc = {
            "method": self.method,
            "lambda_est": float(self.lambda_est),
            "log_lambda_est": float(np.log(self.lambda_est)),
            "value": self.value.tolist(),
            "policy": self.policy.tolist(),
            "converged": bool(self.converged),
            "diverged": bool(self.diverged),
            "iterations": int(self.iterations),
            "cw_lower": float(self.cw_lower),
            "cw_upper": float(self.cw_upper),
        }
        if with_trace:
            doc["trace"] = [asdict(r) for r in self.trace]
        return doc

    def to_json(self, with_trace: bool = True) -> str:
        return json.dumps(self.to_dict(with_trace), indent=2)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "v_x0", "span_log_increment", "policy_changes"])
        for r in self.trace:
            w.writerow([r.iter, repr(r.v_x0), repr(r.span_log_increment), r.policy_changes])
        return buf.getvalue()


def span(x: np.ndarray) -> float:
    return float(np.max(x) - np.min(x))


def _argmin(vals: np.ndarray) -> np.ndarray:
    # np.argmin returns the first minimum: ties go to the lowest action index
    return np.argmin(vals, axis=1)


def bellman_min(model, J) -> tuple[np.ndarray, np.ndarray]:
    """Apply the multiplicative Bellman operator.

    Returns:
        ``(TJ, greedy)`` where ``greedy[x]`` is the minimizing action, ties
        broken toward the lowest index.

    Raises:
        ValueError: if ``J`` has a non-positive entry.
        OverflowError: if ``TJ`` is not finite; use :func:`bellman_min_log`.
    """
    J = check_values(J)
    with np.errstate(over="ignore"):
        vals = model.ek * model.expect(J)
    greedy = _argmin(vals)
    TJ = vals[np.arange(model.n_states), greedy]
    if not np.all(np.isfinite(TJ)):
        raise OverflowError("Bellman update overflowed; rerun with log_space=True")
    if np.any(TJ <= 0):
        raise OverflowError("Bellman update underflowed to zero; rerun with log_space=True")
    return TJ, greedy


def bellman_min_log(model, logJ) -> tuple[np.ndarray, np.ndarray]:
    """Bellman operator on log-values: returns ``(log TJ, greedy)``."""
    logJ = np.asarray(logJ, dtype=float)
    if not np.all(np.isfinite(logJ)):
        raise ValueError("log-values must be finite")
    vals = model.k + model.log_expect(logJ)
    greedy = _argmin(vals)
    return vals[np.arange(model.n_states), greedy], greedy


def vi_step(model, J, lam: float) -> np.ndarray:
    if not lam > 0:
        raise ValueError("lambda must be positive")
    TJ, _ = bellman_min(model, J)
    return TJ / lam


def rvi_step(model, V, x0: int) -> tuple[np.ndarray, float]:
    """One relative value iteration step: ``(T V / V(x0), V(x0))``."""
    V = check_values(V)
    TV, _ = bellman_min(model, V)
    return TV / V[x0], float(V[x0])


def cw_bounds(model, V) -> tuple[float, float]:
    """Collatz-Wielandt bounds ``min TV/V <= Lambda <= max TV/V``."""
    V = check_values(V)
    ratio = bellman_min(model, V)[0] / V
    return float(ratio.min()), float(ratio.max())


def dp_residual(model, V, lam: float) -> float:
    """Relative residual ``max_x |TV(x) - lam V(x)| / (lam V(x))``."""
    V = check_values(V)
    TV, _ = bellman_min(model, V)
    return float(np.max(np.abs(TV - lam * V) / (lam * V)))


def twisted_kernel(model, V, lam: float, policy) -> tuple[np.ndarray, float]:
    """Twisted kernel ``exp(k) P_v(x, y) V(y) / (lam V(x))`` under ``policy``.

    Returns the matrix and its largest row-sum deviation from 1; the matrix is
    stochastic exactly when ``(lam, V, policy)`` solves the DP equation.
    """
    V = check_values(V)
    policy = check_policy(model, policy)
    Pv = model.select(policy)
    kv = model.k[np.arange(model.n_states), policy]
    Q = np.exp(kv)[:, None] * Pv * V[None, :] / (lam * V[:, None])
    return Q, float(np.max(np.abs(Q.sum(axis=1) - 1.0)))


class _Iterate:
    """One iterate held in linear or log representation."""

    def __init__(self, model, V0, log_space: bool):
        self.model = model
        self.log_space = log_space
        V0 = check_values(V0)
        self.logv = np.log(V0) if log_space else None
        self.v = None if log_space else V0

    @property
    def log(self) -> np.ndarray:
        return self.logv if self.log_space else np.log(self.v)

    @property
    def linear(self) -> np.ndarray:
        return np.exp(self.logv) if self.log_space else self.v

    def at(self, x: int) -> float:
        return float(np.exp(self.logv[x]) if self.log_space else self.v[x])

    def apply(self):
        """Return ``(image, log ratio, (lo, hi), greedy)`` for the CW ratio TV/V.

        ``lo``/``hi`` use the same arithmetic as the subsequent rescaling, so the
        new value at any state lies inside them bit for bit.
        """
        if self.log_space:
            logTV, greedy = bellman_min_log(self.model, self.logv)
            log_ratio = logTV - self.logv
            bounds = float(np.exp(log_ratio.min())), float(np.exp(log_ratio.max()))
            return logTV, log_ratio, bounds, greedy
        TV, greedy = bellman_min(self.model, self.v)
        ratio = TV / self.v
        return TV, np.log(ratio), (float(ratio.min()), float(ratio.max())), greedy

    def set_scaled(self, image, log_scale: float, scale: float):
        if self.log_space:
            self.logv = image - log_scale
        else:
            self.v = image / scale


def solve_rvi(model, config: SolverConfig | None = None, V0=None) -> SolveReport:
    """Relative value iteration from ``V0`` (default all ones).

    Iterates ``V <- T V / V(x0)`` until the span of the log increment falls
    below ``config.tol``.  Then ``value(x0) == lambda_est`` exactly, and the
    returned bounds are the CW bounds of the iterate whose image is ``value``.
    Non-convergence is reported in the result, never raised.
    """
    config = config or SolverConfig()
    config.check(model)
    x0 = config.x0
    it = _Iterate(model, np.ones(model.n_states) if V0 is None else V0, config.log_space)
    trace = []
    prev_policy = None
    converged = False
    n = 0
    while n < config.max_iter:
        image, log_ratio, (lo, hi), greedy = it.apply()
        log_norm = it.log[x0]
        norm = it.at(x0)
        # log V_{n+1} - log V_n = log(TV_n / V_n) - log V_n(x0)
        inc = span(log_ratio)
        changes = model.n_states if prev_policy is None else int(np.sum(greedy != prev_policy))
        prev_policy = greedy
        it.set_scaled(image, log_norm, norm)
        n += 1
        if config.record_trace:
            trace.append(TraceRecord(n, it.at(x0), inc, changes, lo, hi))
        if inc < config.tol:
            converged = True
            break
    value = it.linear
    lam = float(value[x0])
    return SolveReport(lam, value, prev_policy, converged, n, lo, hi, "rvi", False, trace)


def solve_vi(model, config: SolverConfig, V0=None) -> SolveReport:
    """Value iteration ``J <- T J / lam`` with a known eigenvalue ``config.lam``.

    Convergence is judged on the sup norm of the log increment (a wrong
    ``lam`` gives a constant, nonzero increment).  Iterates leaving
    ``[1e-150, 1e150]`` stop the run with ``diverged=True``.
    """
    config.check(model)
    if config.lam is None:
        raise ValueError("solve_vi requires config.lam")
    lam, log_lam = config.lam, float(np.log(config.lam))
    x0 = config.x0
    it = _Iterate(model, np.ones(model.n_states) if V0 is None else V0, config.log_space)
    lo_guard, hi_guard = np.log(UNDERFLOW_GUARD), np.log(OVERFLOW_GUARD)
    trace = []
    prev_policy = None
    converged = diverged = False
    n = 0
    while n < config.max_iter:
        image, log_ratio, (lo, hi), greedy = it.apply()
        inc = float(np.max(np.abs(log_ratio - log_lam)))
        changes = model.n_states if prev_policy is None else int(np.sum(greedy != prev_policy))
        prev_policy = greedy
        it.set_scaled(image, log_lam, lam)
        n += 1
        if config.record_trace:
            trace.append(TraceRecord(n, it.at(x0), inc, changes, lo, hi))
        logs = it.log
        if logs.min() < lo_guard or logs.max() > hi_guard:
            diverged = True
            break
        if inc < config.tol:
            converged = True
            break
    return SolveReport(lam, it.linear, prev_policy, converged, n, lo, hi, "vi", diverged, trace)


@dataclass
class CouplingDiagnostic:
    """Per-step comparison of VI (``J_n``) and RVI (``V_n``) from a common start.

    Arrays are indexed by ``n = 0..n_steps``.  ``product[n]`` is
    ``prod_{m<n} lam / V_m(x0)``; ``resid_product[n] = |C_n - product[n]|``;
    ``resid_step[n] = |C_{n+1} - lam / J_n(x0)|`` for ``n < n_steps``.
    """

    ratio_max: np.ndarray
    ratio_min: np.ndarray
    C: np.ndarray
    product: np.ndarray
    resid_product: np.ndarray
    resid_step: np.ndarray
    greedy_agree: np.ndarray

    @property
    def max_ratio_spread(self) -> float:
        return float(np.max(self.ratio_max / self.ratio_min - 1.0))


def coupling_check(model, V0, lam: float, x0: int, n_steps: int) -> CouplingDiagnostic:
    """Run VI and RVI side by side and measure their exact proportionality."""
    J = check_values(V0).copy()
    V = J.copy()
    rmax, rmin, C, prod = [], [], [], []
    resid_step, agree = [], []
    p = 1.0
    for n in range(n_steps + 1):
        r = V / J
        rmax.append(r.max())
        rmin.append(r.min())
        C.append(V[x0] / J[x0])
        prod.append(p)
        if n == n_steps:
            break
        TJ, gJ = bellman_min(model, J)
        TV, gV = bellman_min(model, V)
        agree.append(bool(np.all(gJ == gV)))
        p *= lam / V[x0]
        J_next = TJ / lam
        V_next = TV / V[x0]
        resid_step.append(abs(V_next[x0] / J_next[x0] - lam / J[x0]))
        J, V = J_next, V_next
    C = np.array(C)
    prod = np.array(prod)
    return CouplingDiagnostic(np.array(rmax), np.array(rmin), C, prod,
                              np.abs(C - prod), np.array(resid_step), np.array(agree))
