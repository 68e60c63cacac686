"""Command-line entry point: ``rsrvi <command> FILE [options]``.

Commands: validate, solve, oracle, discretize, pde, mc.  Results are JSON (and
CSV for traces and ground states).  When ``--out`` is given a run manifest is
written next to it as ``<out>.manifest.json``; otherwise the manifest goes to
stderr as one JSON line.

Exit codes: 0 success, 1 invalid input, 2 non-convergence, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .chain_model import ChainModel, ModelError, model_from_dict, model_to_dict, validate
from .diffusion_bridge import (DiscretizationError, NonConvergenceError, build_chain,
                               lambda_from_chain, load_diffusion, run_parabolic_rvi,
                               solve_chain)
from .mc_validator import McConfig, chain_identity_check, sde_growth_estimate, sde_martingale_check
from .rvi_core import SolverConfig, solve_rvi, solve_vi
from .spectral_oracle import OracleError, enumerate_min, n_policies

EXIT_OK, EXIT_INPUT, EXIT_NONCONV, EXIT_INTERNAL = 0, 1, 2, 3


class InputError(Exception):
    pass


def _read_doc(path: str) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InputError(f"parse error in {path}: {e}") from None
    if not isinstance(doc, dict):
        raise InputError(f"parse error in {path}: top-level value must be an object")
    return doc


def _load_chain(path: str) -> ChainModel:
    return model_from_dict(_read_doc(path))


def _load_diffusion(path: str):
    return load_diffusion(Path(path).read_bytes())


def _emit(args, text: str, outputs: list):
    if args.out:
        Path(args.out).write_text(text)
        outputs.append(args.out)
    else:
        sys.stdout.write(text)


def _json(doc) -> str:
    return json.dumps(doc, indent=2) + "\n"


def _solver_config(args) -> SolverConfig:
    return SolverConfig(x0=args.x0, tol=args.tol, max_iter=args.max_iter, lam=args.lam,
                        log_space=args.log_space)


# -- commands --------------------------------------------------------------

def cmd_validate(args, outputs) -> int:
    doc = _read_doc(args.file)
    if doc.get("type") == "diffusion":
        model, grid = _load_diffusion(args.file)
        report = validate(build_chain(model, grid).chain)
    else:
        try:
            n, m = int(doc["n_states"]), int(doc["n_actions"])
            P = np.array(doc["P"], dtype=float)
            k = np.array(doc["k"], dtype=float)
        except KeyError as e:
            raise InputError(f"missing field {e.args[0]!r}") from None
        except (TypeError, ValueError):
            raise InputError("P and k must be rectangular numeric arrays") from None
        if P.shape != (n, m, n) or k.shape != (n, m):
            raise InputError(f"dimension mismatch: P {P.shape}, k {k.shape} for n={n}, m={m}")
        report = validate(ChainModel(P, k, doc.get("labels"),
                                     bool(doc.get("strictly_positive", False))))
    _emit(args, _json({"valid": not report, "violations": report}), outputs)
    for line in report:
        print(f"violation: {line}", file=sys.stderr)
    return EXIT_OK if not report else EXIT_INPUT


def cmd_solve(args, outputs) -> int:
    model = _load_chain(args.file)
    config = _solver_config(args)
    report = solve_vi(model, config) if args.lam is not None else solve_rvi(model, config)
    _emit(args, report.to_json(with_trace=False) + "\n", outputs)
    if args.trace:
        Path(args.trace).write_text(report.trace_csv())
        outputs.append(args.trace)
    if not report.converged:
        print(f"did not converge in {report.iterations} iterations", file=sys.stderr)
        return EXIT_NONCONV
    return EXIT_OK


def cmd_oracle(args, outputs) -> int:
    model = _load_chain(args.file)
    lam, pol = enumerate_min(model)
    _emit(args, _json({"lambda_star": lam, "best_policy": pol.tolist(),
                       "n_policies": n_policies(model)}), outputs)
    return EXIT_OK


def cmd_discretize(args, outputs) -> int:
    model, grid = _load_diffusion(args.file)
    problem = build_chain(model, grid)
    doc = model_to_dict(problem.chain)
    doc["labels"] = problem.coords.tolist()
    _emit(args, json.dumps(doc) + "\n", outputs)
    print(f"{problem.chain.n_states} states, dt={problem.dt!r}, x0={problem.x0}",
          file=sys.stderr)
    return EXIT_OK


def _ground_state_csv(problem, psi) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    dim = problem.coords.shape[1]
    w.writerow([f"x{i + 1}" for i in range(dim)] + ["psi"] if dim > 1 else ["x", "psi"])
    for x, p in zip(problem.coords, psi):
        w.writerow([repr(float(v)) for v in x] + [repr(float(p))])
    return buf.getvalue()


def cmd_pde(args, outputs) -> int:
    model, grid = _load_diffusion(args.file)
    problem = build_chain(model, grid)
    doc = {"mode": args.mode, "dt": problem.dt, "h": list(problem.h),
           "n_states": problem.chain.n_states, "x0": problem.x0}
    if args.mode == "normalized":
        report = solve_chain(problem, SolverConfig(tol=args.tol, max_iter=args.max_iter,
                                                   log_space=args.log_space,
                                                   record_trace=False))
        doc.update(converged=report.converged, steps=report.iterations,
                   Lambda_h=report.lambda_est,
                   lambda_est=float(np.log(report.lambda_est) / problem.dt))
        psi = report.value / report.value[problem.x0]
        status = EXIT_OK if report.converged else EXIT_NONCONV
    else:
        res = run_parabolic_rvi(problem, t_end=args.t_end, mode="euler-ode")
        doc.update(converged=not res.negative, steps=res.steps, lambda_est=res.lambda_est,
                   negative=res.negative)
        psi = res.ground_state
        status = EXIT_NONCONV if res.negative else EXIT_OK
    _emit(args, _json(doc), outputs)
    if args.csv:
        Path(args.csv).write_text(_ground_state_csv(problem, psi))
        outputs.append(args.csv)
    return status


def cmd_mc(args, outputs) -> int:
    doc = _read_doc(args.file)
    seed = 0 if args.seed is None else args.seed
    if doc.get("type") == "diffusion":
        model, grid = _load_diffusion(args.file)
        problem = build_chain(model, grid)
        horizon = 2.0 if args.horizon is None else args.horizon
        cfg = McConfig(seed, args.paths, horizon, args.dt_sim)
        report = solve_chain(problem, SolverConfig(tol=args.tol, max_iter=args.max_iter,
                                                   record_trace=False))
        lam = lambda_from_chain(problem, report)
        policy = report.policy if len(model.actions) > 1 else None
        if args.check == "growth":
            out = sde_growth_estimate(model, cfg, problem, policy).to_dict()
            out["lambda_chain"] = lam
        else:
            out = sde_martingale_check(model, problem, report.value, lam, cfg, policy).to_dict()
    else:
        if args.check not in (None, "chain"):
            raise InputError(f"check {args.check!r} needs a diffusion problem")
        model = _load_chain(args.file)
        report = solve_rvi(model, _solver_config(args))
        if not report.converged:
            raise NonConvergenceError("solver did not converge; no eigen-triple to check")
        horizon = 5 if args.horizon is None else args.horizon
        cfg = McConfig(seed, args.paths, horizon, args.dt_sim)
        out = chain_identity_check(model, report.policy, report.value, report.lambda_est,
                                   args.x0, cfg, tol=args.tol).to_dict()
    _emit(args, _json(out), outputs)
    return EXIT_OK


COMMANDS = {
    "validate": (cmd_validate, "check a problem file and list violations"),
    "solve": (cmd_solve, "relative value iteration (value iteration with --lambda)"),
    "oracle": (cmd_oracle, "exhaustive policy enumeration of the Perron root"),
    "discretize": (cmd_discretize, "write the grid chain of a diffusion problem"),
    "pde": (cmd_pde, "eigenvalue and ground state of a diffusion problem"),
    "mc": (cmd_mc, "Monte Carlo identity checks"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsrvi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rsrvi {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("file", help="problem JSON file")
        p.add_argument("--out", help="result file (default: stdout)")
        p.add_argument("--tol", type=float, default=1e-10)
        p.add_argument("--max-iter", type=int, default=10**7)
        p.add_argument("--x0", type=int, default=0, help="reference state index")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (computation is single-threaded)")
        p.add_argument("--log-space", action="store_true")
        if name == "solve":
            p.add_argument("--lambda", dest="lam", type=float, default=None,
                           help="known eigenvalue; runs value iteration")
            p.add_argument("--trace", help="write the iteration trace as CSV")
        else:
            p.set_defaults(lam=None, trace=None)
        if name == "pde":
            p.add_argument("--mode", choices=("normalized", "euler-ode"), default="normalized")
            p.add_argument("--t-end", type=float, default=40.0,
                           help="integration time for euler-ode mode")
            p.add_argument("--csv", help="write the ground state as CSV")
        if name == "mc":
            p.add_argument("--check", choices=("chain", "martingale", "growth"), default=None)
            p.add_argument("--paths", type=int, default=100_000)
            p.add_argument("--horizon", type=float, default=None,
                           help="steps (chains) or time (diffusions)")
            p.add_argument("--dt-sim", type=float, default=0.01)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    func = COMMANDS[args.command][0]
    outputs: list[str] = []
    start = time.time()
    try:
        code = func(args, outputs)
    except (InputError, ModelError, DiscretizationError, OracleError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_INPUT
    except NonConvergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_NONCONV
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        code = EXIT_INTERNAL
    manifest = {
        "command": args.command,
        "input": args.file,
        "config": {k: v for k, v in vars(args).items() if k not in ("command", "file")},
        "seed": args.seed,
        "outputs": outputs,
        "version": __version__,
        "wall_clock_s": round(time.time() - start, 6),
        "exit_code": code,
    }
    if args.out:
        Path(args.out + ".manifest.json").write_text(_json(manifest))
    else:
        print(json.dumps(manifest), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
