"""Experiment subcommands: run (CSV trace), oracle (tree optimum), rate (m*gap).

Flags may be seeded from a KEY=VALUE config file (--config); explicit flags
win. All floating output is printed with 17 significant digits so emitted
files round-trip the in-memory values exactly. Exit codes: 0 success,
2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import importlib.util
import sys
from typing import Optional

from .benchmarks import Benchmark, example41, linrec_desk, lq_desk, tree_bruteforce
from .bsde import RegressionBackend
from .errors import ConfigurationError, EvaluationError, NumericalError, SimulationError
from .msa import MsaConfig, run_msa

_RUN_HEADER = "iter,J,J_stderr,mu,mu_stderr,descent,wall_ms"
_RATE_HEADER = "iter,gap,iter_times_gap"

_DEFAULTS = {
    "problem": "example41",
    "L": 0.1,
    "rho": None,
    "paths": 10000,
    "steps": 20,
    "iters": 10,
    "epsilon": None,
    "seed": 0,
    "degree": 2,
    "out": "-",
    "mode": "nonrecombining",
}


def _g17(x: float) -> str:
    return format(float(x), ".17g")


def _load_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigurationError(
                        f"{path}:{lineno}: expected KEY=VALUE, got '{line}'")
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    return values


def _resolve(args: argparse.Namespace, file_values: dict):
    """Flags win over the config file, the file wins over defaults."""
    merged = {}
    casts = {"L": float, "rho": float, "paths": int, "steps": int, "iters": int,
             "epsilon": float, "seed": int, "degree": int}
    for key, default in _DEFAULTS.items():
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            merged[key] = cli_val
        elif key in file_values:
            try:
                merged[key] = casts.get(key, str)(file_values[key])
            except ValueError as exc:
                raise ConfigurationError(
                    f"config file value for {key} is not valid: {exc}") from exc
        else:
            merged[key] = default
    return merged


def _load_problem(selector: str, L: float) -> Benchmark:
    if selector == "example41":
        return example41(L)
    if selector == "lq":
        return lq_desk()
    if selector == "linear-recursive":
        return linrec_desk()
    if selector.endswith(".py"):
        spec_loader = importlib.util.spec_from_file_location("msacontrol_custom", selector)
        if spec_loader is None:
            raise ConfigurationError(f"cannot load problem file {selector}")
        module = importlib.util.module_from_spec(spec_loader)
        try:
            spec_loader.loader.exec_module(module)
        except FileNotFoundError as exc:
            raise ConfigurationError(f"problem file not found: {selector}") from exc
        if not hasattr(module, "make_problem"):
            raise ConfigurationError(
                f"problem file {selector} must define make_problem() -> Benchmark")
        bench = module.make_problem()
        if not isinstance(bench, Benchmark):
            raise ConfigurationError("make_problem() must return a Benchmark")
        return bench
    raise ConfigurationError(
        f"unknown problem '{selector}' (expected example41, lq, linear-recursive, "
        "or a .py file)")


def _open_out(path: str):
    if path == "-":
        return sys.stdout, False
    try:
        return open(path, "w", encoding="utf-8", newline="\n"), True
    except OSError as exc:
        raise ConfigurationError(f"cannot write output file {path}: {exc}") from exc


def _run_solver(cfg: dict):
    bench = _load_problem(cfg["problem"], cfg["L"])
    rho = cfg["rho"] if cfg["rho"] is not None else bench.rho
    config = MsaConfig(rho=rho, n_paths=cfg["paths"], steps=cfg["steps"],
                       seed=cfg["seed"], max_iters=cfg["iters"],
                       epsilon=cfg["epsilon"],
                       backend=RegressionBackend(degree=cfg["degree"]))
    result = run_msa(bench.spec, bench.domain, config, "random", hints=bench.hints)
    return bench, result


def cmd_run(cfg: dict) -> int:
    bench, result = _run_solver(cfg)
    if bench.spec.bounds.df is not None:
        print(f"# declared bounds: dF<= {bench.spec.bounds.df}, "
              f"rho= {_g17(cfg['rho'] if cfg['rho'] is not None else bench.rho)}",
              file=sys.stderr)
    fh, close = _open_out(cfg["out"])
    try:
        fh.write(_RUN_HEADER + "\n")
        for rec in result.records:
            fh.write(",".join([str(rec.m), _g17(rec.j), _g17(rec.j_stderr),
                               _g17(rec.mu), _g17(rec.mu_stderr),
                               _g17(rec.descent), _g17(rec.wall_ms)]) + "\n")
    finally:
        if close:
            fh.close()
    return 0


def cmd_oracle(cfg: dict) -> int:
    bench = _load_problem(cfg["problem"], cfg["L"])
    tree = tree_bruteforce(bench.spec, bench.domain, cfg["steps"], mode=cfg["mode"])
    print(f"Jstar={_g17(tree.jstar)}")
    print(f"mode={tree.mode} decision_nodes={tree.decision_nodes} "
          f"policies={tree.policy_count}")
    labels = _node_labels(cfg["steps"], tree.mode)
    for i, (j, h) in enumerate(labels):
        u = " ".join(_g17(v) for v in tree.policy[i])
        print(f"node={i} step={j} branch={h} u={u}")
    return 0


def _node_labels(steps: int, mode: str):
    labels = []
    for j in range(steps):
        width = (2 ** j) if mode == "nonrecombining" else (j + 1)
        labels.extend((j, h) for h in range(width))
    return labels


def cmd_rate(cfg: dict) -> int:
    if cfg["problem"] != "lq":
        raise ConfigurationError("rate requires --problem lq (known optimum)")
    bench, result = _run_solver(cfg)
    jstar = bench.jstar if bench.jstar is not None else 0.0
    m0 = next((rec.m for rec in result.records if -rec.mu < 0.5),
              result.records[-1].m if result.records else 1)
    gaps = [(rec.m, rec.j - jstar) for rec in result.records]
    c1 = max((g for m, g in gaps if m == m0), default=1.0)
    c1 = max(c1, 1.0)
    worst = max((m * g for m, g in gaps if m >= m0), default=0.0)
    fh, close = _open_out(cfg["out"])
    try:
        fh.write(_RATE_HEADER + "\n")
        for m, g in gaps:
            fh.write(f"{m},{_g17(g)},{_g17(m * g)}\n")
    finally:
        if close:
            fh.close()
    print(f"m0={m0} C1={_g17(c1)} max_iter_times_gap={_g17(worst)}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msacontrol",
        description="Successive-approximation solver for stochastic recursive control")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "run the solver and write a convergence CSV"),
                           ("oracle", "brute-force tree optimum"),
                           ("rate", "gap decay table for the quadratic-cost problem")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--problem", type=str, default=None,
                       help="example41 | lq | linear-recursive | path/to/problem.py")
        p.add_argument("--L", type=float, default=None, help="sine-driver scale")
        p.add_argument("--rho", type=float, default=None,
                       help="penalty weight override (default: problem's)")
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--steps", type=int, default=None,
                       help="time steps (tree depth for oracle)")
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--epsilon", type=float, default=None,
                       help="stopping tolerance on the J descent (default: none)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--degree", type=int, default=None, help="regression basis degree")
        p.add_argument("--out", type=str, default=None, help="CSV path, '-' for stdout")
        p.add_argument("--mode", type=str, default=None,
                       choices=["nonrecombining", "recombining"],
                       help="tree policy class (oracle only)")
        p.add_argument("--config", type=str, default=None, help="KEY=VALUE config file")
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        file_values = _load_config_file(args.config) if args.config else {}
        cfg = _resolve(args, file_values)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "oracle":
            return cmd_oracle(cfg)
        return cmd_rate(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, SimulationError, EvaluationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
