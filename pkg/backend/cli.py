import argparse
import logging
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Iterator, List, Optional, Sequence

import numpy as np

from config import config
from core import Trajectory
from dde import integrate_forward
from essa import Solution, eval_cost, solve
from exceptions import ConfigError, EssaError
from iteration_log import IterationRecord, IterationSink
from models import LqParams, negative_compartments
from oracle import fd_check, lq_cross_check
from output_writer import OutputWriter, read_control_csv
from registry import ModelRegistry
from run_config import ResolvedRun, load_run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1          # Invalid configuration or failed check
EXIT_NOT_CONVERGED = 2  # MaxIters or CIncreaseCap

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level_name: Optional[str] = None):
    """Root logger on stderr at the ESSA_LOG level"""
    level = LOG_LEVELS.get((level_name or config.LOG_LEVEL).lower(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT,
                        handlers=[logging.StreamHandler(sys.stderr)], force=True)


class ThreadFilter(logging.Filter):
    """Pass only records emitted by one thread"""

    def __init__(self, thread_id: Optional[int] = None):
        super().__init__()
        self.thread_id = threading.get_ident() if thread_id is None else thread_id

    def filter(self, record: logging.LogRecord) -> bool:
        return record.thread == self.thread_id


@contextmanager
def file_log(directory: str) -> Iterator[None]:
    """Mirror the calling thread's log records into the run's essa.log"""
    os.makedirs(directory, exist_ok=True)
    handler = logging.FileHandler(os.path.join(directory, config.LOG_FILE), encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler.addFilter(ThreadFilter())
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield
    finally:
        root.removeHandler(handler)
        handler.close()


def progress_line(record: IterationRecord, label: str = "") -> str:
    status = "accepted" if record.accepted else "rejected"
    prefix = f"{label} " if label else ""
    return (f"{prefix}[{record.index:4d}] J={record.J:.12g} du2={record.delta_u_sq:.3e} "
            f"eps_min={record.eps_min:.3g} {status}")


def console_sink(label: str = "") -> IterationSink:
    def sink(record: IterationRecord):
        print(progress_line(record, label), flush=True)
    return sink


def report_config_error(error: Exception, path: str):
    messages = error.messages if isinstance(error, ConfigError) else [str(error)]
    for message in messages:
        print(f"{path}: {message}", file=sys.stderr)


def summary_lines(run: ResolvedRun, solution: Solution) -> List[str]:
    lines = [
        f"model: {run.problem.name}",
        f"termination: {solution.termination.value}",
        f"iterations: {solution.iterations}",
        f"J: {solution.J:.17g}",
        f"objective: {solution.objective:.17g}",
        f"residual: {solution.residual:.17g}",
        f"eps_min: {solution.regularization.eps_min:.17g}",
        f"wall_time_s: {solution.wall_time:.3f}",
    ]
    if solution.iteration_bound is not None:
        lines.append(f"iteration_bound: {solution.iteration_bound}")
    return lines


def cmd_solve(config_path: str, out: Optional[str] = None, dry_run: bool = False,
              registry: Optional[ModelRegistry] = None, progress: bool = True,
              label: str = "") -> int:
    """Solve one configured problem and write its result files"""
    try:
        run = load_run(config_path, registry)
        u0 = run.initial_control()
    except (ConfigError, ValueError) as e:
        report_config_error(e, config_path)
        return EXIT_ERROR

    if dry_run:
        eta_tol = run.config.solver.resolved_eta_tol(run.grid, run.problem.m)
        print(run.describe_grid())
        print(f"Model: {run.problem.name} (n={run.problem.n}, m={run.problem.m}), "
              f"eta_tol={eta_tol:.6g}")
        return EXIT_OK

    directory = out or run.config.output.directory
    writer = OutputWriter(directory, run.config.output.precision)
    with file_log(directory):
        try:
            solution = solve(run.problem, run.grid, run.history, run.config.solver, u0,
                             run.config.integrator, console_sink(label) if progress else None)
        except EssaError as e:
            logger.error(f"Solve of {config_path} failed: {e}")
            print(f"{config_path}: {e}", file=sys.stderr)
            return EXIT_ERROR

        if run.builder.compartmental:
            negative_compartments(solution.state, run.problem.state_names)
        writer.write_states(solution.state, run.problem.state_names)
        writer.write_controls(solution.control, run.problem.control_names)
        writer.write_iterations(solution.log)
        writer.write_summary(summary_lines(run, solution))

    print(f"{label + ' ' if label else ''}{solution.termination.value}: J={solution.J:.12g}, "
          f"residual={solution.residual:.3e}, results in {directory}")
    return EXIT_OK if solution.converged else EXIT_NOT_CONVERGED


def cmd_solve_many(config_paths: Sequence[str], out: Optional[str] = None,
                   dry_run: bool = False, workers: int = 1,
                   registry: Optional[ModelRegistry] = None) -> int:
    """Fan several configs out over a thread pool, one output subdirectory each"""
    if len(config_paths) == 1:
        return cmd_solve(config_paths[0], out, dry_run, registry)

    def run_one(path: str) -> int:
        name = os.path.splitext(os.path.basename(path))[0]
        target = os.path.join(out, name) if out else None
        if target is None:
            try:
                target = os.path.join(load_run(path, registry).config.output.directory, name)
            except (ConfigError, ValueError) as e:
                report_config_error(e, path)
                return EXIT_ERROR
        return cmd_solve(path, target, dry_run, registry, label=name)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        codes = list(pool.map(run_one, config_paths))
    return max(codes)


def cmd_check(config_path: str, registry: Optional[ModelRegistry] = None) -> int:
    """Finite-difference check of the model derivatives, plus the LQ cross check"""
    try:
        run = load_run(config_path, registry)
    except (ConfigError, ValueError) as e:
        report_config_error(e, config_path)
        return EXIT_ERROR

    report = fd_check(run.problem, config.FD_SAMPLES, config.FD_EPS)
    failures = report.failing(config.FD_TOLERANCE)
    for block, error in report.errors.items():
        status = "FAIL" if block in failures else "ok"
        print(f"{block:>6}: {error:.3e} {status}")
    ok = not failures

    if isinstance(run.params, LqParams):
        cross = lq_cross_check(run.params, run.grid.N, run.config.solver)
        print(cross.describe())
        if not cross.passed(config.CROSS_CHECK_TOLERANCE):
            print(f"Cross check exceeds {config.CROSS_CHECK_TOLERANCE:g}")
            ok = False

    print("All checks passed" if ok else "Checks failed")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_simulate(config_path: str, control_path: str, out: Optional[str] = None,
                 registry: Optional[ModelRegistry] = None) -> int:
    """Forward-only run under a user-supplied control file"""
    try:
        run = load_run(config_path, registry)
        control = read_control_csv(control_path, run.grid)
    except (ConfigError, ValueError, OSError) as e:
        report_config_error(e, control_path if isinstance(e, OSError) else config_path)
        return EXIT_ERROR
    if control.dim != run.problem.m:
        print(f"{control_path}: expected {run.problem.m} control columns, got {control.dim}",
              file=sys.stderr)
        return EXIT_ERROR

    control_set = run.problem.control_set
    projected = np.array([control_set.project(u) for u in control.values])
    moved = int(np.count_nonzero(np.any(projected != control.values, axis=1)))
    if moved:
        logger.warning(f"Projected {moved} of {run.grid.N + 1} control nodes onto U")
    control = Trajectory(run.grid, projected)

    directory = out or run.config.output.directory
    writer = OutputWriter(directory, run.config.output.precision)
    with file_log(directory):
        try:
            state = integrate_forward(run.problem, run.grid, control, run.history,
                                      run.config.integrator)
        except EssaError as e:
            logger.error(f"Simulation of {config_path} failed: {e}")
            print(f"{config_path}: {e}", file=sys.stderr)
            return EXIT_ERROR
        if run.builder.compartmental:
            negative_compartments(state, run.problem.state_names)
        cost = eval_cost(run.problem, run.grid, state, control, run.history)
        if run.problem.has_terminal_cost:
            cost += float(run.problem.terminal_cost(state.values[-1]))
        writer.write_states(state, run.problem.state_names)
        writer.write_controls(control, run.problem.control_names)
        writer.write_summary([f"model: {run.problem.name}", f"projected_nodes: {moved}",
                              f"objective: {cost:.17g}"])

    print(f"Simulated {run.problem.name}: objective={cost:.12g}, results in {directory}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="essa",
        description="Optimal control with multiple state delays (extended Sakawa-Shindo)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    solve_cmd = commands.add_parser("solve", help="solve one or more configured problems")
    solve_cmd.add_argument("configs", nargs="+", metavar="CONFIG")
    solve_cmd.add_argument("--out", help="output directory (overrides output.directory)")
    solve_cmd.add_argument("--dry-run", action="store_true",
                           help="validate and print the resolved grid without solving")
    solve_cmd.add_argument("--sweep", type=int, default=1, metavar="WORKERS",
                           help="worker threads when several configs are given")

    check_cmd = commands.add_parser("check", help="verify model derivatives and oracles")
    check_cmd.add_argument("config", metavar="CONFIG")

    simulate_cmd = commands.add_parser("simulate", help="integrate under a given control file")
    simulate_cmd.add_argument("config", metavar="CONFIG")
    simulate_cmd.add_argument("--control", required=True, metavar="FILE")
    simulate_cmd.add_argument("--out", help="output directory (overrides output.directory)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    if args.command == "solve":
        return cmd_solve_many(args.configs, args.out, args.dry_run, args.sweep)
    if args.command == "check":
        return cmd_check(args.config)
    return cmd_simulate(args.config, args.control, args.out)


if __name__ == "__main__":
    sys.exit(main())
