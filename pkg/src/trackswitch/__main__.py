import argparse
import logging
from pathlib import Path
import sys

from dotenv import load_dotenv
import numpy as np

from . import __version__
from .bellman import ValueSurface, resolve_settings, solve_finite, solve_infinite
from .checks import run_checks
from .errors import ArtifactError, ModelError, StrategyError, TrackSwitchError
from .models import RunManifest, SolverConfig
from .problem import Belief, SwitchingModel, load_model, model_hash
from .simkit import controlled_path, evaluate_strategy, replay_path
from .strategy import (
    Controller,
    GapStrategy,
    ScheduledStrategy,
    boundaries_frame,
    classify_regions,
    heuristic,
)
from .utils import (
    load_manifest,
    load_schedule,
    parse_arrivals,
    resolve_config,
    save_estimate,
    save_manifest,
    save_paths,
    validate_environment_variables,
    validate_output_directory,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_ARTIFACT = 4
EXIT_CHECK = 5

Parameter = float | int | str | bool | None


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"Error: {message}")
        sys.exit(EXIT_USAGE)


def _common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "config", help="JSON model config, or a bundled name: onoff, fed, callcenter"
    )
    sub.add_argument(
        "--out", type=Path, default=Path("results"), help="Output directory (default: results)"
    )
    sub.add_argument("--verbose", action="store_true", help="Log solver progress")


def _parallel(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--threads", type=int, default=None, help="Worker count (default: TRACKSWITCH_THREADS)"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="trackswitch", description="Optimal switching under a hidden Markov chain"
    )
    parser.add_argument("--version", action="version", version=f"trackswitch {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    solve = commands.add_parser("solve", help="Solve for the value surface and switching regions")
    _common(solve)
    horizon = solve.add_mutually_exclusive_group(required=True)
    horizon.add_argument("--horizon", type=float, help="Finite horizon T")
    horizon.add_argument("--infinite", action="store_true", help="Stationary discounted problem")
    solve.add_argument("--dt", type=float, default=None, help="Time step (default: T/steps)")
    solve.add_argument("--grid", type=int, default=None, help="Lattice resolution N")
    solve.add_argument("--steps", type=int, default=400, help="Layers when --dt is not given")
    solve.add_argument("--no-plots", action="store_true", help="Skip the SVG figures")

    simulate = commands.add_parser("simulate", help="Monte Carlo evaluation of a strategy")
    _common(simulate)
    _parallel(simulate)
    simulate.add_argument(
        "--strategy",
        choices=["optimal", "none", "threshold", "arrivals", "schedule"],
        default="optimal",
    )
    simulate.add_argument(
        "--schedule",
        type=Path,
        default=None,
        help="CSV of time,policy switches for --strategy schedule",
    )
    simulate.add_argument(
        "--solved", type=Path, default=None, help="Directory of a previous solve (default: --out)"
    )
    simulate.add_argument("--paths", type=int, default=1000)
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--horizon", type=float, default=None, help="Simulation horizon")
    simulate.add_argument(
        "--pi0", type=str, default=None, help="Initial belief, comma separated (default: uniform)"
    )
    simulate.add_argument(
        "--policy", type=str, default=None, help="Initial policy label (default: first)"
    )
    simulate.add_argument(
        "--theta", type=float, default=0.5, help="Threshold of the threshold strategy"
    )
    simulate.add_argument(
        "--sample-paths", type=int, default=1, help="Paths written to paths.txt"
    )
    simulate.add_argument(
        "--arrival",
        action="append",
        default=[],
        metavar="TIME:MARK",
        help="Replay a fixed arrival; MARK is 1-based (repeatable)",
    )

    check = commands.add_parser("check", help="Run the invariant suites at reduced scale")
    _common(check)
    _parallel(check)
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--horizon", type=float, default=1.0)
    return parser


def parse_arguments(args: list[str]) -> argparse.Namespace:
    """Parse and validate command-line arguments."""
    return build_parser().parse_args(args)


def _manifest(
    args: argparse.Namespace,
    config_path: Path,
    model: SwitchingModel,
    out_dir: Path,
    **parameters: Parameter,
) -> RunManifest:
    return RunManifest(
        command=args.command,
        config_path=str(config_path),
        model_hash=model_hash(model),
        tool_version=__version__,
        output_dir=str(out_dir),
        seed=getattr(args, "seed", None),
        threads=getattr(args, "threads", None) or 1,
        parameters=parameters,
    )


def cmd_solve(
    args: argparse.Namespace,
    model: SwitchingModel,
    config_path: Path,
    out_dir: Path,
    node_cap: int,
) -> int:
    config = SolverConfig(dt=args.dt, grid=args.grid, steps=args.steps, node_cap=node_cap)
    horizon = None if args.infinite else args.horizon
    settings = resolve_settings(model, config, horizon)
    label = "infinite horizon" if horizon is None else f"T={horizon:g}"
    print(f"Solving {model.name} ({label}, N={settings.grid}, dt={settings.dt:.4g})...")
    if horizon is None:
        surface, table = solve_infinite(model, config)
    else:
        surface, table = solve_finite(horizon, model, config)

    surface.to_csv(out_dir / "values.csv")
    table.to_csv(out_dir / "strategy.csv")
    surface.to_npz(out_dir / "surface.npz")
    if model.m == 2:
        boundaries_frame(table).to_csv(
            out_dir / "boundaries.csv", index=False, float_format="%.17g"
        )
    if not args.no_plots and model.m > 1:
        from .plotting import plot_regions, plot_values

        plot_regions(table, out_dir / "regions.svg")
        plot_values(surface, out_dir / "value.svg")
    save_manifest(
        _manifest(
            args,
            config_path,
            model,
            out_dir,
            horizon=horizon,
            dt=settings.dt,
            grid=settings.grid,
            steps=settings.steps,
            eps_switch=settings.eps_switch,
            eps_fix=settings.eps_fix,
            plots=not args.no_plots,
        ),
        out_dir,
    )
    print(f"Solve complete → {out_dir}")
    return EXIT_OK


def _load_controller(
    args: argparse.Namespace, model: SwitchingModel, out_dir: Path
) -> Controller:
    solved_dir = (args.solved or out_dir).resolve()
    manifest = load_manifest(solved_dir)
    if manifest.command != "solve":
        raise ArtifactError(f"{solved_dir} holds a {manifest.command} run, not a solve")
    if manifest.model_hash != model_hash(model):
        raise ArtifactError(
            f"{solved_dir} was solved for a different model ({manifest.model_hash})"
        )
    surface = ValueSurface.from_npz(solved_dir / "surface.npz", model)
    eps_switch = manifest.parameters.get("eps_switch")
    if not isinstance(eps_switch, float):
        raise ArtifactError(f"Manifest in {solved_dir} has no eps_switch")
    return Controller(classify_regions(surface, eps_switch), horizon=args.horizon)


def _initial_belief(text: str | None, model: SwitchingModel) -> Belief:
    if text is None:
        return Belief.uniform(model.m)
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise ValueError(
            f"Invalid belief {text!r}. Expected comma separated probabilities"
        ) from None
    if len(values) != model.m:
        raise ValueError(f"Belief needs {model.m} entries, got {len(values)}")
    return Belief(np.asarray(values))


def _default_horizon(model: SwitchingModel, controller: Controller | None) -> float:
    solved = controller.surface.horizon if controller is not None else None
    if solved is not None:
        return solved
    return 5.0 / model.rho if model.rho > 0.0 else 1.0


def _replay(
    args: argparse.Namespace,
    model: SwitchingModel,
    strategy: GapStrategy,
    pi0: Belief,
    a0: int,
    horizon: float,
    out_dir: Path,
) -> None:
    arrivals = parse_arrivals(args.arrival, model)
    run, _ = replay_path(model, strategy, pi0, a0, arrivals, horizon)
    policies = model.policies
    lines = [f"# replay of {len(arrivals)} arrivals, policy {policies[a0]}"]
    lines += [f"ARRIVAL {t!r} {float(model.marks[j])!r}" for t, j in arrivals]
    lines += [f"SWITCH {t!r} {policies[a]} {policies[b]}" for t, a, b, _ in run.switches]
    (out_dir / "replay.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"Replayed {len(arrivals)} arrivals: {len(run.switches)} switches")
    arrival_times = {t for t, _ in arrivals}
    for t, a, b, _ in run.switches:
        where = "at an arrival" if t in arrival_times else "between arrivals"
        print(f"  t={t:.4f}: {policies[a]} → {policies[b]} ({where})")


def cmd_simulate(
    args: argparse.Namespace, model: SwitchingModel, config_path: Path, out_dir: Path
) -> int:
    pi0 = _initial_belief(args.pi0, model)
    a0 = model.policy_index(args.policy) if args.policy is not None else 0
    controller: Controller | None = None
    strategy: GapStrategy
    if args.strategy == "optimal":
        controller = _load_controller(args, model, out_dir)
        strategy = controller
    elif args.strategy == "schedule":
        if args.schedule is None:
            raise ValueError("--strategy schedule needs --schedule FILE")
        strategy = ScheduledStrategy(schedule=load_schedule(args.schedule, model))
    else:
        strategy = heuristic(args.strategy, model.n_policies, args.theta)
    horizon = args.horizon if args.horizon is not None else _default_horizon(model, controller)

    if args.arrival:
        _replay(args, model, strategy, pi0, a0, horizon, out_dir)
        manifest = _manifest(
            args, config_path, model, out_dir, strategy=args.strategy, horizon=horizon, replay=True
        )
        save_manifest(manifest, out_dir)
        return EXIT_OK

    print(
        f"Simulating {args.paths} paths of {model.name} "
        f"with strategy {args.strategy} (T={horizon:g})..."
    )
    estimate = evaluate_strategy(
        model, strategy, pi0, a0, horizon, args.paths, args.seed, threads=args.threads
    )
    solved_value = None
    if controller is not None:
        tau = horizon if controller.surface.horizon is not None else None
        solved_value = controller.surface.value(tau, pi0, a0)
    save_estimate(estimate, out_dir / "mc_estimate.csv", solved_value)
    samples = [
        controlled_path(model, strategy, pi0, a0, horizon, args.seed, i)
        for i in range(min(args.sample_paths, args.paths))
    ]
    save_paths(samples, model, out_dir / "paths.txt")
    save_manifest(
        _manifest(
            args,
            config_path,
            model,
            out_dir,
            strategy=args.strategy,
            horizon=horizon,
            paths=args.paths,
            pi0=args.pi0,
            policy=model.policies[a0],
            theta=args.theta,
            schedule=str(args.schedule) if args.schedule is not None else None,
        ),
        out_dir,
    )
    print(f"Estimate: {estimate.mean:.6g} ± {estimate.stderr:.3g} (s.e., {estimate.count} paths)")
    if solved_value is not None:
        gap = estimate.mean - solved_value
        zscore = abs(gap) / max(estimate.stderr, 1e-300)
        print(f"Solved value at pi0: {solved_value:.6g} (difference {gap:+.3g}, {zscore:.2f} s.e.)")
    return EXIT_OK


def cmd_check(
    args: argparse.Namespace, model: SwitchingModel, config_path: Path, out_dir: Path
) -> int:
    print(f"Checking {model.name}...")
    results = run_checks(model, seed=args.seed, threads=args.threads, horizon=args.horizon)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"  [{status}] {result.name}: {result.detail}")
    (out_dir / "checks.json").write_text(
        "[\n" + ",\n".join(r.model_dump_json() for r in results) + "\n]\n", encoding="utf-8"
    )
    save_manifest(_manifest(args, config_path, model, out_dir, horizon=args.horizon), out_dir)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"Failed checks: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"All {len(results)} checks passed")
    return EXIT_OK


def run(argv: list[str]) -> int:
    """Execute one command and return its exit code."""
    args = parse_arguments(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    # Load environment variables
    load_dotenv()

    try:
        env_vars = validate_environment_variables()
        config_path = resolve_config(args.config)
        out_dir = validate_output_directory(args.out)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"Configuration error: {e}")
        return EXIT_CONFIG
    # solve runs in one process; only simulate and check fan out
    if "threads" in args:
        if args.threads is None:
            args.threads = env_vars["TRACKSWITCH_THREADS"]
        elif args.threads < 1:
            print(f"Configuration error: --threads must be at least 1, got {args.threads}")
            return EXIT_CONFIG

    try:
        model = load_model(config_path)
    except ModelError as e:
        print(f"Configuration error in {config_path}:\n{e}")
        return EXIT_CONFIG

    try:
        if args.command == "solve":
            return cmd_solve(args, model, config_path, out_dir, env_vars["TRACKSWITCH_NODE_CAP"])
        if args.command == "simulate":
            return cmd_simulate(args, model, config_path, out_dir)
        return cmd_check(args, model, config_path, out_dir)
    except ArtifactError as e:
        print(f"Artifact error: {e}")
        return EXIT_ARTIFACT
    except (ValueError, KeyError, IndexError, StrategyError) as e:
        print(f"Configuration error: {e}")
        return EXIT_CONFIG
    except TrackSwitchError as e:
        print(f"Solver error: {e}")
        return EXIT_SOLVER


def main() -> None:
    """Main entry point for the CLI."""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
