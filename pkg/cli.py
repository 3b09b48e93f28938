import argparse
import logging
import sys

import numpy as np

from aeg import figure_dataset, run_experiment, write_result
from conditions import full_report
from config import FIGURE_IDS, VERSION, ExperimentConfig, log_level, output_directory
from dynamics import integrate
from errors import ConfigError, GdfError, NumericalError, PreconditionError, ValidationError
from export import build_filename, run_metadata, trace_frame, write_json, write_table
from operators import resolvent_bound_probe
from spectral import DENSE_EIG_LIMIT, perron_eigenpair, spectral_gap, truncation_convergence

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_PRECONDITION = 3


# argparse exits with 2 on bad usage; route it to the config exit code instead
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gdf", description="Growth-decay-fragmentation simulations and spectral analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", required=True, help="ExperimentConfig JSON file")
        p.add_argument("--output-dir", default=None, help="Output directory (GDF_OUTPUT_DIR wins)")
        return p

    with_config(sub.add_parser("check", help="Evaluate every hypothesis on the configured model"))

    spectrum = with_config(sub.add_parser("spectrum", help="Perron eigenpair, spectral gap and N-convergence"))
    spectrum.add_argument("--sizes", type=int, nargs="+", default=None, help="Truncation sizes for the convergence study")

    with_config(sub.add_parser("simulate", help="Integrate the truncated system and write the trace"))

    aeg = with_config(sub.add_parser("aeg", help="Asynchronous exponential growth experiment"))
    aeg.add_argument("--force", action="store_true", help="Run even when a required condition fails")

    figure = sub.add_parser("figure", help="Emit one of the figure datasets")
    figure.add_argument("figure_id", choices=list(FIGURE_IDS))
    figure.add_argument("--output-dir", default=None)
    figure.add_argument("--N", type=int, default=None, help="Override the truncation size")
    figure.add_argument("--t-end", type=float, default=None, help="Override the final time")
    figure.add_argument("--force", action="store_true")

    resolvent = with_config(sub.add_parser("resolvent", help="Probe the resolvent-norm bound"))
    resolvent.add_argument("--lam", type=float, nargs="+", default=[1.0, 10.0])
    resolvent.add_argument("--samples", type=int, default=100)
    resolvent.add_argument("--probe-size", type=int, default=500)
    return parser


def _output_dir(args, config=None):
    return output_directory(args.output_dir or (config.output_dir if config else None))


def _payload(config, **body):
    body["config"] = config.to_dict()
    body["version"] = VERSION
    body["metadata"] = run_metadata(config)
    return body


# =============================================================================
# Subcommands
# =============================================================================


def cmd_check(args):
    config = ExperimentConfig.load(args.config)
    report = full_report(config.build_model(), config.m, config.m_prime)
    path = write_json(_payload(config, report=report.to_dict()), _output_dir(args, config) / build_filename(config.label, "check", "json"))
    print(f"Saved condition report: {path}")
    for cid, verdict in report.verdicts.items():
        print(f"  {cid:20s} {verdict.verdict}")
    return [path]


def cmd_spectrum(args):
    config = ExperimentConfig.load(args.config)
    model = config.build_model()
    triple = perron_eigenpair(model, config.N, config.eig_tol, config.m, config.policy)
    body = {"perron": triple.to_dict()}

    if config.N <= DENSE_EIG_LIMIT:
        body["gap"] = spectral_gap(model, config.N, config.policy).to_dict()
    sizes = args.sizes or [max(16, config.N // 4), max(17, config.N // 2), config.N]
    body["convergence"] = truncation_convergence(model, sorted(set(sizes)), config.eig_tol, config.m, config.policy).to_dict()

    path = write_json(_payload(config, **body), _output_dir(args, config) / build_filename(config.label, "spectrum", "json"))
    print(f"Saved spectrum: {path} (lambda0 = {triple.lambda0:.12g})")
    return [path]


def cmd_simulate(args):
    config = ExperimentConfig.load(args.config)
    trace = integrate(
        config.build_model(),
        config.initial_state(),
        (0.0, config.t_end),
        config.solver_options(),
        config.policy,
        m=config.m,
        sample_dt=config.sample_dt,
    )
    out = _output_dir(args, config)
    csv_path = write_table(trace_frame(trace, config.snapshot_indices), out / build_filename(config.label, "trace"), run_metadata(config))
    summary = _payload(
        config,
        steps=trace.steps,
        rejected=trace.rejected,
        final_mass=float(trace.mass[-1]),
        leaked_mass=float(trace.leaked_mass[-1]),
    )
    json_path = write_json(summary, out / build_filename(config.label, "trace_summary", "json"))
    print(f"Saved trace: {csv_path} ({len(trace.times)} rows)")
    return [csv_path, json_path]


def cmd_aeg(args):
    config = ExperimentConfig.load(args.config)
    if args.force and not config.force:
        config = ExperimentConfig.from_dict({**config.to_dict(), "force": True})
    result = run_experiment(config)
    paths = write_result(result, _output_dir(args, config))
    print(f"Saved AEG run {config.label}: lambda0 = {result.spectral.lambda0:.12g}, rate = {result.fit.rate:.6g}")
    return list(paths.values())


def cmd_figure(args):
    paths = figure_dataset(args.figure_id, args.output_dir, N=args.N, t_end=args.t_end, force=args.force)
    for kind, path in paths.items():
        print(f"Saved {kind}: {path}")
    return list(paths.values())


def cmd_resolvent(args):
    config = ExperimentConfig.load(args.config)
    model = config.build_model()
    probes = []
    for lam in args.lam:
        probe = resolvent_bound_probe(model, config.m, config.m_prime, lam, args.samples, args.probe_size, policy=config.policy)
        probes.append({
            "lambda": lam,
            "max_ratio": probe.max_ratio,
            "bound": probe.bound,
            "within_bound": probe.within_bound,
            "mean_ratio": float(np.mean(probe.ratios)),
            "condi2": probe.precondition,
        })
    path = write_json(_payload(config, probes=probes, samples=args.samples, probe_size=args.probe_size), _output_dir(args, config) / build_filename(config.label, "resolvent", "json"))
    print(f"Saved resolvent probe: {path}")
    return [path]


COMMANDS = {
    "check": cmd_check,
    "spectrum": cmd_spectrum,
    "simulate": cmd_simulate,
    "aeg": cmd_aeg,
    "figure": cmd_figure,
    "resolvent": cmd_resolvent,
}


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except PreconditionError as ex:
        print(f"Error: precondition failed: {ex}", file=sys.stderr)
        return EXIT_PRECONDITION
    except NumericalError as ex:
        print(f"Error: numerical failure: {ex}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValidationError) as ex:
        print(f"Error: {ex}", file=sys.stderr)
        return EXIT_CONFIG
    except GdfError as ex:
        print(f"Error: {ex}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main():
    logging.basicConfig(level=log_level(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return run_command(sys.argv[1:])


if __name__ == "__main__":
    try:
        raise SystemExit(main())
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.")
        raise SystemExit(1)
