#!/usr/bin/env python3
"""
Jump Linear System Toolkit

Certifies, simulates and sizes finite data-rate quantized feedback for
Markov and semi-Markov jump linear systems described by a YAML scenario.

Exit codes: 0 success/pass, 1 certificate or stability fail,
2 configuration error, 3 I/O error.
"""

import argparse
import dataclasses
import logging
import os
import sys
from typing import Optional

import certificate
import config_utils
import export_utils
import mathkit
import protocol
import simulator
import switching

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_IO = 3

DEFAULT_OUT = "output"

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(levelname)s - %(message)s",
    datefmt="%H:%M:%S"
)
logger = logging.getLogger(__name__)

# --- Shared Utils ---

def load_scenario(args) -> config_utils.LoadedConfig:
    """Loads the config and applies command-line overrides."""
    loaded = config_utils.load_config(args.config)
    sc = loaded.scenario
    changes = {}
    if getattr(args, 'horizon', None) is not None:
        changes['horizon'] = args.horizon
    if getattr(args, 'seed', None) is not None:
        changes['seed'] = args.seed
    if getattr(args, 'strategy', None):
        changes['protocol'] = dataclasses.replace(sc.protocol, worst_strategy=args.strategy)
    if changes:
        try:
            sc = dataclasses.replace(sc, **changes)
        except ValueError as e:
            raise config_utils.ConfigError("command line", str(e))
    runs = args.runs if getattr(args, 'runs', None) is not None else loaded.runs
    threshold = args.threshold if getattr(args, 'threshold', None) is not None else loaded.threshold
    cert = loaded.certificate
    if getattr(args, 'budget', None) is not None:
        cert = dataclasses.replace(cert, budget=args.budget)
    return config_utils.LoadedConfig(sc, cert, runs, threshold, loaded.source)


def certificate_config(loaded: config_utils.LoadedConfig, override: Optional[str]) -> protocol.ProtocolConfig:
    cfg = loaded.scenario.protocol
    strategy = override or loaded.certificate.strategy
    if strategy and strategy != cfg.worst_strategy:
        cfg = dataclasses.replace(cfg, worst_strategy=strategy)
    return cfg


def out_path(args, name: str) -> str:
    return os.path.join(args.out, name)

# --- CLI Handlers ---

def handle_certificate(args) -> int:
    loaded = load_scenario(args)
    sc = loaded.scenario
    cfg = certificate_config(loaded, args.strategy)
    settings = loaded.certificate
    config_utils.dump_config(loaded, out_path(args, "config.yaml"))

    if args.tau_sweep:
        taus = certificate.parse_sweep(args.tau_sweep)
        points = certificate.tau_sweep(sc.systems, sc.law, cfg, taus, settings.budget, settings.upsilon_threshold)
        export_utils.write_sweep_csv(points, out_path(args, "tau_sweep.csv"))
        if args.svg:
            export_utils.plot_sweep(points, out_path(args, "tau_sweep.svg"))
        span = certificate.passing_range(points)
        if span is None:
            logger.info("No tau in the sweep satisfies the condition")
            return EXIT_FAIL
        logger.info(f"Condition satisfied for tau in [{span[0]:.6g}, {span[1]:.6g}] (grid points only)")
        return EXIT_OK

    report = certificate.certify(sc.systems, sc.law, cfg, settings.budget, settings.upsilon_threshold)
    print(export_utils.render_report(report), end="")
    export_utils.save_report(report, out_path(args, "certificate.yaml"))
    export_utils.write_report_table(report, out_path(args, "certificate.csv"))
    verdict = "passes" if report.passes else "fails"
    logger.info(f"Certificate {verdict}: condition value {report.condition_value:.6g}")
    return EXIT_OK if report.passes else EXIT_FAIL


def handle_simulate(args) -> int:
    loaded = load_scenario(args)
    sc = loaded.scenario
    config_utils.dump_config(loaded, out_path(args, "config.yaml"))
    try:
        traj = simulator.simulate(sc)
    except simulator.SoundnessError as e:
        logger.error(f"Containment broken: {e}")
        return EXIT_FAIL

    export_utils.write_trajectory_csv(traj, out_path(args, "trajectory.csv"))
    export_utils.write_quantizer_csv(traj, out_path(args, "quantizer.csv"))
    if args.svg:
        export_utils.plot_trajectory(traj, args.out)

    est = simulator.lyapunov_exponent(traj)
    diag = simulator.intersample_bound_check(traj, sc.systems, sc.protocol)
    logger.info(f"Lyapunov exponent {est.exponent:.6g} 1/s over {est.T:.6g} s "
                f"(final norm {est.final_norm:.3e}{', underflow' if est.underflow else ''})")
    logger.info(f"{len(traj.quantizer_log)} samples, {traj.overflow_count} overflow(s), "
                f"{traj.containment_violations} containment violation(s), "
                f"{diag.violations} inter-sample bound violation(s)")
    return EXIT_OK


def handle_montecarlo(args) -> int:
    loaded = load_scenario(args)
    sc = loaded.scenario
    config_utils.dump_config(loaded, out_path(args, "config.yaml"))
    summary = simulator.monte_carlo(sc, loaded.runs, workers=args.workers)

    export_utils.write_montecarlo_csv(summary, out_path(args, "montecarlo_runs.csv"))
    export_utils.write_summary_csv(summary, out_path(args, "montecarlo_summary.csv"))
    if args.svg:
        export_utils.plot_exponent_histogram(summary, out_path(args, "montecarlo_exponents.svg"))

    stats = summary.stats()
    for key, value in stats.items():
        print(f"{key}: {value}")
    ok = summary.fraction_negative >= loaded.threshold
    logger.info(f"Fraction negative {summary.fraction_negative:.3f} "
                f"({'meets' if ok else 'below'} threshold {loaded.threshold})")
    return EXIT_OK if ok else EXIT_FAIL


def handle_rate(args) -> int:
    loaded = load_scenario(args)
    sc = loaded.scenario
    cfg = sc.protocol
    fmt = cfg.symbol_format
    box_bits, mode_bits = fmt.widths
    n_min = protocol.min_symbols_per_dimension(sc.systems, cfg.tau)
    print(f"data_rate: {protocol.data_rate(cfg):.10g}")
    print(f"bits_per_sample: {fmt.bits_per_sample}")
    print(f"box_bits: {box_bits}")
    print(f"mode_bits: {mode_bits}")
    print(f"min_N: {n_min}")
    print(f"minimum_data_rate: {protocol.minimum_data_rate(sc.systems, cfg.tau):.10g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Markov / semi-Markov jump linear systems under finite data rate")
    subparsers = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument('config', help="YAML scenario path or a bundled name such as 'paper_example'")
        p.add_argument('--out', default=DEFAULT_OUT, help='Output directory')
        p.add_argument('--horizon', type=float, default=None)
        p.add_argument('--seed', type=int, default=None)
        p.add_argument('--strategy', choices=list(protocol.WORST_STRATEGIES), default=None,
                       help='Override the worst-case propagator strategy')
        p.add_argument('-v', '--verbose', action='store_true')

    # Certificate
    p_cert = subparsers.add_parser('certificate')
    common(p_cert)
    p_cert.add_argument('--budget', type=int, default=None, help='Maximum optimizer evaluations')
    p_cert.add_argument('--tau-sweep', default=None, metavar='LO:HI:STEPS')
    p_cert.add_argument('--svg', action='store_true')
    p_cert.set_defaults(func=handle_certificate)

    # Simulate
    p_sim = subparsers.add_parser('simulate')
    common(p_sim)
    p_sim.add_argument('--svg', action='store_true')
    p_sim.set_defaults(func=handle_simulate)

    # Monte Carlo
    p_mc = subparsers.add_parser('montecarlo')
    common(p_mc)
    p_mc.add_argument('--runs', type=int, default=None)
    p_mc.add_argument('--threshold', type=float, default=None, help='Required fraction of negative exponents')
    p_mc.add_argument('--workers', type=int, default=1)
    p_mc.add_argument('--svg', action='store_true')
    p_mc.set_defaults(func=handle_montecarlo)

    # Rate
    p_rate = subparsers.add_parser('rate')
    common(p_rate)
    p_rate.set_defaults(func=handle_rate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        code = args.func(args)
    except (config_utils.ConfigError, protocol.AssumptionViolation, switching.InvalidLawError,
            certificate.CertificateError, mathkit.MatrixError) as e:
        logger.error(f"Configuration error: {e}")
        sys.exit(EXIT_CONFIG)
    except OSError as e:
        logger.error(f"I/O error: {e}")
        sys.exit(EXIT_IO)
    sys.exit(code)

if __name__ == "__main__":
    main()
