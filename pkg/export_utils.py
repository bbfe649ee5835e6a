"""
Result files: CSV tables (17 significant digits), the certificate report
document (YAML) and static SVG figures.
"""

import csv
import logging
import os
from typing import Any, Iterable, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import yaml

import certificate
import mathkit
import simulator

logger = logging.getLogger(__name__)

matplotlib.rcParams['svg.hashsalt'] = 'mjls'
SVG_METADATA = {'Date': None}


def ensure_output_dir(file_path: str) -> None:
    """Ensures the directory for the output file exists."""
    directory = os.path.dirname(file_path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def fmt(value: Any) -> str:
    """Lossless text for doubles; integers and booleans as integers; strings as-is; None as empty."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), '.17g')


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    ensure_output_dir(path)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    logger.info(f"Saved to {path}")


# --- Trajectories ---

def trajectory_header(n: int, m: int) -> List[str]:
    return (['t'] + [f'x_{i + 1}' for i in range(n)] + [f'xhat_{i + 1}' for i in range(n)]
            + ['mode'] + [f'u_{j + 1}' for j in range(m)])


def write_trajectory_csv(traj: simulator.Trajectory, path: str) -> None:
    n, m = traj.x.shape[1], traj.u.shape[1]
    rows = ([t, *x, *xh, mode + 1, *u] for t, x, xh, mode, u in zip(traj.t, traj.x, traj.xhat, traj.mode, traj.u))
    write_csv(path, trajectory_header(n, m), rows)


def write_quantizer_csv(traj: simulator.Trajectory, path: str) -> None:
    n = traj.x.shape[1]
    header = ['k', 't_k'] + [f'xstar_{i + 1}' for i in range(n)] + ['E_k', 'box_index', 'mode', 'switch_flag']
    rows = ([r.k, r.t_k, *r.xstar, r.E, r.box_index, r.mode + 1, bool(r.switch_flag)] for r in traj.quantizer_log)
    write_csv(path, header, rows)


# --- Monte Carlo ---

def write_montecarlo_csv(summary: simulator.MonteCarloSummary, path: str) -> None:
    rows = ([r.seed, r.exponent, r.violations, r.overflows, r.diverged] for r in summary.runs)
    write_csv(path, ['seed', 'exponent', 'violations', 'overflows', 'diverged'], rows)


def write_summary_csv(summary: simulator.MonteCarloSummary, path: str) -> None:
    stats = summary.stats()
    write_csv(path, list(stats.keys()), [list(stats.values())])


# --- Certificate ---

REPORT_COLUMNS = ('mode', 'stabilizable', 'pi', 'pi_time', 'p_nu', 'p_upsilon', 'p_mu', 'Lambda',
                  'chi', 'psi', 'nu', 'upsilon', 'mu', 'rho', 'alpha', 'beta')


def write_report_table(report: certificate.CertificateReport, path: str) -> None:
    rows = ([row[c] for c in REPORT_COLUMNS] for row in certificate.report_rows(report))
    write_csv(path, REPORT_COLUMNS, rows)


def render_report(report: certificate.CertificateReport) -> str:
    return yaml.dump(certificate.report_document(report), sort_keys=False, default_flow_style=False, indent=4)


def save_report(report: certificate.CertificateReport, path: str) -> None:
    ensure_output_dir(path)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(render_report(report))
    logger.info(f"Saved to {path}")


def write_sweep_csv(points: Sequence[certificate.TauSweepPoint], path: str) -> None:
    rows = ([pt.tau, pt.condition_value, pt.passes, pt.data_rate, pt.note] for pt in points)
    write_csv(path, ['tau', 'condition_value', 'passes', 'data_rate', 'note'], rows)


# --- Figures ---

def _save_svg(fig, path: str) -> None:
    ensure_output_dir(path)
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)
    logger.info(f"Saved to {path}")


def plot_trajectory(traj: simulator.Trajectory, out_dir: str, prefix: str = "simulate") -> List[str]:
    """||x(t)|| on a log axis, per-coordinate x / x_hat overlays and the E_k staircase."""
    paths = []
    norms = np.array([mathkit.inf_norm(x) for x in traj.x])

    fig, ax = plt.subplots(figsize=(8, 4))
    ax.semilogy(traj.t, np.maximum(norms, np.finfo(float).tiny), lw=1.0)
    ax.set_xlabel('t [s]')
    ax.set_ylabel('||x(t)||')
    ax.grid(True, which='both', alpha=0.3)
    path = os.path.join(out_dir, f"{prefix}_norm.svg")
    _save_svg(fig, path)
    paths.append(path)

    n = traj.x.shape[1]
    fig, axes = plt.subplots(n, 1, figsize=(8, 2.5 * n), sharex=True, squeeze=False)
    for i in range(n):
        ax = axes[i, 0]
        ax.plot(traj.t, traj.x[:, i], lw=1.0, label=f'x_{i + 1}')
        ax.step(traj.t, traj.xhat[:, i], where='post', lw=0.8, ls='--', label=f'xhat_{i + 1}')
        ax.legend(loc='upper right')
        ax.grid(True, alpha=0.3)
    axes[-1, 0].set_xlabel('t [s]')
    path = os.path.join(out_dir, f"{prefix}_states.svg")
    _save_svg(fig, path)
    paths.append(path)

    t_k = [r.t_k for r in traj.quantizer_log]
    E = [r.E for r in traj.quantizer_log]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.step(t_k, E, where='post', lw=1.0)
    ax.set_yscale('log')
    ax.set_xlabel('t_k [s]')
    ax.set_ylabel('E_k')
    ax.grid(True, which='both', alpha=0.3)
    path = os.path.join(out_dir, f"{prefix}_radius.svg")
    _save_svg(fig, path)
    paths.append(path)
    return paths


def plot_exponent_histogram(summary: simulator.MonteCarloSummary, path: str,
                            bins: Optional[int] = None) -> str:
    ex = summary.exponents
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(ex, bins=bins or max(5, min(50, len(ex) // 2)))
    ax.axvline(0.0, color='k', lw=0.8)
    ax.set_xlabel('Lyapunov exponent [1/s]')
    ax.set_ylabel('runs')
    _save_svg(fig, path)
    return path


def plot_sweep(points: Sequence[certificate.TauSweepPoint], path: str) -> str:
    taus = [pt.tau for pt in points]
    values = [pt.condition_value for pt in points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(taus, values, marker='o', lw=1.0)
    ax.axhline(0.0, color='k', lw=0.8)
    ax.set_xlabel('tau [s]')
    ax.set_ylabel('condition value')
    _save_svg(fig, path)
    return path
