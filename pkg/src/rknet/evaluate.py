"""Test-set metrics: EQM, normalized EQM, the chi-square/CLT band, gains, decorrelation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .kalman import FilterRun
from .linalg import NumericalError, chol_solve, cholesky

__all__ = [
    "MetricsReport",
    "ComparisonTable",
    "eqm",
    "to_db",
    "eqm_normalized",
    "chi2_band",
    "gain_trace",
    "decorrelation_stat",
    "DecorrelationStat",
    "metrics_report",
    "compare",
    "write_metrics_csv",
    "read_metrics_csv",
    "DEFAULT_PROBES",
]

DEFAULT_PROBES = (70, 80)
METRICS_COLUMNS = ("estimator_id", "t", "eqm", "eqm_db", "eqmn", "k_pos_mean", "k_vel_mean",
                   "sd_pos_est", "sd_pos_emp")


def _truth_array(truths) -> np.ndarray:
    if isinstance(truths, np.ndarray):
        return truths if truths.ndim == 3 else truths[None]
    from .kalman import stack_episodes
    return stack_episodes(truths)[0]


def _errors(run: FilterRun, truths) -> np.ndarray:
    x = _truth_array(truths)
    if x.shape != run.x_post.shape:
        raise ValueError(f"truth shape {x.shape} does not match run shape {run.x_post.shape}")
    return x - run.x_post


def eqm(run: FilterRun, truths) -> np.ndarray:
    """Mean over episodes of the squared error norm, per time step."""
    e = _errors(run, truths)
    return (e * e).sum(-1).mean(0)


def to_db(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(values > 0, 10.0 * np.log10(np.where(values > 0, values, 1.0)), -np.inf)


def eqm_normalized(run: FilterRun, truths) -> np.ndarray:
    """Mean over episodes of ``e^T P^{-1} e`` with the filter's own corrected covariance."""
    e = _errors(run, truths)
    try:
        L = cholesky(run.P_post, "corrected covariance")
    except NumericalError:
        # locate the offending entry for the message
        for k in range(run.P_post.shape[0]):
            for t in range(run.P_post.shape[1]):
                try:
                    cholesky(run.P_post[k, t])
                except NumericalError:
                    ep = run.episode_ids[k] if run.episode_ids else k
                    raise NumericalError(
                        f"covariance not positive definite at episode {ep}, step {t}") from None
        raise
    return (e * chol_solve(L, e)).sum(-1).mean(0)


def chi2_band(m: int, N: int, k_sigma: float = 4.0) -> tuple[float, float, float, float]:
    """``(mean, variance, low, high)`` of the CLT approximation to the mean of N
    chi-square(m) draws."""
    if m < 1 or N < 1:
        raise ValueError("m and N must be >= 1")
    mean = float(m)
    var = 2.0 * m / N
    half = k_sigma * math.sqrt(var)
    return mean, var, mean - half, mean + half


def gain_trace(run: FilterRun) -> np.ndarray:
    """Mean gain over episodes, shape (T, m, n)."""
    return run.K.mean(axis=0)


@dataclass
class DecorrelationStat:
    mean: np.ndarray  # (m, n) cross-covariance estimate
    stderr: np.ndarray  # (m, n)
    window: tuple[int, int]

    @property
    def z_scores(self) -> np.ndarray:
        return self.mean / self.stderr


def decorrelation_stat(run: FilterRun, truths, last: int = 50) -> DecorrelationStat:
    """Pooled estimate of ``E[(x - x_hat) y^T]`` over the last ``last`` steps.

    Standard errors come from the spread of per-episode time averages, which are
    independent across episodes; with a single episode the time samples are used.
    """
    e = _errors(run, truths)
    T = e.shape[1]
    t0 = max(0, T - last)
    prod = e[:, t0:, :, None] * run.y[:, t0:, None, :]  # (N, W, m, n)
    N = prod.shape[0]
    if N > 1:
        per_ep = prod.mean(axis=1)
        mean = per_ep.mean(axis=0)
        se = per_ep.std(axis=0, ddof=1) / math.sqrt(N)
    else:
        samples = prod[0]
        mean = samples.mean(axis=0)
        W = samples.shape[0]
        se = samples.std(axis=0, ddof=1) / math.sqrt(W) if W > 1 else np.abs(mean)
    se = np.where(se > 0, se, np.finfo(float).tiny)
    return DecorrelationStat(mean, se, (t0, T))


@dataclass
class MetricsReport:
    estimator_id: str
    eqm: np.ndarray
    eqm_db: np.ndarray
    eqmn: np.ndarray
    k_mean: np.ndarray  # (T, m, n)
    sd_pos_est: np.ndarray  # RMS over episodes of the estimated position std
    sd_pos_emp: np.ndarray  # RMS over episodes of the position error
    N: int

    @property
    def T(self) -> int:
        return self.eqm.size

    @property
    def k_pos_mean(self) -> np.ndarray:
        return self.k_mean[:, 0, 0]

    @property
    def k_vel_mean(self) -> np.ndarray:
        return self.k_mean[:, 1, 0] if self.k_mean.shape[1] > 1 else np.full(self.T, np.nan)

    def at(self, t: int) -> dict:
        return {"eqm": float(self.eqm[t]), "eqm_db": float(self.eqm_db[t]),
                "eqmn": float(self.eqmn[t]), "k_pos": float(self.k_pos_mean[t])}


def metrics_report(run: FilterRun, truths, estimator_id: str | None = None) -> MetricsReport:
    e = _errors(run, truths)
    q = eqm(run, truths)
    return MetricsReport(
        estimator_id=estimator_id or run.estimator_id,
        eqm=q,
        eqm_db=to_db(q),
        eqmn=eqm_normalized(run, truths),
        k_mean=gain_trace(run),
        sd_pos_est=np.sqrt(run.P_post[:, :, 0, 0].mean(0)),
        sd_pos_emp=np.sqrt((e[:, :, 0] ** 2).mean(0)),
        N=len(run),
    )


@dataclass
class ComparisonTable:
    probes: tuple[int, ...]
    rows: list[tuple[str, list[tuple[float, float]]]]  # (estimator, [(eqm_db, eqmn) per probe])

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.rows), 2 * len(self.probes)

    def value(self, estimator_id: str, t: int) -> tuple[float, float]:
        j = self.probes.index(t)
        for name, vals in self.rows:
            if name == estimator_id:
                return vals[j]
        raise KeyError(estimator_id)

    def render(self) -> str:
        head1 = f"{'':<18}" + "".join(f"{'t = ' + str(t):^22}" for t in self.probes)
        cells = f"{'EQM (dB)':>11}{'EQM_n':>11}"
        head2 = f"{'estimator':<18}" + cells * len(self.probes)
        lines = [head1, head2, "-" * len(head2)]
        for name, vals in self.rows:
            lines.append(f"{name:<18}" + "".join(f"{d:>11.2f}{n:>11.3f}" for d, n in vals))
        return "\n".join(lines)

    def write_csv(self, path: str | Path, provenance: dict | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for key, val in (provenance or {}).items():
                fh.write(f"# {key}: {val}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimator_id"] + [f"{c}@{t}" for t in self.probes
                                           for c in ("eqm_db", "eqmn")])
            for name, vals in self.rows:
                w.writerow([name] + [repr(float(v)) for pair in vals for v in pair])


def compare(reports: Sequence[MetricsReport], probe_times: Sequence[int] = DEFAULT_PROBES
            ) -> ComparisonTable:
    if not reports:
        raise ValueError("no reports to compare")
    T = reports[0].T
    if any(r.T != T for r in reports):
        raise ValueError("reports must share the same length T")
    probes = tuple(int(t) for t in probe_times)
    for t in probes:
        if not 0 <= t < T:
            raise ValueError(f"probe time {t} is outside [0, {T})")
    rows = [(r.estimator_id, [(float(r.eqm_db[t]), float(r.eqmn[t])) for t in probes])
            for r in reports]
    return ComparisonTable(probes, rows)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_metrics_csv(reports: Sequence[MetricsReport], path: str | Path,
                      provenance: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, val in (provenance or {}).items():
            fh.write(f"# {key}: {val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in reports:
            for t in range(r.T):
                w.writerow([r.estimator_id, t, _fmt(r.eqm[t]), _fmt(r.eqm_db[t]), _fmt(r.eqmn[t]),
                            _fmt(r.k_pos_mean[t]), _fmt(r.k_vel_mean[t]),
                            _fmt(r.sd_pos_est[t]), _fmt(r.sd_pos_emp[t])])


def read_metrics_csv(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """Parse a metrics CSV into ``{estimator_id: {column: array over t}}``."""
    with open(path, encoding="utf-8") as fh:
        rows = [line for line in fh if line.strip() and not line.startswith("#")]
    if not rows:
        raise ValueError(f"{path}: no data")
    reader = csv.DictReader(rows)
    missing = set(METRICS_COLUMNS[:7]) - set(reader.fieldnames or [])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    out: dict[str, dict[str, list]] = {}
    for i, row in enumerate(reader, start=2):
        cols = [c for c in reader.fieldnames if c != "estimator_id"]
        est = out.setdefault(row["estimator_id"], {c: [] for c in cols})
        try:
            for c in est:
                est[c].append(float(row[c]))
        except (TypeError, ValueError):
            raise ValueError(f"{path}: malformed value on data row {i}") from None
    if not out:
        raise ValueError(f"{path}: no data rows")
    return {k: {c: np.array(v) for c, v in cols.items()} for k, cols in out.items()}
