"""Replication campaigns: convergence rates, concentration, stability.

A campaign fixes a forward problem and a ground truth, then runs fresh
dataset + estimation replications over a ladder of sample sizes N with the
regularization level tied to N through the rate schedule.  Reports carry
the raw per-replication table, per-N means, a fitted log-log slope with a
bootstrap confidence interval, and the theoretical exponent to compare
against.  Slopes are fitted on means of the unsquared error metrics; the
concentration report uses the squared loss d_r^2, matching the quantity
the tail bound controls.

Everything is deterministic given the campaign seed: datasets, estimator
restarts, and the bootstrap all draw from named substreams.  Replications
are independent and may run in a process pool; the report assembly sorts
by (N, rep) so results do not depend on completion order.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimator import (
    MapConfig,
    estimation_error,
    map_estimate,
    objective,
    prediction_error,
    rate_schedule,
    sieve_size,
)
from .fnspace import SpectralField, build_grid, sobolev_norm
from .model import (
    ForwardProblem,
    d_r2,
    generate_dataset,
    make_darcy,
    make_schrodinger,
    stability_exponent,
    synthesize_truth,
)
from .rng import stream_key, substream

__all__ = [
    "RateCampaign",
    "RateReport",
    "ConcentrationReport",
    "StabilityReport",
    "CampaignError",
    "build_forward_problem",
    "run_rate_campaign",
    "run_concentration",
    "run_stability_check",
    "fit_power_law",
    "write_rate_report",
    "write_concentration_report",
    "write_stability_report",
]

DEFAULT_N_LADDER = (128, 256, 512, 1024, 2048, 4096, 8192)


class CampaignError(RuntimeError):
    """Too many replications failed for the report to be trustworthy."""


@dataclass(frozen=True)
class RateCampaign:
    """Replication plan: model, truth, ladder, and estimator settings."""

    kind: str = "darcy"
    dim: int = 1
    n: int = 127
    alpha: float = 2.0
    kappa: float = 1.0
    N_ladder: tuple = DEFAULT_N_LADDER
    reps_per_N: int = 20
    sigma: float = 0.05
    seed: int = 0
    truth_modes: int = 16
    truth_radius: float = 1.0
    r_multiplier: float = 1.0
    modes_override: int | None = None
    f_min: float = 0.5
    link_b: float = 1.0
    source_amplitude: float = 10.0
    boundary_value: float = 1.0
    max_iters: int = 500
    grad_tol: float = 1e-8
    restarts: int = 3
    workers: int = 1
    max_failure_fraction: float = 0.05

    def __post_init__(self):
        ladder = tuple(int(N) for N in self.N_ladder)
        if any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError("N_ladder must be strictly increasing")
        object.__setattr__(self, "N_ladder", ladder)
        if self.reps_per_N < 1:
            raise ValueError("reps_per_N must be positive")

    def regularization(self, N: int) -> float:
        return self.r_multiplier * rate_schedule(N, self.alpha, self.kappa, self.dim)

    def modes_for(self, N: int) -> int:
        if self.modes_override is not None:
            return self.modes_override
        return sieve_size(N, self.alpha, self.dim, self.n)


def build_forward_problem(c: RateCampaign) -> ForwardProblem:
    grid = build_grid(c.dim, c.n)
    if c.kind == "darcy":
        return make_darcy(grid, c.f_min, c.link_b, c.source_amplitude)
    return make_schrodinger(grid, c.boundary_value, c.link_b)


def _campaign_truth(c: RateCampaign, fp: ForwardProblem):
    return synthesize_truth(
        fp.grid, c.alpha, c.truth_modes, stream_key(c.seed, "truth") % 2**31,
        c.truth_radius, fp.link,
    )


def _run_one_rep(c: RateCampaign, N: int, rep: int) -> dict:
    """One replication: fresh dataset, estimation, metrics. Pure in (c, N, rep)."""
    fp = build_forward_problem(c)
    truth = _campaign_truth(c, fp)
    data_seed = stream_key(c.seed, "data", N, rep) % 2**31
    ds = generate_dataset(fp, truth, N, c.sigma, data_seed)
    r_N = c.regularization(N)
    K = c.modes_for(N)
    cfg = MapConfig(
        alpha=c.alpha,
        r=r_N,
        K=K,
        max_iters=c.max_iters,
        grad_tol=c.grad_tol,
        restarts=c.restarts,
        seed=stream_key(c.seed, "fit", N, rep) % 2**31,
    )
    fit = map_estimate(fp, ds, cfg)
    theta_hat = fit.theta_hat

    zero = SpectralField(fp.grid, np.zeros(theta_hat.coeffs.shape))
    truth_proj = SpectralField(fp.grid, truth.theta.coeffs[(slice(0, K),) * fp.grid.dim])
    trunc = SpectralField(fp.grid, np.array(truth.theta.coeffs))
    trunc_tail = trunc.coeffs.copy()
    trunc_tail[(slice(0, K),) * fp.grid.dim] = 0.0
    sieve_trunc = sobolev_norm(SpectralField(fp.grid, trunc_tail), 0.0)

    trace = fit.objective_trace
    return {
        "N": N,
        "rep": rep,
        "data_seed": data_seed,
        "r_N": r_N,
        "sieve_K": K,
        "prediction_error": prediction_error(fp, theta_hat, truth.theta),
        "estimation_error": estimation_error(fit.f_hat, truth.f),
        "d_r2": d_r2(fp, theta_hat, truth.theta, r_N, c.alpha),
        "theta_norm_alpha": sobolev_norm(theta_hat, c.alpha),
        "objective_hat": objective(fp, ds, theta_hat, cfg),
        "objective_zero": objective(fp, ds, zero, cfg),
        "objective_truth_proj": objective(fp, ds, truth_proj, cfg),
        "sieve_truncation": sieve_trunc,
        "trace_monotone": bool(np.all(np.diff(trace) >= -1e-12)),
        "converged": bool(fit.converged),
        "n_iters": fit.n_iters,
        "restart_index": fit.restart_index,
    }


def _rep_worker(args):
    c, N, rep = args
    try:
        return ("ok", _run_one_rep(c, N, rep))
    except Exception as exc:  # recorded and excluded, never imputed
        return ("error", {"N": N, "rep": rep, "error": f"{type(exc).__name__}: {exc}"})


def _run_reps(c: RateCampaign, tasks):
    if c.workers > 1:
        with ProcessPoolExecutor(max_workers=c.workers) as pool:
            outcomes = list(pool.map(_rep_worker, tasks, chunksize=1))
    else:
        outcomes = [_rep_worker(t) for t in tasks]
    rows = [payload for status, payload in outcomes if status == "ok"]
    failures = [payload for status, payload in outcomes if status == "error"]
    if len(failures) > c.max_failure_fraction * len(tasks):
        raise CampaignError(
            f"{len(failures)} of {len(tasks)} replications failed: "
            + "; ".join(f["error"] for f in failures[:5])
        )
    rows.sort(key=lambda r: (r["N"], r["rep"]))
    return rows, failures


def fit_power_law(N_values, means):
    """Least-squares slope and intercept of log(mean) against log(N)."""
    slope, intercept = np.polyfit(np.log(np.asarray(N_values, float)), np.log(means), 1)
    return float(slope), float(intercept)


@dataclass(frozen=True)
class RateReport:
    campaign: RateCampaign
    rows: list
    failures: list
    per_N_means: dict
    slope: float
    intercept: float
    slope_ci: tuple
    metric: str
    theory_prediction_exponent: float
    theory_estimation_exponent: float
    extra_slopes: dict = field(default_factory=dict)


def _bootstrap_slope(Ns, table, rng, n_boot=1000):
    """Percentile CI of the slope under within-N replication resampling."""
    slopes = np.empty(n_boot)
    cols = [np.asarray(table[N]) for N in Ns]
    for b in range(n_boot):
        means = [np.mean(rng.choice(col, size=col.size, replace=True)) for col in cols]
        slopes[b] = fit_power_law(Ns, means)[0]
    return (float(np.percentile(slopes, 2.5)), float(np.percentile(slopes, 97.5)))


def run_rate_campaign(c: RateCampaign, metric_fn=None) -> RateReport:
    """Full rate experiment; ``metric_fn(N, rep)`` bypasses estimation in tests.

    The fitted slope refers to the per-N means of the prediction error
    (unsquared); slopes of the other metrics are reported alongside.
    """
    tasks = [(c, N, rep) for N in c.N_ladder for rep in range(c.reps_per_N)]
    if metric_fn is None:
        rows, failures = _run_reps(c, tasks)
    else:
        rows = [
            {"N": N, "rep": rep, **metric_fn(N, rep)}
            for _, N, rep in tasks
        ]
        failures = []

    metric = "prediction_error"
    table = {
        N: [r[metric] for r in rows if r["N"] == N] for N in c.N_ladder
    }
    per_N_means = {N: float(np.mean(v)) for N, v in table.items() if v}
    Ns = sorted(per_N_means)
    slope, intercept = fit_power_law(Ns, [per_N_means[N] for N in Ns])
    ci = _bootstrap_slope(
        Ns, {N: table[N] for N in Ns}, substream(c.seed, "bootstrap")
    )

    extra = {}
    for other in ("estimation_error", "d_r2"):
        if all(other in r for r in rows) and rows:
            means = [float(np.mean([r[other] for r in rows if r["N"] == N])) for N in Ns]
            if all(m > 0 for m in means):
                extra[other] = fit_power_law(Ns, means)[0]

    s = c.alpha + c.kappa
    theory_pred = -s / (2.0 * s + c.dim)
    tau = stability_exponent(c.kind, c.alpha)
    theory_est = tau * theory_pred
    return RateReport(
        campaign=c,
        rows=rows,
        failures=failures,
        per_N_means=per_N_means,
        slope=slope,
        intercept=intercept,
        slope_ci=ci,
        metric=metric,
        theory_prediction_exponent=theory_pred,
        theory_estimation_exponent=theory_est,
        extra_slopes=extra,
    )


@dataclass(frozen=True)
class ConcentrationReport:
    campaign: RateCampaign
    N: int
    r_N: float
    M_ladder: tuple
    frequencies: tuple
    d_r2_values: np.ndarray
    failures: list


def run_concentration(c: RateCampaign, M_ladder=(1.0, 2.0, 4.0, 8.0)) -> ConcentrationReport:
    """Empirical exceedance of {d_r^2 >= M r_N^2} at a single sample size."""
    if len(c.N_ladder) != 1:
        raise ValueError("concentration runs use a single-N campaign")
    if c.reps_per_N < 50:
        raise ValueError("concentration needs at least 50 replications")
    N = c.N_ladder[0]
    tasks = [(c, N, rep) for rep in range(c.reps_per_N)]
    rows, failures = _run_reps(c, tasks)
    d2 = np.array([r["d_r2"] for r in rows])
    r_N = c.regularization(N)
    freqs = tuple(float(np.mean(d2 >= M * r_N**2)) for M in M_ladder)
    return ConcentrationReport(
        campaign=c,
        N=N,
        r_N=r_N,
        M_ladder=tuple(M_ladder),
        frequencies=freqs,
        d_r2_values=d2,
        failures=failures,
    )


@dataclass(frozen=True)
class StabilityReport:
    campaign: RateCampaign
    rows: list
    tau: float
    fitted_constant: float
    fraction_below: float
    norm_bound_multiplier: float
    fraction_norm_bounded: float
    per_N_ratio_p95: dict
    failures: list


def run_stability_check(c: RateCampaign, norm_bound_multiplier: float = 3.0) -> StabilityReport:
    """Estimation error against the stability rate r_N^tau.

    The per-replication ratio estimation_error / r_N^tau is summarized by
    a fitted ceiling (the pooled 95th percentile with 10% headroom); the
    report carries the fraction of replications below it and the fraction
    whose fitted parameter norm stays within a multiple of the truth's.
    """
    tasks = [(c, N, rep) for N in c.N_ladder for rep in range(c.reps_per_N)]
    rows, failures = _run_reps(c, tasks)
    tau = stability_exponent(c.kind, c.alpha)
    for r in rows:
        r["stability_rate"] = r["r_N"] ** tau
        r["stability_ratio"] = r["estimation_error"] / r["stability_rate"]
    ratios = np.array([r["stability_ratio"] for r in rows])
    fitted = 1.1 * float(np.percentile(ratios, 95))
    frac = float(np.mean(ratios <= fitted))
    truth_norm = _campaign_truth(c, build_forward_problem(c)).norm_bound
    norms = np.array([r["theta_norm_alpha"] for r in rows])
    frac_norm = float(np.mean(norms <= norm_bound_multiplier * max(truth_norm, 1e-300)))
    per_n = {
        N: float(np.percentile([r["stability_ratio"] for r in rows if r["N"] == N], 95))
        for N in c.N_ladder
    }
    return StabilityReport(
        campaign=c,
        rows=rows,
        tau=tau,
        fitted_constant=fitted,
        fraction_below=frac,
        norm_bound_multiplier=norm_bound_multiplier,
        fraction_norm_bounded=frac_norm,
        per_N_ratio_p95=per_n,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# report artifacts

_RATE_COLUMNS = [
    "N", "rep", "data_seed", "r_N", "sieve_K",
    "prediction_error", "estimation_error", "d_r2",
    "theta_norm_alpha", "objective_hat", "objective_zero",
    "objective_truth_proj", "sieve_truncation",
    "trace_monotone", "converged", "n_iters", "restart_index",
]


def _fmt(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _write_table(rows, columns, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def write_rate_report(report: RateReport, outdir, stem="rate"):
    """CSV raw table + JSON summary + self-contained SVG log-log plot."""
    import pathlib

    outdir = pathlib.Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / f"{stem}_table.csv"
    cols = [c for c in _RATE_COLUMNS if all(c in r for r in report.rows)]
    if not cols:
        cols = sorted(report.rows[0].keys()) if report.rows else []
    _write_table(report.rows, cols, csv_path)
    summary = {
        "metric": report.metric,
        "per_N_means": {str(k): v for k, v in report.per_N_means.items()},
        "slope": report.slope,
        "intercept": report.intercept,
        "slope_ci": list(report.slope_ci),
        "theory_prediction_exponent": report.theory_prediction_exponent,
        "theory_estimation_exponent": report.theory_estimation_exponent,
        "extra_slopes": report.extra_slopes,
        "n_failures": len(report.failures),
        "failures": report.failures,
    }
    json_path = outdir / f"{stem}_summary.json"
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2)
    svg_path = outdir / f"{stem}_plot.svg"
    _plot_rate(report, svg_path)
    return {"table": str(csv_path), "summary": str(json_path), "plot": str(svg_path)}


def _plot_rate(report: RateReport, svg_path):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "pdemap"
    fig, ax = plt.subplots(figsize=(5.5, 4))
    Ns = sorted(report.per_N_means)
    means = [report.per_N_means[N] for N in Ns]
    ax.loglog(Ns, means, "o-", label=f"mean {report.metric}")
    anchor = means[0]
    theory = [anchor * (N / Ns[0]) ** report.theory_prediction_exponent for N in Ns]
    ax.loglog(Ns, theory, "k--", label=f"theory slope {report.theory_prediction_exponent:.3f}")
    fitted = [np.exp(report.intercept) * N**report.slope for N in Ns]
    ax.loglog(Ns, fitted, "r:", label=f"fit slope {report.slope:.3f}")
    ax.set_xlabel("N")
    ax.set_ylabel(report.metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(svg_path, metadata={"Date": None})
    plt.close(fig)


def write_concentration_report(report: ConcentrationReport, outdir, stem="concentration"):
    import pathlib

    outdir = pathlib.Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "exceedance_frequency"])
        for M, fr in zip(report.M_ladder, report.frequencies):
            w.writerow([_fmt(float(M)), _fmt(fr)])
    json_path = outdir / f"{stem}_summary.json"
    with open(json_path, "w") as fh:
        json.dump(
            {
                "N": report.N,
                "r_N": report.r_N,
                "M_ladder": [float(M) for M in report.M_ladder],
                "frequencies": list(report.frequencies),
                "n_reps": int(report.d_r2_values.size),
                "n_failures": len(report.failures),
            },
            fh,
            indent=2,
        )
    return {"table": str(csv_path), "summary": str(json_path)}


def write_stability_report(report: StabilityReport, outdir, stem="stability"):
    import pathlib

    outdir = pathlib.Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / f"{stem}.csv"
    cols = _RATE_COLUMNS + ["stability_rate", "stability_ratio"]
    cols = [c for c in cols if all(c in r for r in report.rows)]
    _write_table(report.rows, cols, csv_path)
    json_path = outdir / f"{stem}_summary.json"
    with open(json_path, "w") as fh:
        json.dump(
            {
                "tau": report.tau,
                "fitted_constant": report.fitted_constant,
                "fraction_below": report.fraction_below,
                "norm_bound_multiplier": report.norm_bound_multiplier,
                "fraction_norm_bounded": report.fraction_norm_bounded,
                "per_N_ratio_p95": {str(k): v for k, v in report.per_N_ratio_p95.items()},
                "n_failures": len(report.failures),
            },
            fh,
            indent=2,
        )
    return {"table": str(csv_path), "summary": str(json_path)}
