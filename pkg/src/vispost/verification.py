"""Scores and diagnostics for discrete predictive distributions on the WMO scale.

Every forecast is a probability mass function over the 84 scale values; arrays
of PMFs carry the class axis last. Observations are 1-based class indices.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .scale import N_CLASSES, scale_values

PMF_TOL = 1e-9


def check_pmf(pmf, n_classes: int = N_CLASSES) -> np.ndarray:
    """Validate and return ``pmf`` as a float array with ``n_classes`` on the last axis."""
    p = np.asarray(pmf, dtype=float)
    if p.shape[-1:] != (n_classes,):
        raise ValueError(f"PMF must have {n_classes} entries on the last axis, got shape {p.shape}")
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ValueError("PMF entries must be finite and non-negative")
    if np.any(np.abs(p.sum(axis=-1) - 1) > PMF_TOL):
        raise ValueError("PMF does not sum to 1")
    return p


def _obs_index(obs, shape) -> np.ndarray:
    k = np.asarray(obs)
    if np.any(k < 1) or np.any(k > N_CLASSES):
        raise ValueError("observed class outside 1..84")
    return np.broadcast_to(k, shape).astype(np.int64) - 1


_PAIR_DIST = np.abs(scale_values()[:, None] - scale_values()[None, :])


def crps(pmf, obs) -> np.ndarray | float:
    """CRPS in meters: ``sum_k p_k |y_k - x| - sum_{k>l} p_k p_l |y_k - y_l|``."""
    p = check_pmf(pmf)
    k = _obs_index(obs, p.shape[:-1])
    y = scale_values()
    x = y[k]
    first = np.sum(p * np.abs(y - x[..., None]), axis=-1)
    second = 0.5 * np.sum((p @ _PAIR_DIST) * p, axis=-1)
    out = np.maximum(first - second, 0.0)
    return float(out) if out.ndim == 0 else out


def logs_floor(pi: float = 0.01, days: int = 365) -> float:
    """Smallest probability such that a class shows up once a year with probability ``pi``."""
    return -math.expm1(math.log1p(-pi) / days)


def floored_pmf(pmf, pi: float = 0.01) -> np.ndarray:
    p = np.maximum(check_pmf(pmf), logs_floor(pi))
    return p / p.sum(axis=-1, keepdims=True)


def logs(pmf, obs, pi: float = 0.01) -> np.ndarray | float:
    """Logarithmic score (nats) of the floored and renormalized PMF."""
    p = floored_pmf(pmf, pi)
    k = _obs_index(obs, p.shape[:-1])
    out = -np.log(np.take_along_axis(p, k[..., None], axis=-1)[..., 0])
    return float(out) if out.ndim == 0 else out


def pit_value(pmf, obs, u) -> np.ndarray | float:
    """Randomized PIT ``F(x-) + u * p(x)``."""
    p = check_pmf(pmf)
    k = _obs_index(obs, p.shape[:-1])
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("u must lie in [0, 1]")
    cdf = np.cumsum(p, axis=-1)
    at = np.take_along_axis(p, k[..., None], axis=-1)[..., 0]
    below = np.take_along_axis(cdf, k[..., None], axis=-1)[..., 0] - at
    out = np.clip(np.maximum(below, 0.0) + u * at, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def pit_histogram(values, n_bins: int = 10) -> np.ndarray:
    """Counts of PIT values in ``n_bins`` equal-width bins on [0, 1]."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no PIT values")
    if np.any(v < 0) or np.any(v > 1):
        raise ValueError("PIT values must lie in [0, 1]")
    counts, _ = np.histogram(v, bins=n_bins, range=(0.0, 1.0))
    return counts


def ks_uniformity(values) -> tuple[float, float]:
    """Two-sided Kolmogorov-Smirnov distance to U(0, 1) and its asymptotic p-value."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no PIT values")
    res = stats.kstest(v, "uniform", method="asymp")
    return float(res.statistic), float(res.pvalue)


def central_interval(pmf, level: float = 0.9) -> tuple:
    """Bounds (m) of the central prediction interval.

    Each bound is the smallest scale value whose CDF reaches the tail level
    ``(1 - level) / 2`` resp. ``(1 + level) / 2``.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    p = check_pmf(pmf)
    cdf = np.cumsum(p, axis=-1)
    y = scale_values()
    lo_q, hi_q = (1 - level) / 2, (1 + level) / 2
    # A tiny slack absorbs cumulative-sum rounding right at a tail level.
    lo = y[np.argmax(cdf >= lo_q - 1e-12, axis=-1)]
    hi = y[np.argmax(cdf >= hi_q - 1e-12, axis=-1)]
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


def mean_of(pmf) -> np.ndarray | float:
    out = check_pmf(pmf) @ scale_values()
    return float(out) if np.ndim(out) == 0 else out


def rmse_of_mean(means, observed_m) -> float:
    means = np.asarray(means, dtype=float)
    if means.size == 0:
        raise ValueError("no cases")
    return float(np.sqrt(np.mean((means - np.asarray(observed_m, dtype=float)) ** 2)))


def skill_score(mean_score, mean_score_ref):
    """``1 - score / reference``; positive means better than the reference."""
    ref = np.asarray(mean_score_ref, dtype=float)
    if np.any(ref == 0):
        raise ZeroDivisionError("reference score is zero")
    out = 1.0 - np.asarray(mean_score, dtype=float) / ref
    return float(out) if out.ndim == 0 else out


# -- stationary bootstrap ------------------------------------------------------


def default_block_length(n: int) -> int:
    return max(1, math.ceil(n ** (1 / 3) - 1e-9))


def stationary_bootstrap_indices(n: int, mean_block_len: float, rng: np.random.Generator, return_restarts=False):
    """One stationary-bootstrap resample of ``range(n)``.

    Blocks start at uniform positions, have geometric lengths with mean
    ``mean_block_len`` and wrap around circularly.
    """
    if mean_block_len < 1:
        raise ValueError("mean block length must be >= 1")
    restart = rng.random(n) < 1.0 / mean_block_len
    restart[0] = True
    starts = rng.integers(0, n, size=n)
    pos = np.arange(n)
    block_begin = np.maximum.accumulate(np.where(restart, pos, 0))
    idx = (starts[block_begin] + pos - block_begin) % n
    if return_restarts:
        return idx, restart
    return idx


def stationary_bootstrap_means(series, n_boot: int = 2000, mean_block_len: float | None = None, seed=0) -> np.ndarray:
    """Column means of ``n_boot`` stationary-bootstrap resamples of the rows of ``series``.

    Each resample draws from its own generator spawned from ``seed``, so the
    result does not depend on evaluation order.
    """
    s = np.asarray(series, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    n = s.shape[0]
    if n < 2:
        raise ValueError("bootstrap needs at least two observations")
    L = default_block_length(n) if mean_block_len is None else mean_block_len
    children = np.random.SeedSequence(seed).spawn(n_boot)
    out = np.empty((n_boot, s.shape[1]))
    for b, child in enumerate(children):
        idx = stationary_bootstrap_indices(n, L, np.random.default_rng(child))
        out[b] = s[idx].mean(axis=0)
    return out


def normal_ci(point, boot_values, level: float = 0.95):
    z = stats.norm.ppf(0.5 + level / 2)
    sd = np.std(boot_values, axis=0, ddof=1)
    return point - z * sd, point + z * sd


def stationary_bootstrap_ci(
    score_series,
    n_boot: int = 2000,
    mean_block_len: float | None = None,
    level: float = 0.95,
    seed=0,
    statistic: Callable[[np.ndarray], float] | None = None,
) -> tuple[float, float]:
    """Normal-approximation CI from the stationary-bootstrap standard deviation.

    ``statistic`` maps the vector of column means to the quantity of interest;
    by default the series is one-dimensional and its mean is used.
    """
    s = np.asarray(score_series, dtype=float)
    stat = statistic or (lambda m: m[0])
    point = stat(s.reshape(s.shape[0], -1).mean(axis=0))
    boot = stationary_bootstrap_means(s, n_boot, mean_block_len, seed)
    values = np.apply_along_axis(stat, 1, boot)
    lo, hi = normal_ci(point, values, level)
    if not np.isfinite(lo) or hi - lo < 0:
        return float(point), float(point)
    return float(min(lo, point)), float(max(hi, point))


# -- aggregation ---------------------------------------------------------------


@dataclass
class SkillSummary:
    crpss: float
    crpss_lo: float
    crpss_hi: float
    logss: float
    logss_lo: float
    logss_hi: float


@dataclass
class LeadScores:
    lead_h: int
    model: str
    mean_crps: float
    mean_logs: float
    coverage90: float
    mean_width: float
    rmse_mean: float
    n_cases: int
    skill: dict[str, SkillSummary] = field(default_factory=dict)


@dataclass
class ScoreReport:
    rows: list[LeadScores]
    references: list[str]

    def row(self, lead_h: int, model: str) -> LeadScores:
        for r in self.rows:
            if r.lead_h == lead_h and r.model == model:
                return r
        raise KeyError((lead_h, model))

    def csv_header(self, reference: str) -> list[str]:
        return [
            "lead_h", "model", "mean_crps", "mean_logs", "coverage90", "mean_width", "rmse_mean",
            f"crpss_vs_{reference}", "crpss_lo", "crpss_hi",
            f"logss_vs_{reference}", "logss_lo", "logss_hi", "n_cases",
        ]  # fmt: skip

    def to_csv(self, path, reference: str) -> None:
        if reference not in self.references:
            raise KeyError(f"no skill scores against {reference!r}")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.csv_header(reference))
            for r in self.rows:
                s = r.skill[reference]
                w.writerow(
                    [r.lead_h, r.model]
                    + [repr(float(v)) for v in (r.mean_crps, r.mean_logs, r.coverage90, r.mean_width, r.rmse_mean)]
                    + [repr(float(v)) for v in (s.crpss, s.crpss_lo, s.crpss_hi, s.logss, s.logss_lo, s.logss_hi)]
                    + [r.n_cases]
                )

    def to_dict(self) -> dict:
        return {"references": list(self.references), "rows": [asdict(r) for r in self.rows]}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        rows = []
        for r in d["rows"]:
            r = dict(r)
            r["skill"] = {k: SkillSummary(**v) for k, v in r["skill"].items()}
            rows.append(LeadScores(**r))
        return cls(rows, list(d["references"]))


def case_scores(pmf, obs, pi: float = 0.01, level: float = 0.9) -> dict[str, np.ndarray]:
    """Per-case CRPS, LogS, interval coverage and width, and predictive mean."""
    p = check_pmf(pmf)
    obs = np.asarray(obs, dtype=np.int64)
    y_obs = scale_values()[obs - 1]
    lo, hi = central_interval(p, level)
    return {
        "crps": np.atleast_1d(crps(p, obs)),
        "logs": np.atleast_1d(logs(p, obs, pi)),
        "covered": np.atleast_1d((lo <= y_obs) & (y_obs <= hi)).astype(float),
        "width": np.atleast_1d(hi - lo).astype(float),
        "mean": np.atleast_1d(mean_of(p)),
        "obs_m": np.atleast_1d(y_obs).astype(float),
    }


def aggregate_report(
    predictions: Mapping[str, np.ndarray],
    obs,
    lead_h,
    references: Sequence[str] = (),
    time_order=None,
    n_boot: int = 2000,
    mean_block_len: float | None = None,
    level: float = 0.95,
    pi: float = 0.01,
    seed: int = 0,
) -> ScoreReport:
    """Per-lead-time score means and skill scores with bootstrap CIs.

    Parameters
    ----------
    predictions : mapping of model name to an (n, 84) PMF array
        All arrays are aligned with ``obs`` and ``lead_h``; references are
        ordinary entries of this mapping named in ``references``.
    obs : (n,) observed classes
    lead_h : (n,) lead times in hours
    time_order : (n,) sortable keys, optional
        Order of cases within a lead time for the block bootstrap (valid
        time); defaults to input order.
    """
    obs = np.asarray(obs, dtype=np.int64)
    lead_h = np.asarray(lead_h)
    n = obs.size
    for name, p in predictions.items():
        if np.shape(p) != (n, N_CLASSES):
            raise ValueError(f"predictions for {name!r} have shape {np.shape(p)}, expected ({n}, {N_CLASSES})")
    if lead_h.shape != (n,):
        raise ValueError("lead times misaligned with observations")
    missing = [r for r in references if r not in predictions]
    if missing:
        raise KeyError(f"unknown reference model(s) {missing}")
    order = np.arange(n) if time_order is None else np.lexsort((np.arange(n), np.asarray(time_order)))

    models = list(predictions)
    per_case = {m: case_scores(predictions[m], obs, pi) for m in models}
    rows = []
    for lead in sorted(set(lead_h.tolist())):
        sel = order[lead_h[order] == lead]
        crps_cols = np.column_stack([per_case[m]["crps"][sel] for m in models])
        logs_cols = np.column_stack([per_case[m]["logs"][sel] for m in models])
        series = np.hstack([crps_cols, logs_cols])
        means = series.mean(axis=0)
        boot = None
        if references and sel.size >= 2:
            boot = stationary_bootstrap_means(series, n_boot, mean_block_len, seed=[seed, int(lead)])
        nm = len(models)
        for i, m in enumerate(models):
            sc = per_case[m]
            row = LeadScores(
                lead_h=int(lead),
                model=m,
                mean_crps=float(means[i]),
                mean_logs=float(means[nm + i]),
                coverage90=float(sc["covered"][sel].mean()),
                mean_width=float(sc["width"][sel].mean()),
                rmse_mean=rmse_of_mean(sc["mean"][sel], sc["obs_m"][sel]),
                n_cases=int(sel.size),
            )
            for ref in references:
                j = models.index(ref)
                row.skill[ref] = _skill_summary(means, boot, i, j, nm, level)
            rows.append(row)
    return ScoreReport(rows, list(references))


def _skill_summary(means, boot, i, j, nm, level) -> SkillSummary:
    out = []
    for off in (0, nm):
        a, r = off + i, off + j
        point = skill_score(means[a], means[r]) if means[r] > 0 else float("nan")
        if i == j:
            out += [0.0, 0.0, 0.0]
            continue
        if boot is None or not np.isfinite(point):
            out += [point, point, point]
            continue
        values = 1.0 - boot[:, a] / boot[:, r]
        lo, hi = normal_ci(point, values, level)
        out += [float(point), float(min(lo, point)), float(max(hi, point))]
    return SkillSummary(*out)


def pit_table(pmf, obs, n_bins: int = 10, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Randomized PIT values and their histogram counts for one forecast set."""
    p = check_pmf(pmf)
    u = np.random.default_rng(seed).random(p.shape[0])
    values = pit_value(p, obs, u)
    return np.atleast_1d(values), pit_histogram(values, n_bins)
