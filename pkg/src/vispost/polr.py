"""Proportional-odds logistic regression over ordered visibility classes.

The cumulative model is ``P(Y <= y_k | x) = logistic(alpha_k + x @ beta)`` for
``k < K`` with ``P(Y <= y_K) = 1``, so a K-class model has ``K - 1`` free,
strictly increasing thresholds. A *positive* coefficient therefore shifts
probability towards *lower* visibility.

Fitting works in the unconstrained coordinates
``theta = (alpha_1, log(alpha_2 - alpha_1), ..., log(alpha_{K-1} - alpha_{K-2}), beta)``,
which keeps the thresholds ordered by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .scale import N_CLASSES

log = logging.getLogger(__name__)

FORMAT = "vispost.polr"
VERSION = 1

_LOG_FLOOR = np.log(1e-300)
# Bounds on the log threshold gaps: e^-25 is a collapsed class, e^10 an
# effectively infinite gap.
_LOG_GAP_BOUNDS = (-25.0, 10.0)
_ALPHA1_BOUNDS = (-60.0, 60.0)
# Bound on coefficients of standardized features. Under quasi-separation the
# likelihood keeps improving as a coefficient grows without limit; at 30 the
# separated cases already sit e^-30 away from their limiting probabilities.
_COEF_BOUND = 30.0


class PolrConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PolrParams:
    thresholds: np.ndarray
    coefficients: np.ndarray
    active_mask: np.ndarray | None = None
    feature_config: dict | None = None

    def __post_init__(self):
        a = np.asarray(self.thresholds, dtype=float)
        b = np.asarray(self.coefficients, dtype=float)
        mask = np.ones(b.shape, bool) if self.active_mask is None else np.asarray(self.active_mask, bool)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("need at least one threshold")
        if np.any(np.diff(a) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if mask.shape != b.shape:
            raise ValueError("active mask must match the coefficient vector")
        if np.any(b[~mask] != 0):
            raise ValueError("inactive coefficients must be exactly zero")
        object.__setattr__(self, "thresholds", a)
        object.__setattr__(self, "coefficients", b)
        object.__setattr__(self, "active_mask", mask)

    @property
    def n_classes(self) -> int:
        return self.thresholds.size + 1

    @property
    def n_features(self) -> int:
        return self.coefficients.size

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "thresholds": self.thresholds.tolist(),
            "coefficients": self.coefficients.tolist(),
            "active_mask": self.active_mask.tolist(),
            "feature_config": self.feature_config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolrParams":
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError(f"not a {FORMAT} v{VERSION} document")
        return cls(
            np.array(d["thresholds"], float),
            np.array(d["coefficients"], float),
            np.array(d["active_mask"], bool),
            d.get("feature_config"),
        )


@dataclass(frozen=True)
class PolrFitConfig:
    """Fit controls.

    ``constrained_nonnegative`` lists covariates whose effect on visibility
    must not be negative, i.e. whose cumulative-logit coefficient must be
    ``<= 0``. Violators are dropped one at a time, largest violation first,
    and the model is refit. ``grad_tol`` bounds the largest projected
    gradient component of the mean per-case NLL in standardized,
    reparametrized coordinates; ``armijo`` is the sufficient-decrease
    constant of the backtracking line search.
    """

    constrained_nonnegative: tuple[int, ...] = ()
    max_iter: int = 1000
    grad_tol: float = 1e-6
    armijo: float = 1e-4
    standardize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "constrained_nonnegative", tuple(int(j) for j in self.constrained_nonnegative))
        if self.max_iter < 1 or self.grad_tol <= 0 or not 0 < self.armijo < 1:
            raise ValueError("invalid POLR fit controls")


def _check_x(params: PolrParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.n_features:
        raise ValueError(f"feature dimension {x.shape[-1]} != model dimension {params.n_features}")
    return x


def polr_cdf(params: PolrParams, x) -> np.ndarray:
    """Cumulative class probabilities; last axis has ``n_classes`` entries ending in 1."""
    x = _check_x(params, x)
    eta = x @ params.coefficients
    cdf = expit(params.thresholds + np.asarray(eta)[..., None])
    return np.concatenate([cdf, np.ones(cdf.shape[:-1] + (1,))], axis=-1)


def polr_pmf(params: PolrParams, x) -> np.ndarray:
    """Class probabilities ``CDF_k - CDF_{k-1}``."""
    cdf = polr_cdf(params, x)
    return np.diff(cdf, axis=-1, prepend=0.0)


# -- likelihood in unconstrained coordinates -----------------------------------


def params_to_theta(params: PolrParams) -> np.ndarray:
    a = params.thresholds
    return np.concatenate([[a[0]], np.log(np.diff(a)), params.coefficients])


def theta_to_params(theta: np.ndarray, n_classes: int, active_mask=None, feature_config=None) -> PolrParams:
    alpha, beta = _unpack(theta, n_classes)
    if active_mask is not None:
        beta = np.where(active_mask, beta, 0.0)
    return PolrParams(alpha, beta, active_mask, feature_config)


def _unpack(theta, n_classes, anchor=0):
    """Thresholds and coefficients from ``theta``.

    ``theta[0]`` is the threshold with index ``anchor`` and ``theta[j]`` for
    ``j >= 1`` is the log gap between thresholds ``j - 1`` and ``j``. The
    public coordinates use ``anchor = 0``; the optimizer anchors at a
    central threshold so receding tail thresholds move independently.
    """
    n_thr = n_classes - 1
    gaps = np.exp(theta[1:n_thr])
    offsets = np.concatenate([[0.0], np.cumsum(gaps)])
    alpha = theta[0] + offsets - offsets[anchor]
    return alpha, theta[n_thr:]


def _reanchor(theta, n_classes, old, new):
    alpha, _ = _unpack(theta, n_classes, old)
    out = theta.copy()
    out[0] = alpha[new]
    return out


def _nll_grad_theta(theta, X, y0, n_classes, hessian=False, anchor=0):
    """NLL, gradient (and optionally Hessian) in theta; ``y0`` holds 0-based classes."""
    n_thr = n_classes - 1
    alpha, beta = _unpack(theta, n_classes, anchor)
    eta = X @ beta
    bottom = y0 == 0
    top = y0 == n_thr
    mid = ~(bottom | top)

    logp = np.empty(y0.shape)
    # First derivatives of log p w.r.t. the upper (alpha_y + eta) and lower
    # (alpha_{y-1} + eta) linear predictors, and the logistic at each.
    du = np.zeros(y0.shape)
    dl = np.zeros(y0.shape)
    su = np.ones(y0.shape)
    sl = np.zeros(y0.shape)

    b = alpha[y0[bottom]] + eta[bottom]
    logp[bottom] = -np.logaddexp(0.0, -b)
    du[bottom] = expit(-b)
    su[bottom] = expit(b)

    a = alpha[y0[top] - 1] + eta[top]
    logp[top] = -np.logaddexp(0.0, a)
    dl[top] = -expit(a)
    sl[top] = expit(a)

    ym = y0[mid]
    b = alpha[ym] + eta[mid]
    a = alpha[ym - 1] + eta[mid]
    d = np.maximum(b - a, 1e-300)
    inner = np.maximum(-np.expm1(-d), 1e-300)
    logp[mid] = -np.logaddexp(0.0, -b) - np.logaddexp(0.0, a) + np.log(inner)
    with np.errstate(over="ignore"):
        r = 1.0 / np.expm1(d)
    du[mid] = expit(-b) + r
    dl[mid] = -expit(a) - r
    su[mid] = expit(b)
    sl[mid] = expit(a)

    nll = -np.sum(np.maximum(logp, _LOG_FLOOR))
    g_alpha = -(
        np.bincount(y0[~top], weights=du[~top], minlength=n_thr)
        + np.bincount(y0[~bottom] - 1, weights=dl[~bottom], minlength=n_thr)
    )
    g_beta = -(X.T @ (du + dl))
    # Gap j moves thresholds j.. up when above the anchor and thresholds
    # ..j-1 down when at or below it.
    gaps = np.exp(theta[1:n_thr])
    upper = np.cumsum(g_alpha[::-1])[::-1]
    lower = np.cumsum(g_alpha) - g_alpha
    j = np.arange(1, n_thr)
    above = j > anchor
    g_gaps = gaps * np.where(above, upper[1:], -lower[1:])
    grad = np.concatenate([[g_alpha.sum()], g_gaps, g_beta])
    if not hessian:
        return nll, grad

    # Second derivatives of -log p in the two linear predictors.
    w_uu = du * du - du * (1.0 - 2.0 * su)
    w_ll = dl * dl - dl * (1.0 - 2.0 * sl)
    w_ul = du * dl
    H_aa = np.diag(
        np.bincount(y0[~top], weights=w_uu[~top], minlength=n_thr)
        + np.bincount(y0[~bottom] - 1, weights=w_ll[~bottom], minlength=n_thr)
    )
    if n_thr > 1:
        off = np.bincount(ym - 1, weights=w_ul[mid], minlength=n_thr - 1)
        idx = np.arange(n_thr - 1)
        H_aa[idx, idx + 1] = off
        H_aa[idx + 1, idx] = off
    wu = (w_uu + w_ul)[:, None] * X
    wl = (w_ll + w_ul)[:, None] * X
    H_ab = np.zeros((n_thr, X.shape[1]))
    for c in range(X.shape[1]):
        H_ab[:, c] = np.bincount(y0[~top], weights=wu[~top, c], minlength=n_thr) + np.bincount(
            y0[~bottom] - 1, weights=wl[~bottom, c], minlength=n_thr
        )
    H_bb = X.T @ ((w_uu + w_ll + 2.0 * w_ul)[:, None] * X)

    k = np.arange(n_thr)[:, None]
    J = np.zeros((n_thr, n_thr))
    J[:, 0] = 1.0
    J[:, 1:] = np.where(above, (k >= j) * gaps, -1.0 * (k < j) * gaps)
    H_tt = J.T @ H_aa @ J
    H_tt[np.arange(1, n_thr), np.arange(1, n_thr)] += g_gaps
    H_tb = J.T @ H_ab
    H = np.block([[H_tt, H_tb], [H_tb.T, H_bb]])
    return nll, grad, H


def _as_dataset(X, y, n_features=None):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError("expected X of shape (n, M) and y of shape (n,)")
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"feature dimension {X.shape[1]} != model dimension {n_features}")
    return X, y.astype(np.int64)


def polr_nll_grad(params: PolrParams, X, y) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of 1-based classes ``y`` and its gradient.

    The gradient is taken with respect to :func:`params_to_theta` coordinates
    ``(alpha_1, log gaps, beta)``.
    """
    X, y = _as_dataset(X, y, params.n_features)
    if y.min() < 1 or y.max() > params.n_classes:
        raise ValueError("class index out of range")
    return _nll_grad_theta(params_to_theta(params), X, y - 1, params.n_classes)


# -- fitting -------------------------------------------------------------------


def _initial_thresholds(y0, n_classes):
    n = y0.size
    cum = np.cumsum(np.bincount(y0, minlength=n_classes))[:-1] / n
    eps = 1.0 / (2 * n)
    alpha = np.clip(logit(np.clip(cum, eps, 1 - eps)), -15.0, 15.0)
    for k in range(1, alpha.size):
        alpha[k] = max(alpha[k], alpha[k - 1] + 1e-2)
    return alpha


def _bounds(idx, n_thr):
    lo = np.where(idx == 0, _ALPHA1_BOUNDS[0], np.where(idx < n_thr, _LOG_GAP_BOUNDS[0], -_COEF_BOUND))
    hi = np.where(idx == 0, _ALPHA1_BOUNDS[1], np.where(idx < n_thr, _LOG_GAP_BOUNDS[1], _COEF_BOUND))
    return lo, hi


def _projected(g, x, lo, hi):
    g = g.copy()
    g[(x <= lo) & (g > 0)] = 0.0
    g[(x >= hi) & (g < 0)] = 0.0
    return g


def _minimize(theta0, X, y0, n_classes, free, cfg):
    """Damped Newton iterations on the mean NLL with a backtracking line search.

    Only the coefficients flagged in ``free`` and the thresholds the
    likelihood can see move. With observed classes ``lo..hi`` (0-based) those
    are thresholds ``lo - 1 .. hi``; gaps outside that range are flat
    directions and keep their spacing, so unobserved tail thresholds travel
    outward with the identified ones. The absolute coordinate is a central
    threshold with a finite optimum, which lets a receding tail threshold
    move through its own gap alone. Iterates are projected onto box bounds
    that keep thresholds and coefficients finite when the data separate
    some classes perfectly.
    """
    n_thr = n_classes - 1
    n = y0.size
    j_lo = max(int(y0.min()) - 1, 0)
    j_hi = min(int(y0.max()), n_thr - 1)
    # Thresholds min(y0) .. max(y0) - 1 have finite optima; the two outer ones recede.
    anchor = int(np.clip(np.median(y0), y0.min(), max(y0.max() - 1, y0.min())))
    idx = np.concatenate([[0], np.arange(j_lo + 1, j_hi + 1), n_thr + np.flatnonzero(free)])
    lo, hi = _bounds(idx, n_thr)
    theta = _reanchor(theta0, n_classes, 0, anchor)
    theta[idx] = np.clip(theta[idx], lo, hi)

    def evaluate(t, hessian=False):
        out = _nll_grad_theta(t, X, y0, n_classes, hessian, anchor)
        f, g = out[0] / n, out[1][idx] / n
        if hessian:
            return f, g, out[2][np.ix_(idx, idx)] / n
        return f, g

    f, g, H = evaluate(theta, hessian=True)
    damping = 1e-8
    eye = np.eye(idx.size)
    for it in range(cfg.max_iter):
        x = theta[idx]
        pg = _projected(g, x, lo, hi)
        if np.max(np.abs(pg)) <= cfg.grad_tol:
            return _reanchor(theta, n_classes, anchor, 0), f * n
        # Coordinates held at a bound drop out of the Newton system.
        movable = pg != 0
        Hm = H[np.ix_(movable, movable)]
        scale = max(1.0, float(np.max(np.abs(np.diag(Hm)))))
        while True:
            try:
                L = np.linalg.cholesky(Hm + damping * scale * eye[: Hm.shape[0], : Hm.shape[0]])
                break
            except np.linalg.LinAlgError:
                damping = min(damping * 10.0, 1e8)
        step = np.zeros_like(x)
        step[movable] = -np.linalg.solve(L.T, np.linalg.solve(L, pg[movable]))
        slope = float(pg @ step)
        t = 1.0
        accepted = False
        for _ in range(40):
            cand = theta.copy()
            cand[idx] = np.clip(x + t * step, lo, hi)
            fc, _ = evaluate(cand)
            if fc <= f + cfg.armijo * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if damping >= 1e8:
                break
            damping = min(damping * 100.0, 1e8)
            continue
        theta = cand
        damping = max(damping * 0.1, 1e-12) if t == 1.0 else damping
        f, g, H = evaluate(theta, hessian=True)
    pg = _projected(g, theta[idx], lo, hi)
    raise PolrConvergenceError(
        f"POLR fit did not converge in {cfg.max_iter} iterations (gradient norm {np.max(np.abs(pg)):.3g})"
    )


def fit_polr(
    X,
    y,
    cfg: PolrFitConfig = PolrFitConfig(),
    n_classes: int = N_CLASSES,
    feature_config: dict | None = None,
) -> PolrParams:
    """Maximum-likelihood POLR fit with the iterative sign-constraint procedure.

    Parameters
    ----------
    X : array (n, M)
        Feature vectors.
    y : array (n,)
        Observed 1-based class indices.
    cfg : PolrFitConfig
    n_classes : int
        Size of the ordered class set (84 for the visibility scale).

    Returns
    -------
    PolrParams
        Thresholds and coefficients on the original feature scale. Covariates
        removed by the constraint procedure have ``active_mask`` False and a
        zero coefficient.
    """
    X, y = _as_dataset(X, y)
    if y.min() < 1 or y.max() > n_classes:
        raise ValueError(f"class index out of range 1..{n_classes}")
    if np.unique(y).size < 2:
        raise ValueError("degenerate dataset: need at least two distinct observed classes")
    n_feat = X.shape[1]
    if any(not 0 <= j < n_feat for j in cfg.constrained_nonnegative):
        raise ValueError("constrained covariate index out of range")
    y0 = y - 1

    if cfg.standardize:
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        center = np.zeros(n_feat)
        scale = np.ones(n_feat)
    Z = (X - center) / scale

    alpha0 = _initial_thresholds(y0, n_classes)
    theta = np.concatenate([[alpha0[0]], np.log(np.diff(alpha0)), np.zeros(n_feat)])
    active = np.ones(n_feat, bool)
    constrained = list(cfg.constrained_nonnegative)
    n_thr = n_classes - 1
    while True:
        theta, nll = _minimize(theta, Z, y0, n_classes, active, cfg)
        beta = theta[n_thr:]
        offenders = [j for j in constrained if active[j] and beta[j] > 0]
        if not offenders:
            break
        worst = max(offenders, key=lambda j: beta[j])
        log.debug("excluding covariate %d (coefficient %.4g), nll %.6g", worst, beta[worst], nll)
        active[worst] = False
        theta[n_thr + worst] = 0.0

    alpha, beta_z = _unpack(theta, n_classes)
    beta_z = np.where(active, beta_z, 0.0)
    beta = beta_z / scale
    alpha = alpha - center @ beta
    return PolrParams(alpha, beta, active, feature_config)
