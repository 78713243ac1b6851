"""Predictor vectors built from an ensemble forecast case."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ForecastCase

BASE_FEATURES = ("ctrl", "ens_mean", "ens_var", "p_low", "p_mid", "p_high", "season_sin", "season_cos")


@dataclass(frozen=True)
class FeatureConfig:
    use_hres: bool = False
    thresholds: tuple[float, float, float] = (1000.0, 2000.0, 30000.0)
    normalizer: float = 70000.0

    def __post_init__(self):
        t1, t2, t3 = self.thresholds
        if not 0 < t1 < t2 < t3 < self.normalizer:
            raise ValueError("feature thresholds must satisfy 0 < t1 < t2 < t3 < normalizer")

    @property
    def names(self) -> tuple[str, ...]:
        return (("hres",) if self.use_hres else ()) + BASE_FEATURES

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def forecast_columns(self) -> tuple[int, ...]:
        """Indices of the normalized forecast-value features (sign-constrained in POLR)."""
        return tuple(range(3 if self.use_hres else 2))

    def to_dict(self) -> dict:
        return {
            "use_hres": self.use_hres,
            "thresholds": list(self.thresholds),
            "normalizer": self.normalizer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(
            use_hres=bool(d.get("use_hres", False)),
            thresholds=tuple(d.get("thresholds", (1000.0, 2000.0, 30000.0))),
            normalizer=float(d.get("normalizer", 70000.0)),
        )


def _features(ctrl, members, hres, doy, cfg: FeatureConfig) -> np.ndarray:
    # ctrl: (n,), members: (n, 50), hres: (n,) or None, doy: (n,)
    t1, t2, t3 = cfg.thresholds
    operational = np.concatenate([ctrl[:, None], members], axis=1)
    norm = operational / cfg.normalizer
    phase = 2 * np.pi * doy / 365
    cols = [
        norm[:, 0],
        norm[:, 1:].mean(axis=1),
        norm.var(axis=1, ddof=1),
        (operational <= t1).mean(axis=1),
        ((operational > t1) & (operational <= t2)).mean(axis=1),
        (operational > t3).mean(axis=1),
        np.sin(phase),
        np.cos(phase),
    ]
    if cfg.use_hres:
        cols.insert(0, hres / cfg.normalizer)
    x = np.column_stack(cols)
    values = x[:, : len(cfg.forecast_columns)]
    if np.any(values > 1) or np.any(values < 0):
        raise ValueError(f"normalized forecast values must lie in [0, 1] (normalizer {cfg.normalizer} m)")
    return x


def extract_features(case: ForecastCase, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Feature vector ``([hres], ctrl, ens_mean, ens_var, p1, p2, p3, sin, cos)``.

    Forecast values are divided by the normalizer. ``ens_var`` is the sample
    variance (ddof=1) of the 51 normalized operational values (control plus
    50 members); the exceedance fractions count the same 51 raw values
    (``<= t1``, ``(t1, t2]``, ``> t3``). HRES enters only as its own
    normalized component.
    """
    f = case.forecast
    if f.members is None:
        raise ValueError("case has no ensemble members")
    if cfg.use_hres and f.hres is None:
        raise ValueError("feature config requires HRES but the case has none")
    x = _features(
        np.array([f.ctrl]),
        np.array([f.members], dtype=float),
        np.array([f.hres]) if cfg.use_hres else None,
        np.array([case.day_of_year], dtype=float),
        cfg,
    )
    return x[0]


def feature_matrix(cases: Sequence[ForecastCase], cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Row-stacked :func:`extract_features` for many cases."""
    if not cases:
        return np.empty((0, cfg.dim))
    if any(c.forecast.members is None for c in cases):
        raise ValueError("every case needs ensemble members")
    if cfg.use_hres and any(c.forecast.hres is None for c in cases):
        raise ValueError("feature config requires HRES but some cases have none")
    return _features(
        np.array([c.forecast.ctrl for c in cases], dtype=float),
        np.array([c.forecast.members for c in cases], dtype=float),
        np.array([c.forecast.hres for c in cases], dtype=float) if cfg.use_hres else None,
        np.array([c.day_of_year for c in cases], dtype=float),
        cfg,
    )
