"""WMO visibility reporting scale.

Reported values run from 0 to 5000 m in 100 m steps, 6 to 30 km in 1 km
steps and 35 to 70 km in 5 km steps, 84 values in total. Class indices are
1-based throughout the public API.
"""

from __future__ import annotations

import numpy as np

N_CLASSES = 84

_VALUES = np.concatenate(
    [
        np.arange(0, 5001, 100),
        np.arange(6000, 30001, 1000),
        np.arange(35000, 70001, 5000),
    ]
).astype(float)
_VALUES.setflags(write=False)
_INDEX = {int(v): k + 1 for k, v in enumerate(_VALUES)}

MAX_VISIBILITY = float(_VALUES[-1])


def scale_values() -> np.ndarray:
    """Return the 84 reportable visibility values in meters (read-only)."""
    return _VALUES


def value_of(k: int) -> float:
    """Visibility in meters of class ``k`` (1..84)."""
    if not 1 <= int(k) <= N_CLASSES or int(k) != k:
        raise IndexError(f"class index {k!r} outside 1..{N_CLASSES}")
    return float(_VALUES[int(k) - 1])


def class_of(y: float) -> int:
    """Class index of an exact scale value."""
    if float(y) != int(y) or int(y) not in _INDEX:
        raise ValueError(f"{y!r} m is not a reportable visibility value")
    return _INDEX[int(y)]


def round_down(v):
    """Map visibility in meters to the class of the largest scale value <= v.

    Accepts a scalar or an array. Values above 70 km fall in the top class.

    Examples
    --------
    >>> round_down(5500) == class_of(5000)
    True
    >>> round_down(32000) == class_of(30000)
    True
    """
    arr = np.asarray(v, dtype=float)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise ValueError("visibility must be a non-negative number of meters")
    k = np.searchsorted(_VALUES, arr, side="right")
    if arr.ndim == 0:
        return int(k)
    return k.astype(np.int64)
