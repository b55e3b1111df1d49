"""Product t-norm connectives over truth values in [0, 1]."""

import numpy as np


def t_and(a, b):
    return a * b


def t_or(a, b):
    return a + b - a * b


def t_not(a):
    return 1.0 - a


def t_implies(a, b):
    """``a -> b`` read as ``not a or b``, i.e. ``a*b - a + 1``."""
    return t_or(t_not(a), b)


def truncate(x):
    """Clamp into [0, 1]; works on scalars and arrays."""
    if np.ndim(x) == 0:
        return min(max(float(x), 0.0), 1.0)
    return np.clip(x, 0.0, 1.0)


def logistic(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))
