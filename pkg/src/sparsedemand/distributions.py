"""Shifted negative-binomial distribution and link helpers.

The count emission and the excitation kernel share one distribution: a
negative binomial translated onto the positive integers ``{1, 2, ...}``,
parameterized by its mean (``> 1``, with the boundary value 1 permitted as a
point mass at 1) and a real-valued shape. Everything is computed in log space;
the generalized binomial coefficient is evaluated through log-gamma so the
shape may be any positive real.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln


def _validate_domain(y: np.ndarray, mean: np.ndarray, shape: np.ndarray) -> None:
    if np.any(y < 1) or np.any(y != np.floor(y)):
        raise ValueError("y must be a positive integer (y >= 1)")
    if np.any(mean < 1):
        raise ValueError("mean must be >= 1")
    if np.any(shape <= 0):
        raise ValueError("shape must be > 0")


def shifted_nb_logpmf(y, mean, shape):
    """Log pmf of the shifted negative binomial at integer ``y >= 1``.

    Parameters
    ----------
    y : int or array_like
        Support point(s), integers >= 1.
    mean : float or array_like
        Distribution mean, >= 1. At exactly 1 the distribution degenerates to
        a point mass at 1.
    shape : float or array_like
        Positive real dispersion/shape.

    Returns
    -------
    float or ndarray
        ``log f(y | mean, shape)``. Broadcasts over its arguments.
    """
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    shape = np.asarray(shape, dtype=float)
    _validate_domain(y, mean, shape)

    # Guard the mean = 1 boundary so the general formula never sees log(0).
    degenerate = mean == 1.0
    safe_mean = np.where(degenerate, 2.0, mean)
    log_q = np.log(safe_mean - 1.0) - np.log(safe_mean - 1.0 + shape)
    log_p = np.log(shape) - np.log(safe_mean - 1.0 + shape)
    out = (
        gammaln(y - 1.0 + shape)
        - gammaln(y)
        - gammaln(shape)
        + (y - 1.0) * log_q
        + shape * log_p
    )
    out = np.where(degenerate, np.where(y == 1.0, 0.0, -np.inf), out)
    if out.ndim == 0:
        return float(out)
    return out


def shifted_nb_sample(mean, shape, rng: np.random.Generator, size=None):
    """Draw from the shifted negative binomial.

    Implemented as ``1 +`` a standard negative-binomial draw with matching
    parameters (number of failures before ``shape`` successes at success
    probability ``shape / (mean - 1 + shape)``). ``mean = 1`` always yields 1.
    """
    mean = np.asarray(mean, dtype=float)
    shape = np.asarray(shape, dtype=float)
    _validate_domain(np.asarray(1.0), mean, shape)

    safe_mean = np.where(mean == 1.0, 2.0, mean)
    p = shape / (safe_mean - 1.0 + shape)
    draw = 1 + rng.negative_binomial(shape, p, size=size)
    draw = np.where(mean == 1.0, 1, draw)
    if np.ndim(draw) == 0 and size is None:
        return int(draw)
    return draw


def kernel_weights(mu, tau, lags: int) -> np.ndarray:
    """Excitation-kernel pmf values ``g(d | mu, tau)`` for lags ``d = 1..lags``.

    ``mu`` and ``tau`` may be scalars or arrays; the lag axis is appended
    last, so the result has shape ``np.broadcast(mu, tau).shape + (lags,)``.
    """
    if lags < 1:
        raise ValueError("lags must be >= 1")
    mu = np.asarray(mu, dtype=float)
    tau = np.asarray(tau, dtype=float)
    d = np.arange(1, lags + 1, dtype=float)
    out = np.exp(shifted_nb_logpmf(d, mu[..., None], tau[..., None]))
    return np.asarray(out)


def inverse_logit(x):
    """Numerically stable logistic function ``1 / (1 + exp(-x))``."""
    out = expit(np.asarray(x, dtype=float))
    if np.ndim(out) == 0:
        return float(out)
    return out
