"""Event indicators and discrete-time shot-noise accumulation.

A product's self events are the days it sold at least one unit; its cross
events are the days any same-brand peer sold. The shot sum at day t weights
the previous days' events by an excitation kernel (a shifted negative-binomial
pmf over positive lags) and scales by the trigger constant kappa, truncated at
``truncation`` lags with no renormalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparsedemand.distributions import kernel_weights
from sparsedemand.panel import SalesPanel

# Smallest lag cap for which the kernel keeps >= 1 - 1e-6 of its mass over the
# prior-plausible grid mu in [1, 8], tau in [0.5, 80].
DEFAULT_TRUNCATION = 200


@dataclass(frozen=True)
class ShotParams:
    """Trigger constant and kernel parameters of one excitation channel."""

    kappa: float
    mu: float
    tau: float

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.mu < 1:
            raise ValueError("mu must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass
class HistoryState:
    """Per-product self- and cross-event indicator sequences on the panel grid."""

    products: list[str]
    brand_map: dict[str, str]
    self_events: np.ndarray
    cross_events: np.ndarray

    def events_for(self, product: str) -> np.ndarray:
        return self.self_events[self.products.index(product)]


def event_indicators(panel: SalesPanel) -> HistoryState:
    """Build self- and cross-event indicators from a dense panel.

    Cross events are computed on the shared calendar grid: a product alone in
    its brand has an all-zero cross sequence, and peers contribute wherever
    they have observed sales (days outside a peer's availability count as no
    sale).
    """
    e = (panel.units >= 1).astype(np.int8)
    cross = np.zeros_like(e)
    brand_of = [panel.brands[p] for p in panel.products]
    for brand in set(brand_of):
        members = [i for i, b in enumerate(brand_of) if b == brand]
        if len(members) < 2:
            continue
        total = e[members].sum(axis=0)
        for i in members:
            cross[i] = ((total - e[i]) >= 1).astype(np.int8)
    return HistoryState(
        products=list(panel.products),
        brand_map=dict(panel.brands),
        self_events=e,
        cross_events=cross,
    )


def shot_sum(events: np.ndarray, t: int, sp: ShotParams, truncation: int = DEFAULT_TRUNCATION) -> float:
    """Shot-noise value on day ``t`` (1-based) from a binary event sequence.

    Returns ``kappa * sum_{j=max(1, t-truncation)}^{t-1} E_j g(t-j | mu, tau)``;
    day 1, an empty window or ``kappa = 0`` give 0.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    if t == 1 or sp.kappa == 0.0:
        return 0.0
    events = np.asarray(events, dtype=float)
    lo = max(0, t - 1 - truncation)
    window = events[lo : t - 1][::-1]  # index d-1 holds E_{t-d}
    if window.size == 0 or not window.any():
        return 0.0
    w = kernel_weights(sp.mu, sp.tau, window.size)
    return float(sp.kappa * (window @ w))


def shot_sequence(
    events: np.ndarray,
    sp: ShotParams,
    truncation: int = DEFAULT_TRUNCATION,
    length: int | None = None,
) -> np.ndarray:
    """Vector of shot sums for days 1..length (defaults to ``len(events)``).

    Element ``t-1`` equals ``shot_sum(events, t, sp, truncation)``; the whole
    sequence costs one truncated convolution.
    """
    events = np.asarray(events, dtype=float)
    n = len(events) if length is None else int(length)
    if n < 1:
        return np.zeros(0)
    if sp.kappa == 0.0:
        return np.zeros(n)
    w = kernel_weights(sp.mu, sp.tau, truncation)
    conv = np.convolve(events[:n], w)
    out = np.zeros(n)
    out[1:] = sp.kappa * conv[: n - 1]
    return out
