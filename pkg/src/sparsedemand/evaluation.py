"""Sequential one-step-ahead posterior prediction and lppd scoring.

Predictions are filtered, never rolled out: the probability (or count mean)
for day t is computed from the realized event history through day t-1, and the
observed outcome is ingested before moving to day t+1. Because the histories
are observed rather than simulated, the per-draw predictions over a window can
be evaluated in one vectorized pass per draw block.

lppd sums, per product, the log of the draw-averaged predictive density of
each observed outcome; zero and count processes are scored separately, the
count process only on sale days. All draw averages run through log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import nbinom

from sparsedemand.distributions import kernel_weights, shifted_nb_logpmf
from sparsedemand.inference import PosteriorDraws
from sparsedemand.model import (
    ModelData,
    VariantMismatchError,
    param_layout,
    split_vector,
    variant_structure,
)

_DRAW_CHUNK = 512


def _lag_windows(events: np.ndarray, t0: int, width: int, lags: int) -> np.ndarray:
    """(products, width, lags) event windows; entry d-1 holds the event at lag d."""
    n, t = events.shape
    padded = np.concatenate([np.zeros((n, lags)), events], axis=1)
    view = np.lib.stride_tricks.sliding_window_view(padded, lags, axis=1)
    return view[:, t0 : t0 + width, ::-1]


def _draw_matrix(draws, names: tuple[str, ...]) -> np.ndarray:
    if isinstance(draws, PosteriorDraws):
        if tuple(draws.names) != tuple(names):
            raise VariantMismatchError(
                "posterior draws do not match the requested variant/panel "
                f"(expected {len(names)} parameters, found {len(draws.names)})"
            )
        return draws.flat()
    flat = np.atleast_2d(np.asarray(draws, dtype=float))
    if flat.shape[1] != len(names):
        raise VariantMismatchError("draw matrix width does not match the variant layout")
    return flat


def sequential_predict(
    data: ModelData,
    process: str,
    variant: str,
    draws,
    window: tuple[int, int],
) -> np.ndarray:
    """Per-draw one-step-ahead predictions over ``window`` (half-open day indexes).

    For the zero process the result holds event probabilities ``p_its``; for
    the count process, count means ``lambda_its``. Shape is
    (draws, products, window days). ``data`` must be built on the full panel
    so the realized history through each day t-1 is observable.
    """
    st = variant_structure(process, variant)
    layout = param_layout(st, data.panel.products)
    flat = _draw_matrix(draws, layout.names)
    t0, t1 = window
    if not 0 <= t0 < t1 <= data.panel.n_days:
        raise ValueError(f"window {window} outside panel days [0, {data.panel.n_days}]")
    width = t1 - t0
    blocks = split_vector(layout, flat)
    n_draws = flat.shape[0]
    x = data.design_matrix(st)[:, t0:t1, :]

    out = np.empty((n_draws, data.panel.n_products, width))
    events = data.histories.self_events.astype(float)
    cross = data.histories.cross_events.astype(float)
    lag_self = (
        _lag_windows(events, t0, width, data.truncation) if st.self_excitation else None
    )
    lag_cross = (
        _lag_windows(cross, t0, width, data.truncation) if st.cross_excitation else None
    )

    for lo in range(0, n_draws, _DRAW_CHUNK):
        hi = min(lo + _DRAW_CHUNK, n_draws)
        theta = blocks["theta"][lo:hi]
        link = np.einsum("ntk,snk->snt", x, theta)
        if st.self_excitation:
            sp = blocks["shot_self"][lo:hi]
            w = kernel_weights(sp[:, :, 1], sp[:, :, 2], data.truncation)
            link += sp[:, :, 0][:, :, None] * np.einsum("ntd,snd->snt", lag_self, w)
        if st.cross_excitation:
            sp = blocks["shot_cross"][lo:hi]
            w = kernel_weights(sp[:, :, 1], sp[:, :, 2], data.truncation)
            link += sp[:, :, 0][:, :, None] * np.einsum("ntd,snd->snt", lag_cross, w)
        if process == "zero":
            out[lo:hi] = expit(link)
        elif data.count_mean_map == "shifted":
            out[lo:hi] = 1.0 + np.exp(link)
        else:
            out[lo:hi] = np.maximum(np.exp(link), 1.0 + 1e-9)
    return out


def lppd_zero(p_its: np.ndarray, events: np.ndarray, avail: np.ndarray | None = None) -> np.ndarray:
    """Per-product zero-process lppd over the window.

    ``p_its`` is (draws, products, days); ``events`` the observed indicators
    (products, days). Unavailable days (mask False) are skipped.
    """
    p = np.asarray(p_its, dtype=float)
    e = np.asarray(events, dtype=float)
    with np.errstate(divide="ignore"):
        terms = e[None] * np.log(p) + (1.0 - e[None]) * np.log1p(-p)
    daily = logsumexp(terms, axis=0) - np.log(p.shape[0])
    if avail is not None:
        daily = np.where(avail, daily, 0.0)
    return daily.sum(axis=1)


def lppd_count(
    lam_its: np.ndarray, y: np.ndarray, phi: float, avail: np.ndarray | None = None
) -> np.ndarray:
    """Per-product count-process lppd, scored on sale days only.

    Products with no sales in the window score 0 (empty sum).
    """
    lam = np.asarray(lam_its, dtype=float)
    y = np.asarray(y)
    mask = y >= 1
    if avail is not None:
        mask = mask & avail
    ysafe = np.where(mask, y, 1)[None, :, :]
    terms = shifted_nb_logpmf(ysafe, lam, phi)
    daily = logsumexp(terms, axis=0) - np.log(lam.shape[0])
    return np.where(mask, daily, 0.0).sum(axis=1)


def _hurdle_mixture_cdf(k: np.ndarray, p_its: np.ndarray, lam_its: np.ndarray, phi: float) -> np.ndarray:
    """Draw-averaged hurdle CDF ``P(Y <= k)`` per (product, day); k is (products, days)."""
    s = p_its.shape[0]
    acc = np.zeros(k.shape)
    for lo in range(0, s, _DRAW_CHUNK):
        hi = min(lo + _DRAW_CHUNK, s)
        p = p_its[lo:hi]
        lam = lam_its[lo:hi]
        pnb = phi / (lam - 1.0 + phi)
        acc += np.sum((1.0 - p) + p * nbinom.cdf(k[None] - 1, phi, pnb), axis=0)
    return acc / s


def combined_forecast(
    p_its: np.ndarray,
    lam_its: np.ndarray,
    phi: float = 1.0,
    levels: tuple[float, float] = (0.025, 0.975),
) -> tuple[np.ndarray, np.ndarray]:
    """Central predictive interval of the one-step hurdle outcome per day.

    The zero- and count-process draws are paired index-by-index; the interval
    endpoints are exact quantiles of the draw-averaged hurdle pmf (the lower/
    upper ``levels`` quantiles), computed from the negative-binomial CDF.
    Returns integer arrays (lo, hi) of shape (products, days).
    """
    p_its = np.asarray(p_its, dtype=float)
    lam_its = np.asarray(lam_its, dtype=float)
    if p_its.shape != lam_its.shape:
        raise ValueError("zero and count draws must align draw-for-draw")

    def quantile(q: float) -> np.ndarray:
        shape = p_its.shape[1:]
        lo = np.zeros(shape, dtype=np.int64)
        cdf_lo = _hurdle_mixture_cdf(lo, p_its, lam_its, phi)
        done = cdf_lo >= q
        hi = np.ones(shape, dtype=np.int64)
        for _ in range(64):
            if done.all():
                return lo
            cdf_hi = _hurdle_mixture_cdf(np.where(done, lo, hi), p_its, lam_its, phi)
            still = ~done & (cdf_hi < q)
            if not still.any():
                break
            hi = np.where(still, hi * 2, hi)
        # binary search on the open cells
        lo_b = np.where(done, lo, 0)
        hi_b = np.where(done, lo, hi)
        while np.any(lo_b < hi_b):
            mid = (lo_b + hi_b) // 2
            cdf_mid = _hurdle_mixture_cdf(mid, p_its, lam_its, phi)
            lo_b = np.where(cdf_mid < q, mid + 1, lo_b)
            hi_b = np.where(cdf_mid < q, hi_b, mid)
        return hi_b

    return quantile(levels[0]), quantile(levels[1])


@dataclass
class TraceSummary:
    """Posterior mean and central 95% band of a latent per-day quantity."""

    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def from_draws(cls, values: np.ndarray) -> "TraceSummary":
        return cls(
            mean=values.mean(axis=0),
            lower=np.quantile(values, 0.025, axis=0),
            upper=np.quantile(values, 0.975, axis=0),
        )


@dataclass
class EvalReport:
    """Per-product lppd scores per model label, plus per-day traces.

    ``zero_scores[label][window]`` and ``count_scores[label][window]`` hold
    per-product arrays for window "test" or "train"; totals are their sums.
    """

    products: list[str]
    zero_scores: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    count_scores: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    traces: dict[str, TraceSummary] = field(default_factory=dict)
    intervals: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def add_scores(self, process: str, label: str, window: str, scores: np.ndarray) -> None:
        table = self.zero_scores if process == "zero" else self.count_scores
        table.setdefault(label, {})[window] = np.asarray(scores, dtype=float)

    def total(self, process: str, label: str, window: str) -> float:
        table = self.zero_scores if process == "zero" else self.count_scores
        return float(table[label][window].sum())

    def write_lppd_csv(self, process: str, path) -> None:
        """Table-shaped CSV: product rows, one column per model, totals last."""
        import csv

        table = self.zero_scores if process == "zero" else self.count_scores
        labels = list(table)
        windows = ["test", "train"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["product", *(f"lppd_{label}_test" for label in labels)])
            for i, product in enumerate(self.products):
                writer.writerow(
                    [product]
                    + [
                        format(table[label]["test"][i], ".6f") if "test" in table[label] else ""
                        for label in labels
                    ]
                )
            for window in windows:
                if any(window in table[label] for label in labels):
                    writer.writerow(
                        [f"total_{window}"]
                        + [
                            format(table[label][window].sum(), ".6f")
                            if window in table[label]
                            else ""
                            for label in labels
                        ]
                    )
