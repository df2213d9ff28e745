"""Calendar and price covariates for the background intensities.

The zero process regresses on an intercept, log price and 18 seasonal
indicators (Christmas window, six weekdays, eleven months); the count process
regresses on an intercept and log price only. Sunday and December are the
default omitted baseline categories, and the Christmas window defaults to
December 1-26 inclusive; all three are configurable.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from sparsedemand.panel import SalesPanel

SEASONAL_DIM = 18
ZERO_DESIGN_DIM = 20  # intercept, log price, 18 seasonal flags
COUNT_DESIGN_DIM = 2  # intercept, log price

_WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")


class MissingPriceError(ValueError):
    def __init__(self, product: str, day: dt.date):
        self.product = product
        self.day = day
        super().__init__(f"missing or nonpositive price for product {product!r} on {day.isoformat()}")


@dataclass(frozen=True)
class SeasonalConfig:
    """Seasonal-indicator configuration.

    ``christmas_start``/``christmas_end`` are inclusive (month, day) pairs; a
    window with start after end wraps across the year boundary.
    ``weekday_baseline`` uses Monday=0 .. Sunday=6.
    """

    christmas_start: tuple[int, int] = (12, 1)
    christmas_end: tuple[int, int] = (12, 26)
    weekday_baseline: int = 6
    month_baseline: int = 12

    def __post_init__(self):
        if not 0 <= self.weekday_baseline <= 6:
            raise ValueError("weekday_baseline must be in 0..6 (Mon..Sun)")
        if not 1 <= self.month_baseline <= 12:
            raise ValueError("month_baseline must be in 1..12")

    def in_christmas_window(self, day: dt.date) -> bool:
        key = (day.month, day.day)
        if self.christmas_start <= self.christmas_end:
            return self.christmas_start <= key <= self.christmas_end
        return key >= self.christmas_start or key <= self.christmas_end

    @property
    def weekday_slots(self) -> tuple[int, ...]:
        return tuple(w for w in range(7) if w != self.weekday_baseline)

    @property
    def month_slots(self) -> tuple[int, ...]:
        return tuple(m for m in range(1, 13) if m != self.month_baseline)


@dataclass(frozen=True)
class DesignRow:
    """One day's covariates: natural-log price plus 18 binary seasonal flags."""

    log_price: float
    seasonal: np.ndarray = field(repr=False)

    def zero_vector(self) -> np.ndarray:
        """Length-20 zero-process design vector (intercept, log price, flags)."""
        return np.concatenate(([1.0, self.log_price], self.seasonal))

    def count_vector(self) -> np.ndarray:
        """Length-2 count-process design vector (intercept, log price)."""
        return np.array([1.0, self.log_price])


def seasonalize(day: dt.date, cfg: SeasonalConfig = SeasonalConfig()) -> np.ndarray:
    """18 binary flags for ``day``, ordered (Christmas, Mon..Sat, Jan..Nov).

    The weekday and month blocks list the non-baseline categories in calendar
    order, so the stated ordering holds for the default Sunday/December
    baselines. A baseline weekday or month leaves its whole block zero.
    """
    flags = np.zeros(SEASONAL_DIM)
    if cfg.in_christmas_window(day):
        flags[0] = 1.0
    wd = day.weekday()
    if wd != cfg.weekday_baseline:
        flags[1 + cfg.weekday_slots.index(wd)] = 1.0
    if day.month != cfg.month_baseline:
        flags[7 + cfg.month_slots.index(day.month)] = 1.0
    return flags


def design_row(price: float, day: dt.date, cfg: SeasonalConfig = SeasonalConfig()) -> DesignRow:
    if not np.isfinite(price) or price <= 0:
        raise ValueError(f"price must be strictly positive, got {price!r}")
    return DesignRow(log_price=float(np.log(price)), seasonal=seasonalize(day, cfg))


@dataclass
class PanelDesign:
    """Per-product design matrices over the panel's calendar grid.

    ``zero`` has shape (products, days, 20) and ``count`` (products, days, 2);
    rows outside a product's availability are zero-filled and masked by
    ``avail``.
    """

    dates: list[dt.date]
    zero: np.ndarray
    count: np.ndarray
    avail: np.ndarray

    def rows(self, product_index: int) -> list[DesignRow]:
        out = []
        for t in range(len(self.dates)):
            if self.avail[product_index, t]:
                out.append(
                    DesignRow(
                        log_price=float(self.zero[product_index, t, 1]),
                        seasonal=self.zero[product_index, t, 2:].copy(),
                    )
                )
        return out


def build_design(panel: "SalesPanel", cfg: SeasonalConfig = SeasonalConfig()) -> PanelDesign:
    """Assemble the zero- and count-process design matrices for a panel.

    The seasonal block is shared by all products on a given date; log price is
    per product. Raises :class:`MissingPriceError` if any available cell lacks
    a positive price.
    """
    n, t = panel.units.shape
    seasonal = np.stack([seasonalize(d, cfg) for d in panel.dates])
    x_zero = np.zeros((n, t, ZERO_DESIGN_DIM))
    x_count = np.zeros((n, t, COUNT_DESIGN_DIM))
    for i, product in enumerate(panel.products):
        av = panel.avail[i]
        prices = panel.prices[i]
        bad = av & (~np.isfinite(prices) | (prices <= 0))
        if np.any(bad):
            j = int(np.argmax(bad))
            raise MissingPriceError(product, panel.dates[j])
        with np.errstate(invalid="ignore", divide="ignore"):
            logp = np.where(av, np.log(np.where(av, prices, 1.0)), 0.0)
        x_zero[i, :, 0] = av
        x_zero[i, :, 1] = logp
        x_zero[i, :, 2:] = seasonal * av[:, None]
        x_count[i, :, 0] = av
        x_count[i, :, 1] = logp
    return PanelDesign(dates=list(panel.dates), zero=x_zero, count=x_count, avail=panel.avail.copy())
