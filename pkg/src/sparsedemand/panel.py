"""Sales-panel data structure, CSV ingestion and summary statistics.

The interchange format is a long CSV with exact header
``date,product_id,brand,units,price``. Rows may omit zero-sale days only when
a price row exists for that (product, date); a row with an empty units field
is such a price-only row. Within each product's availability range (first to
last date seen) the panel must be dense; products may enter and leave
circulation relative to the global calendar grid.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = ["date", "product_id", "brand", "units", "price"]


class PanelError(ValueError):
    """Ingestion failure; carries the offending CSV row number when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass
class SalesPanel:
    """Dense daily sales panel over a contiguous calendar grid.

    ``units`` is (products, days) with explicit zeros inside each product's
    availability window; ``prices`` is NaN and ``avail`` False outside it.
    """

    products: list[str]
    brands: dict[str, str]
    dates: list[dt.date]
    units: np.ndarray
    prices: np.ndarray
    avail: np.ndarray
    split_date: dt.date | None = field(default=None)

    @property
    def n_products(self) -> int:
        return len(self.products)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def date_index(self, day: dt.date) -> int:
        i = (day - self.dates[0]).days
        if i < 0 or i >= len(self.dates) or self.dates[i] != day:
            raise KeyError(f"{day.isoformat()} not in panel grid")
        return i

    def product_index(self, product: str) -> int:
        return self.products.index(product)

    def train_count(self, split_date: dt.date) -> int:
        """Number of grid days up to and including ``split_date``."""
        return self.date_index(split_date) + 1

    def slice_days(self, t0: int, t1: int) -> "SalesPanel":
        """Panel restricted to grid columns [t0, t1); products are kept as-is."""
        if not 0 <= t0 < t1 <= self.n_days:
            raise ValueError(f"bad slice [{t0}, {t1}) for {self.n_days} days")
        return SalesPanel(
            products=list(self.products),
            brands=dict(self.brands),
            dates=self.dates[t0:t1],
            units=self.units[:, t0:t1].copy(),
            prices=self.prices[:, t0:t1].copy(),
            avail=self.avail[:, t0:t1].copy(),
            split_date=self.split_date,
        )

    def validate(self) -> None:
        n, t = self.units.shape
        if len(self.products) != n or len(self.dates) != t:
            raise PanelError("inconsistent panel dimensions")
        for a, b in zip(self.dates, self.dates[1:]):
            if (b - a).days != 1:
                raise PanelError(f"date gap between {a} and {b}")
        if np.any(self.units < 0):
            raise PanelError("negative units in panel")
        if np.any(self.units[~self.avail] != 0):
            raise PanelError("nonzero units outside availability")
        bad_price = self.avail & (~np.isfinite(self.prices) | (self.prices <= 0))
        if np.any(bad_price):
            raise PanelError("missing or nonpositive price inside availability")
        for i in range(n):
            av = self.avail[i]
            if not av.any():
                raise PanelError(f"product {self.products[i]!r} has no observations")
            lo, hi = np.flatnonzero(av)[[0, -1]]
            if not av[lo : hi + 1].all():
                raise PanelError(f"availability gap for product {self.products[i]!r}")


def _parse_date(text: str, row: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise PanelError(f"malformed date {text!r}", row) from None


def ingest_csv(path) -> SalesPanel:
    """Read a long-format sales CSV into a dense :class:`SalesPanel`.

    Errors (malformed date, negative units, nonpositive price, duplicate
    (product, date), inconsistent brand, date gap, missing price inside a
    product's range) are reported with the offending CSV row number where one
    exists.
    """
    records: dict[tuple[str, dt.date], tuple[int, float, int]] = {}
    brands: dict[str, str] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError("empty file") from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise PanelError(f"expected header {','.join(CSV_HEADER)!r}, got {','.join(header)!r}")
        for rownum, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(CSV_HEADER):
                raise PanelError(f"expected {len(CSV_HEADER)} fields, got {len(rec)}", rownum)
            day = _parse_date(rec[0], rownum)
            product = rec[1].strip()
            brand = rec[2].strip()
            if not product:
                raise PanelError("empty product_id", rownum)
            units_text = rec[3].strip()
            if units_text == "":
                units = 0  # price-only row standing in for an omitted zero-sale day
            else:
                try:
                    units = int(units_text)
                except ValueError:
                    raise PanelError(f"malformed units {rec[3]!r}", rownum) from None
            if units < 0:
                raise PanelError(f"negative units {units}", rownum)
            try:
                price = float(rec[4])
            except ValueError:
                raise PanelError(f"malformed price {rec[4]!r}", rownum) from None
            if not np.isfinite(price) or price <= 0:
                raise PanelError(f"nonpositive price {rec[4]!r}", rownum)
            if product in brands and brands[product] != brand:
                raise PanelError(
                    f"product {product!r} listed under brands {brands[product]!r} and {brand!r}", rownum
                )
            if (product, day) in records:
                raise PanelError(f"duplicate (product, date) ({product!r}, {day.isoformat()})", rownum)
            if product not in brands:
                brands[product] = brand
                order.append(product)
            records[(product, day)] = (units, price, rownum)

    if not records:
        raise PanelError("no data rows")
    all_days = sorted({d for (_, d) in records})
    start, end = all_days[0], all_days[-1]
    grid = [start + dt.timedelta(days=k) for k in range((end - start).days + 1)]
    covered = set(all_days)
    for day in grid:
        if day not in covered:
            raise PanelError(f"date gap at {day.isoformat()}: no product has a row")

    n, t = len(order), len(grid)
    units = np.zeros((n, t), dtype=np.int64)
    prices = np.full((n, t), np.nan)
    avail = np.zeros((n, t), dtype=bool)
    index = {d: k for k, d in enumerate(grid)}
    for i, product in enumerate(order):
        days = sorted(d for (p, d) in records if p == product)
        lo, hi = index[days[0]], index[days[-1]]
        for k in range(lo, hi + 1):
            key = (product, grid[k])
            if key not in records:
                raise PanelError(
                    f"missing price for product {product!r} on {grid[k].isoformat()}"
                )
            u, price, _ = records[key]
            units[i, k] = u
            prices[i, k] = price
            avail[i, k] = True

    panel = SalesPanel(products=order, brands=brands, dates=grid, units=units, prices=prices, avail=avail)
    panel.validate()
    return panel


def emit_csv(panel: SalesPanel, path) -> None:
    """Write a panel back to the long CSV format with explicit zeros."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i, product in enumerate(panel.products):
            for k in np.flatnonzero(panel.avail[i]):
                writer.writerow(
                    [
                        panel.dates[k].isoformat(),
                        product,
                        panel.brands[product],
                        int(panel.units[i, k]),
                        format(panel.prices[i, k], ".17g"),
                    ]
                )


def summarize(panel: SalesPanel, split_date: dt.date) -> list[tuple[str, str, int, str]]:
    """Per-product training-window summary: brand, total sales, % non-zero days.

    The percentage is of the product's available training days, printed with
    two decimals.
    """
    cut = panel.date_index(split_date) + 1
    rows = []
    for i, product in enumerate(panel.products):
        av = panel.avail[i, :cut]
        total = int(panel.units[i, :cut][av].sum())
        days = int(av.sum())
        events = int((panel.units[i, :cut][av] >= 1).sum())
        pct = 100.0 * events / days if days else 0.0
        rows.append((product, panel.brands[product], total, f"{pct:.2f}"))
    return rows


def write_summary_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["product", "brand", "total_sales", "pct_nonzero_days"])
        writer.writerows(rows)
