"""Daily implied-volatility grids: ingestion, synthetic generation, windowing, storage.

Grids are 20x20 with rows on the moneyness axis (K/S from 0.9 to 1.1) and
columns on the maturity axis (0.05 to 1.0 years).
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CloughTocher2DInterpolator, NearestNDInterpolator
from scipy.spatial import QhullError

from .exceptions import ConfigError, IngestionError, SeriesParseError, UnsupportedVersionError

logger = logging.getLogger(__name__)

GRID_SIZE = 20
VOL_FLOOR, VOL_CAP = 0.01, 2.0
SERIES_FORMAT = "volsurf-grid-series"
SERIES_VERSION = 1
MIN_QUOTES = 16


@dataclass(frozen=True)
class GridAxes:
    moneyness: Tuple[float, ...]
    maturity: Tuple[float, ...]

    @classmethod
    def default(cls) -> "GridAxes":
        return cls(
            tuple(np.linspace(0.9, 1.1, GRID_SIZE).tolist()),
            tuple(np.linspace(0.05, 1.0, GRID_SIZE).tolist()),
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.moneyness), len(self.maturity)

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        """(moneyness, maturity) matrices, each of grid shape."""
        return np.meshgrid(np.asarray(self.moneyness), np.asarray(self.maturity), indexing="ij")


DEFAULT_AXES = GridAxes.default()


@dataclass(frozen=True)
class OptionQuote:
    date: dt.date
    strike: float
    maturity: float
    spot: float
    rate: float
    implied_vol: float

    def __post_init__(self):
        if not (self.strike > 0 and self.spot > 0):
            raise IngestionError(f"{self.date}: strike and spot must be positive")
        if not (0 < self.maturity <= 3.0):
            raise IngestionError(f"{self.date}: maturity {self.maturity} outside (0, 3]")
        if not (0.001 <= self.implied_vol <= 5.0):
            raise IngestionError(f"{self.date}: implied vol {self.implied_vol} outside [0.001, 5]")

    @property
    def moneyness(self) -> float:
        return self.strike / self.spot


@dataclass
class VolSurfaceGrid:
    date: dt.date
    values: np.ndarray
    spot: float
    rate: float
    axes: GridAxes = DEFAULT_AXES

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.axes.shape:
            raise IngestionError(
                f"{self.date}: grid shape {self.values.shape} != axes shape {self.axes.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise IngestionError(f"{self.date}: grid contains non-finite values")

    def market_arrays(self) -> np.ndarray:
        """``(4, M, T)`` stack of [tau; spot; rate; strike] matrices for this day."""
        m, tau = self.axes.mesh()
        spot = np.full_like(m, self.spot)
        return np.stack([tau, spot, np.full_like(m, self.rate), m * self.spot])

    def __eq__(self, other):
        if not isinstance(other, VolSurfaceGrid):
            return NotImplemented
        return (
            self.date == other.date
            and self.spot == other.spot
            and self.rate == other.rate
            and self.axes == other.axes
            and np.array_equal(self.values, other.values)
        )


@dataclass
class WindowedSample:
    inputs: List[VolSurfaceGrid]
    target: VolSurfaceGrid

    @property
    def market(self) -> np.ndarray:
        return self.target.market_arrays()


DateRange = Tuple[dt.date, dt.date]


@dataclass(frozen=True)
class DatasetSplit:
    """Inclusive date ranges, ordered train < validation < test."""

    train: DateRange
    validation: DateRange
    test: DateRange

    def __post_init__(self):
        ranges = [self.train, self.validation, self.test]
        for start, end in ranges:
            if start > end:
                raise ConfigError(f"date range starts after it ends: {start} > {end}")
        for (_, prev_end), (next_start, _) in zip(ranges, ranges[1:]):
            if not prev_end < next_start:
                raise ConfigError("split ranges must be disjoint and ordered train < validation < test")


@dataclass
class WindowedDataset:
    train: List[WindowedSample]
    validation: List[WindowedSample]
    test: List[WindowedSample]
    warnings: List[str] = field(default_factory=list)


def parse_date(value) -> dt.date:
    if isinstance(value, dt.date):
        return value
    text = str(value).strip().replace("/", "-")
    y, m, d = (int(p) for p in text.split("-"))
    return dt.date(y, m, d)


def split_with_validation(
    dates: Sequence[dt.date],
    train: DateRange,
    test: DateRange,
    validation_fraction: float = 0.2,
) -> DatasetSplit:
    """Carve the latest ``validation_fraction`` of the training dates into a validation range."""
    train = (parse_date(train[0]), parse_date(train[1]))
    test = (parse_date(test[0]), parse_date(test[1]))
    in_train = sorted(d for d in dates if train[0] <= d <= train[1])
    if len(in_train) < 2:
        raise ConfigError(f"training range {train} contains fewer than 2 series dates")
    n_val = max(1, int(round(validation_fraction * len(in_train))))
    if n_val >= len(in_train):
        raise ConfigError("validation carve-out would consume the whole training range")
    val_start = in_train[-n_val]
    return DatasetSplit(
        train=(train[0], in_train[-n_val - 1]),
        validation=(val_start, train[1]),
        test=test,
    )


def interpolate_surface(
    quotes: Sequence[OptionQuote], axes: GridAxes = DEFAULT_AXES
) -> VolSurfaceGrid:
    """Grid one day's quotes with Clough-Tocher cubic interpolation in (moneyness, maturity).

    Knots outside the quotes' convex hull take the nearest quote's value; the
    result is clamped to [0.01, 2.0]. Spot and rate are the day's medians.
    """
    if not quotes:
        raise IngestionError("no quotes supplied")
    date = quotes[0].date
    if any(q.date != date for q in quotes):
        raise IngestionError(f"{date}: quotes span more than one date")
    if len(quotes) < MIN_QUOTES:
        raise IngestionError(f"{date}: {len(quotes)} quotes, need at least {MIN_QUOTES}")

    pts = np.array([[q.moneyness, q.maturity] for q in quotes])
    vals = np.array([q.implied_vol for q in quotes])
    m, tau = axes.mesh()
    try:
        cubic = CloughTocher2DInterpolator(pts, vals, tol=1e-14, maxiter=2000)
        grid = cubic(m, tau)
    except (QhullError, ValueError) as exc:
        raise IngestionError(f"{date}: degenerate quote geometry ({exc})") from exc
    outside = np.isnan(grid)
    if outside.any():
        grid[outside] = NearestNDInterpolator(pts, vals)(m[outside], tau[outside])
    grid = np.clip(grid, VOL_FLOOR, VOL_CAP)
    spot = float(np.median([q.spot for q in quotes]))
    rate = float(np.median([q.rate for q in quotes]))
    return VolSurfaceGrid(date, grid, spot, rate, axes)


def read_quotes(path) -> List[OptionQuote]:
    """Read ``date,strike,maturity_years,spot,rate,implied_vol`` rows (header optional)."""
    quotes = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() == "date":
                continue
            if len(row) != 6:
                raise SeriesParseError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            try:
                quotes.append(
                    OptionQuote(parse_date(row[0]), *(float(v) for v in row[1:]))
                )
            except (ValueError, TypeError) as exc:
                raise SeriesParseError(f"{path}:{lineno}: {exc}") from exc
    return quotes


def ingest_quotes(quotes: Iterable[OptionQuote], axes: GridAxes = DEFAULT_AXES) -> List[VolSurfaceGrid]:
    by_day = defaultdict(list)
    for q in quotes:
        by_day[q.date].append(q)
    return [interpolate_surface(by_day[d], axes) for d in sorted(by_day)]


def build_dataset(
    series: Sequence[VolSurfaceGrid], split: DatasetSplit, window: int = 10
) -> WindowedDataset:
    """Slide ``window``-day inputs with a next-day target inside each split range."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    dates = [g.date for g in series]
    if any(a >= b for a, b in zip(dates, dates[1:])):
        raise IngestionError("series must be sorted by date without duplicates")

    out = WindowedDataset([], [], [])
    for name in ("train", "validation", "test"):
        start, end = getattr(split, name)
        part = [g for g in series if start <= g.date <= end]
        if len(part) < window + 1:
            msg = f"{name} split {start}..{end} has {len(part)} days, needs {window + 1}"
            logger.warning(msg)
            out.warnings.append(msg)
            continue
        samples = [
            WindowedSample(part[i : i + window], part[i + window])
            for i in range(len(part) - window)
        ]
        setattr(out, name, samples)
    return out


def samples_to_arrays(
    samples: Sequence[WindowedSample],
    augmented: bool = False,
    spot_ref: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into model arrays.

    Returns ``X`` of shape (N, n, C, M, T) with C=1, or C=5 ([tau; sigma; S'; r; K'])
    when ``augmented``; ``y`` of shape (N, M, T); ``market`` of shape (N, 4, M, T).
    ``spot_ref`` normalises S and K in augmented mode.
    """
    if not samples:
        raise ConfigError("no samples to stack")
    if augmented and spot_ref is None:
        raise ConfigError("augmented inputs need a reference spot")
    X, y, market = [], [], []
    for s in samples:
        frames = []
        for g in s.inputs:
            if augmented:
                tau, spot, rate, strike = g.market_arrays()
                frames.append(np.stack([tau, g.values, spot / spot_ref, rate, strike / spot_ref]))
            else:
                frames.append(g.values[None])
        X.append(np.stack(frames))
        y.append(s.target.values)
        market.append(s.market)
    return np.stack(X), np.stack(y), np.stack(market)


# --- synthetic generator -----------------------------------------------------------


@dataclass(frozen=True)
class Shock:
    """Additive vol-level offset for ``length`` days starting at day index ``start``."""

    start: int
    length: int
    size: float


@dataclass(frozen=True)
class SyntheticConfig:
    days: int = 500
    start_date: dt.date = dt.date(2004, 1, 5)
    base_level: float = 0.2
    curvature: float = 0.8
    term_slope: float = 0.03
    mean_reversion: float = 0.1
    vol_of_vol: float = 0.005
    curvature_drift: float = 0.0
    slope_drift: float = 0.0
    obs_noise: float = 0.0
    shocks: Tuple[Shock, ...] = ()
    spot0: float = 100.0
    rate: float = 0.02
    axes: GridAxes = DEFAULT_AXES

    def validate(self) -> None:
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        if not (0.0 < self.mean_reversion <= 1.0):
            raise ConfigError("mean_reversion must lie in (0, 1]")
        if not (VOL_FLOOR <= self.base_level <= VOL_CAP):
            raise ConfigError(f"base_level must lie in [{VOL_FLOOR}, {VOL_CAP}]")
        if min(self.vol_of_vol, self.obs_noise) < 0:
            raise ConfigError("noise scales must be nonnegative")
        if self.spot0 <= 0:
            raise ConfigError("spot0 must be positive")
        for s in self.shocks:
            if s.start < 0 or s.length < 1:
                raise ConfigError(f"bad shock {s}")


def business_days(start: dt.date, count: int) -> List[dt.date]:
    days = []
    d = start
    while len(days) < count:
        if d.weekday() < 5:
            days.append(d)
        d += dt.timedelta(days=1)
    return days


def synthetic_levels(config: SyntheticConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Mean-reverting level path plus the regime-shock offsets, each of length ``days``."""
    x = np.empty(config.days)
    x[0] = config.base_level
    eps = rng.standard_normal(config.days)
    for t in range(1, config.days):
        x[t] = x[t - 1] + config.mean_reversion * (config.base_level - x[t - 1]) + config.vol_of_vol * eps[t]
    shock = np.zeros(config.days)
    for s in config.shocks:
        shock[s.start : s.start + s.length] += s.size
    return x, shock


def synthetic_series(config: SyntheticConfig = SyntheticConfig(), seed: int = 0) -> List[VolSurfaceGrid]:
    """Generate a deterministic series of parametric smiles.

    Each day is ``level_t + curvature_t (m - 1)^2 + slope_t tau`` plus optional
    per-cell observation noise; spot follows a lognormal step driven by level_t.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    x, shock = synthetic_levels(config, rng)
    level = x + shock
    t = np.arange(config.days)
    curvature = config.curvature + config.curvature_drift * t
    slope = config.term_slope + config.slope_drift * t
    m, tau = config.axes.mesh()
    smile = (m - 1.0) ** 2

    z = rng.standard_normal(config.days)
    noise = rng.standard_normal((config.days,) + config.axes.shape)
    dt_year = 1.0 / 252.0
    spot = config.spot0
    series = []
    for i, date in enumerate(business_days(config.start_date, config.days)):
        values = level[i] + curvature[i] * smile + slope[i] * tau
        if config.obs_noise > 0:
            values = values + config.obs_noise * noise[i]
        if values.min() < VOL_FLOOR or values.max() > VOL_CAP or not np.isfinite(values).all():
            raise ConfigError(
                f"synthetic config produces vol {values.min():.4g}..{values.max():.4g} on day {i}, "
                f"outside [{VOL_FLOOR}, {VOL_CAP}]"
            )
        series.append(VolSurfaceGrid(date, values, spot, config.rate, config.axes))
        sig = max(level[i], VOL_FLOOR)
        spot = spot * math.exp((config.rate - 0.5 * sig * sig) * dt_year + sig * math.sqrt(dt_year) * z[i])
    return series


# --- storage -----------------------------------------------------------------------


def save_series(path, series: Sequence[VolSurfaceGrid]) -> None:
    """Write a versioned line-oriented JSON file: one header line, then one line per day."""
    if not series:
        raise ConfigError("cannot save an empty series")
    axes = series[0].axes
    if any(g.axes != axes for g in series):
        raise ConfigError("all grids in a series must share axes")
    header = {
        "format": SERIES_FORMAT,
        "version": SERIES_VERSION,
        "moneyness": list(axes.moneyness),
        "maturity": list(axes.maturity),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for g in series:
            rec = {
                "date": g.date.isoformat(),
                "spot": g.spot,
                "rate": g.rate,
                "values": g.values.reshape(-1).tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_series(path) -> List[VolSurfaceGrid]:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SeriesParseError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SeriesParseError(f"{path}:1: header is not valid JSON ({exc})") from exc
    if header.get("format") != SERIES_FORMAT:
        raise SeriesParseError(f"{path}:1: not a {SERIES_FORMAT} file")
    if header.get("version") != SERIES_VERSION:
        raise UnsupportedVersionError(
            f"{path}:1: unsupported series version {header.get('version')!r} (expected {SERIES_VERSION})"
        )
    axes = GridAxes(tuple(header["moneyness"]), tuple(header["maturity"]))
    n_cells = axes.shape[0] * axes.shape[1]
    series = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            date = parse_date(rec["date"])
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise SeriesParseError(f"{path}:{lineno}: malformed day record ({exc})") from exc
        values = rec.get("values")
        if not isinstance(values, list) or len(values) != n_cells:
            got = len(values) if isinstance(values, list) else "no"
            raise SeriesParseError(f"{path}:{lineno}: day {date} has {got} values, expected {n_cells}")
        try:
            grid = VolSurfaceGrid(
                date,
                np.array(values, dtype=np.float64).reshape(axes.shape),
                float(rec["spot"]),
                float(rec["rate"]),
                axes,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SeriesParseError(f"{path}:{lineno}: day {date}: {exc}") from exc
        series.append(grid)
    return series
