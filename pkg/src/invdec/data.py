"""CSV loading, normalization, chronological splits, windowing, and the
coupled synthetic generator used by the planted-signal experiments."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class CsvFormatError(ValueError):
    """Malformed or non-numeric CSV content."""


@dataclass
class RawSeries:
    """A multivariate series: values[t, c] with one name per variable."""

    values: Tensor  # (T, C)
    names: list[str]
    freq_label: str | None = None

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"series values must be 2-d (T, C), got {self.values.shape}")
        if len(self.names) != self.values.shape[1]:
            raise ValueError(
                f"{len(self.names)} names for {self.values.shape[1]} columns"
            )

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    """Per-variable train-segment mean and (floored) population std."""

    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)
    names: list[str]


@dataclass
class WindowSample:
    x: Tensor  # (L, C)
    y: Tensor  # (H, C)
    start: int = 0


@dataclass
class SplitSpec:
    train: float = 0.70
    val: float = 0.10
    test: float = 0.20

    def __post_init__(self):
        for name in ("train", "val", "test"):
            if getattr(self, name) < 0:
                raise ValueError(f"split fraction {name} must be non-negative")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError(
                f"split fractions must sum to 1, got {self.train}+{self.val}+{self.test}"
            )


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, first_column: str = "auto") -> RawSeries:
    """Read a header-plus-rows CSV into a RawSeries.

    first_column:
        "auto": drop the first column (with a log notice) when its first
        data cell does not parse as a number, i.e. it looks like a timestamp.
        "drop": always drop the first column.
        "data": keep every column; all cells must be numeric.

    Missing or non-finite cells are rejected with the offending positions.
    """
    if first_column not in ("auto", "drop", "data"):
        raise ValueError(f"first_column must be auto|drop|data, got {first_column!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")

    drop_first = first_column == "drop"
    if first_column == "auto" and header:
        try:
            float(rows[0][0])
        except (ValueError, IndexError):
            drop_first = True
            log.warning(
                "%s: first column %r is not numeric; treating it as a timestamp and dropping it",
                path,
                header[0],
            )
    col0 = 1 if drop_first else 0
    names = [h.strip() for h in header[col0:]]
    width = len(header)

    out = np.empty((len(rows), len(names)), dtype=np.float64)
    bad_cells: list[str] = []
    for i, row in enumerate(rows):
        if len(row) != width:
            raise CsvFormatError(
                f"{path}: data row {i + 1} has {len(row)} fields, header has {width}"
            )
        for j, token in enumerate(row[col0:]):
            try:
                v = float(token)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                bad_cells.append(f"(row {i + 1}, column {names[j]!r})")
                v = math.nan
            out[i, j] = v
    if bad_cells:
        shown = ", ".join(bad_cells[:10])
        more = f" and {len(bad_cells) - 10} more" if len(bad_cells) > 10 else ""
        raise CsvFormatError(f"{path}: missing or non-numeric cells: {shown}{more}")
    return RawSeries(Tensor(out), names)


def write_csv(path, series: RawSeries) -> None:
    """Write a RawSeries back out; %.17g keeps float64 round trips exact."""
    vals = series.values.data
    with open(path, "w", newline="") as fh:
        fh.write(",".join(series.names) + "\n")
        for row in vals:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


# ---------------------------------------------------------------------------
# normalization and splitting


def _train_len(n_steps: int, split: SplitSpec) -> int:
    return int(math.floor(n_steps * split.train))


def fit_norm(series: RawSeries, split: SplitSpec = SplitSpec()) -> NormStats:
    """Mean/std per variable over the train segment only (no leakage)."""
    n_train = _train_len(series.n_steps, split)
    if n_train < 1:
        raise ValueError(f"train segment is empty for T={series.n_steps}")
    seg = series.values.data[:n_train]
    mean = seg.mean(axis=0)
    std = np.maximum(seg.std(axis=0), STD_FLOOR)
    return NormStats(mean=mean, std=std, names=list(series.names))


def apply_norm(series: RawSeries, stats: NormStats) -> RawSeries:
    vals = (series.values.data - stats.mean) / stats.std
    return RawSeries(Tensor(vals), list(series.names), series.freq_label)


def invert_norm(values, stats: NormStats) -> np.ndarray:
    """Map normalized values (.., C) back to the original units."""
    arr = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    return arr * stats.std + stats.mean


def chronological_split(
    series: RawSeries, split: SplitSpec = SplitSpec(), min_len: int | None = None
) -> tuple[RawSeries, RawSeries, RawSeries]:
    """Contiguous train/val/test segments; rounding remainder goes to test.

    min_len (typically lookback + horizon) lets the caller fail early with
    the name of the segment that cannot hold a single window.
    """
    T = series.n_steps
    n_train = _train_len(T, split)
    n_val = int(math.floor(T * split.val))
    bounds = {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, T),
    }
    parts = []
    for name, (lo, hi) in bounds.items():
        if min_len is not None and hi - lo < min_len:
            raise ValueError(
                f"{name} segment has {hi - lo} steps, shorter than the "
                f"{min_len} needed for one window"
            )
        parts.append(RawSeries(Tensor(series.values.data[lo:hi].copy()), list(series.names), series.freq_label))
    return tuple(parts)


def windows(segment: RawSeries, lookback: int, horizon: int) -> list[WindowSample]:
    """Every stride-1 (lookback, horizon) pair that fits in the segment."""
    T = segment.n_steps
    n = T - lookback - horizon + 1
    if n < 1:
        raise ValueError(
            f"segment of {T} steps cannot fit lookback {lookback} + horizon {horizon}"
        )
    vals = segment.values.data
    return [
        WindowSample(
            x=Tensor(vals[i : i + lookback]),
            y=Tensor(vals[i + lookback : i + lookback + horizon]),
            start=i,
        )
        for i in range(n)
    ]


@dataclass
class DatasetBundle:
    train: list[WindowSample]
    val: list[WindowSample]
    test: list[WindowSample]
    stats: NormStats
    names: list[str] = field(default_factory=list)


def make_datasets(
    series: RawSeries, lookback: int, horizon: int, split: SplitSpec = SplitSpec()
) -> DatasetBundle:
    """Normalize with train-only stats, split chronologically, window each
    segment. Windows never cross a split boundary."""
    stats = fit_norm(series, split)
    normed = apply_norm(series, stats)
    tr, va, te = chronological_split(normed, split, min_len=lookback + horizon)
    return DatasetBundle(
        train=windows(tr, lookback, horizon),
        val=windows(va, lookback, horizon),
        test=windows(te, lookback, horizon),
        stats=stats,
        names=list(series.names),
    )


# ---------------------------------------------------------------------------
# norm-stats persistence (key/value text, 17 significant digits)


def save_norm_stats(path, stats: NormStats) -> None:
    with open(path, "w") as fh:
        fh.write("# variable\tmean\tstd\n")
        for name, m, s in zip(stats.names, stats.mean, stats.std):
            fh.write("%s\t%.17g\t%.17g\n" % (name, m, s))


def load_norm_stats(path) -> NormStats:
    names, means, stds = [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, m, s = line.split("\t")
            names.append(name)
            means.append(float(m))
            stds.append(float(s))
    return NormStats(mean=np.array(means), std=np.array(stds), names=names)


# ---------------------------------------------------------------------------
# synthetic generator with a planted cross-variate signal


def synth_coupled(
    n_vars: int,
    n_steps: int,
    coupling: float,
    lag: int,
    noise: float = 0.02,
    seed: int = 0,
    ar_coeff: float = 0.3,
    sine_fraction: float = 0.9,
    min_period: float = 12.0,
    max_period: float = 32.0,
) -> RawSeries:
    """Series where variable 0 is driven by the other variables' past.

    Variables 1..C-1 are independent unit-variance AR(1)-plus-sinusoid
    processes (per-variable frequency and phase). Variable 0 is

        coupling * mean(vars 1..C-1 at t - lag)
        + (1 - coupling) * own AR(1)
        + noise * standard normal.

    The own AR component is scaled to the variance of the lagged mean, so
    `coupling` interpolates between two components of equal size at every C
    and the planted signal's share of variable 0 does not depend on C.

    Defaults make each background variable nearly a single sinusoid whose
    period fits inside a 32-step window: one channel's phase is then easy
    to read from its own history, while variable 0's history superimposes
    C-1 such phases and stops identifying them once 2*(C-1) approaches the
    window length. Periods are spaced evenly across [min_period, max_period]
    (plus a small seeded jitter) so small panels stay spectrally separated
    and large panels pack the band; that keeps the mixture's difficulty a
    function of C rather than of lucky draws. Cross-variate access removes
    exactly that bottleneck, and it is the quantity the coupled-data studies
    vary with C.
    """
    if n_vars < 2:
        raise ValueError(f"need at least 2 variables, got {n_vars}")
    if not 0.0 <= coupling <= 1.0:
        raise ValueError(f"coupling must lie in [0, 1], got {coupling}")
    if lag < 0 or n_steps < 1 or noise < 0:
        raise ValueError("lag and noise must be non-negative, n_steps positive")
    if not 0.0 <= sine_fraction < 1.0 or not -1.0 < ar_coeff < 1.0:
        raise ValueError("sine_fraction in [0,1) and |ar_coeff| < 1 required")

    rng = stream(seed, "synth")
    burn = 256 + lag
    total = n_steps + burn
    n_bg = n_vars - 1

    # Background AR(1) components, stationary variance 1 - sine_fraction.
    innov_std = math.sqrt((1.0 - sine_fraction) * (1.0 - ar_coeff**2))
    innov = rng.standard_normal((total, n_bg)) * innov_std
    ar = lfilter([1.0], [1.0, -ar_coeff], innov, axis=0)

    if n_bg == 1:
        periods = np.array([0.5 * (min_period + max_period)])
    else:
        periods = np.linspace(min_period, max_period, n_bg)
    periods = periods + rng.uniform(-0.5, 0.5, size=n_bg)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n_bg)
    amp = math.sqrt(2.0 * sine_fraction)
    t_idx = np.arange(total)[:, None]
    background = ar + amp * np.sin(2.0 * math.pi * t_idx / periods[None, :] + phases[None, :])

    lagged_mean = np.empty(total)
    lagged_mean[:lag] = 0.0
    bg_mean = background.mean(axis=1)
    if lag:
        lagged_mean[lag:] = bg_mean[:-lag]
    else:
        lagged_mean[:] = bg_mean

    mean_std = math.sqrt(1.0 / n_bg)
    own_innov = rng.standard_normal(total) * (mean_std * math.sqrt(1.0 - ar_coeff**2))
    own = lfilter([1.0], [1.0, -ar_coeff], own_innov)
    eps = rng.standard_normal(total)

    var0 = coupling * lagged_mean + (1.0 - coupling) * own + noise * eps

    out = np.empty((n_steps, n_vars), dtype=np.float64)
    out[:, 0] = var0[burn:]
    out[:, 1:] = background[burn:]
    names = [f"v{j}" for j in range(n_vars)]
    return RawSeries(Tensor(out), names, freq_label="synthetic")
