"""Statistical baselines: windowed empirical CDFs, quantile mapping and BCSD."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import GridField, center_fit, day_of_year
from .layers import interpolation_matrix

WINDOW_HALF_WIDTH = 15
CALENDAR_DAYS = 365


@dataclass(frozen=True)
class WindowIndex:
    day_of_year: int
    window_half_width: int = WINDOW_HALF_WIDTH
    years: tuple[int, ...] = ()

    def __post_init__(self):
        if not 1 <= self.day_of_year <= 366:
            raise ValueError(f"day_of_year {self.day_of_year} outside 1..366")

    def contains(self, date: dt.date) -> bool:
        if self.years and date.year not in self.years:
            return False
        d = abs(day_of_year(date) - min(self.day_of_year, CALENDAR_DAYS)) % CALENDAR_DAYS
        return min(d, CALENDAR_DAYS - d) <= self.window_half_width


@dataclass
class EmpiricalCDF:
    """Sorted samples with Weibull plotting positions i/(n+1).

    Tied samples share the mean position of their block, so the lookup table
    holds one (value, position) node per distinct value.
    """

    samples: np.ndarray
    nodes: np.ndarray = field(init=False, repr=False)
    positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s = np.sort(np.asarray(self.samples, dtype=np.float64).ravel())
        if s.size < 2:
            raise ValueError("an empirical CDF needs at least 2 samples")
        self.samples = s
        n = s.size
        self.nodes, first, counts = np.unique(s, return_index=True, return_counts=True)
        # mean rank of a tie block [first, first+count) in 1-based ranks
        self.positions = (first + 1 + (counts - 1) / 2.0) / (n + 1)

    @property
    def n(self) -> int:
        return self.samples.size


def build_ecdf(series: np.ndarray, dates: Sequence[dt.date], window: WindowIndex) -> EmpiricalCDF:
    """ECDF of all values whose calendar day lies within the window, over all years."""
    series = np.asarray(series)
    if len(series) != len(dates):
        raise ValueError("series and dates differ in length")
    if len({d.year for d in dates}) < 2:
        raise ValueError("series must cover at least 2 years")
    sel = np.array([window.contains(d) for d in dates])
    picked = series[sel]
    if picked.size == 0:
        raise ValueError(f"no samples inside the window around day {window.day_of_year}")
    return EmpiricalCDF(picked)


def cdf_eval(F: EmpiricalCDF, x):
    """Cumulative probability by linear interpolation between nodes.

    Below the smallest sample it is 1/(n+1), above the largest n/(n+1).
    """
    x = np.asarray(x, dtype=np.float64)
    n = F.n
    p = np.interp(x, F.nodes, F.positions)
    p = np.where(x < F.nodes[0], 1.0 / (n + 1), p)
    p = np.where(x > F.nodes[-1], n / (n + 1.0), p)
    return p if p.ndim else float(p)


def cdf_invert(F: EmpiricalCDF, p):
    """Quantile by linear interpolation of the node table, clamped to the sample range."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    v = np.interp(p, F.positions, F.nodes)
    return v if v.ndim else float(v)


def qm_values(x_bias: np.ndarray, F_bias: Sequence[Sequence[EmpiricalCDF]],
              F_ref: Sequence[Sequence[EmpiricalCDF]]) -> np.ndarray:
    x_bias = np.asarray(x_bias, dtype=np.float64)
    h, w = x_bias.shape
    if len(F_bias) != h or len(F_ref) != h or any(len(r) != w for r in F_bias) or any(len(r) != w for r in F_ref):
        raise ValueError("CDF grids do not match the field grid")
    out = np.empty_like(x_bias)
    for i in range(h):
        for j in range(w):
            out[i, j] = cdf_invert(F_ref[i][j], cdf_eval(F_bias[i][j], x_bias[i, j]))
    return np.clip(out, 0, None)


def qm_correct(x_bias: GridField, F_bias, F_ref) -> GridField:
    """x_cor = InvF_ref(F_bias(x_bias)) at every grid point."""
    return x_bias.with_values(qm_values(x_bias.values, F_bias, F_ref).astype(np.float32))


def grid_ecdfs(stack: np.ndarray) -> list[list[EmpiricalCDF]]:
    """Per-point ECDFs from a [T, h, w] stack of already-windowed samples."""
    _, h, w = stack.shape
    return [[EmpiricalCDF(stack[:, i, j]) for j in range(w)] for i in range(h)]


def upsample_field(values: np.ndarray, r: int, target: tuple[int, int], method: str = "bilinear") -> np.ndarray:
    """Interpolate a 2-D array by ``r`` and centre-fit it to ``target``."""
    mh = interpolation_matrix(values.shape[0], r, method)
    mw = interpolation_matrix(values.shape[1], r, method)
    return center_fit(mh @ np.asarray(values, dtype=np.float64) @ mw.T, target)


def bcsd_values(x_cor_lr: np.ndarray, y_l: np.ndarray, y_h: np.ndarray, r: int, method: str = "bilinear") -> np.ndarray:
    if x_cor_lr.shape != y_l.shape:
        raise ValueError(f"corrected field {x_cor_lr.shape} and Y_l {y_l.shape} differ")
    target = y_h.shape
    anomaly = upsample_field(np.asarray(x_cor_lr, np.float64) - y_l, r, target, method)
    y_l_up = upsample_field(y_l, r, target, method)
    z = y_h + anomaly * y_h / (y_l_up + 1.0)
    return np.clip(z, 0, None)


def bcsd(x_cor_lr: GridField, Y_l: GridField, Y_h: GridField, r: int, method: str = "bilinear") -> GridField:
    """Spatial disaggregation: Y_h + Intp(x_cor - Y_l) * Y_h / (Intp(Y_l) + 1), clamped at 0."""
    z = bcsd_values(x_cor_lr.values, Y_l.values, Y_h.values.astype(np.float64), r, method)
    return Y_h.with_values(z.astype(np.float32))


# --- baselines over a dataset ----------------------------------------------

def _window_stacks(reference: Sequence, target_date: dt.date, half_width: int, lr_shape, r: int):
    from .data import coarsen

    win = WindowIndex(day_of_year(target_date), half_width)
    days = [s for s in reference if win.contains(s.date)]
    if len(days) < 2:
        raise ValueError(f"only {len(days)} reference days in the window around {target_date}")
    if len({s.date.year for s in reference}) < 2:
        raise ValueError("reference period must cover at least 2 years")
    biased = np.stack([s.x_lr.values.astype(np.float64) for s in days])
    degraded = np.stack([coarsen(s.y_hr, lr_shape, r) for s in days])
    hr = np.stack([s.y_hr.values.astype(np.float64) for s in days])
    return biased, degraded, hr


def qm_lowres(reference: Sequence, sample, r: int, half_width: int = WINDOW_HALF_WIDTH) -> np.ndarray:
    """Quantile-map one day's biased low-resolution field against the degraded reference."""
    lr_shape = sample.x_lr.shape
    biased, degraded, _ = _window_stacks(reference, sample.date, half_width, lr_shape, r)
    return qm_values(sample.x_lr.values, grid_ecdfs(biased), grid_ecdfs(degraded))


def qm_downscale(reference: Sequence, sample, r: int, half_width: int = WINDOW_HALF_WIDTH) -> np.ndarray:
    """QM at low resolution followed by bilinear interpolation to the truth grid."""
    x_cor = qm_lowres(reference, sample, r, half_width)
    return np.clip(upsample_field(x_cor, r, sample.y_hr.shape), 0, None)


def bcsd_downscale(reference: Sequence, sample, r: int, half_width: int = WINDOW_HALF_WIDTH) -> np.ndarray:
    lr_shape = sample.x_lr.shape
    biased, degraded, hr = _window_stacks(reference, sample.date, half_width, lr_shape, r)
    x_cor = qm_values(sample.x_lr.values, grid_ecdfs(biased), grid_ecdfs(degraded))
    return bcsd_values(x_cor, degraded.mean(axis=0), hr.mean(axis=0), r)


def bilinear_downscale(sample, r: int) -> np.ndarray:
    return np.clip(upsample_field(sample.x_lr.values, r, sample.y_hr.shape), 0, None)
