"""Verification metrics for downscaled precipitation (mm/day, land points only)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

RAIN_THRESHOLD = 0.1
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
METRIC_NAMES = ("mae", "rmse", "pearson", "ssim", "pod", "far", "ts")
LOWER_IS_BETTER = {"mae", "rmse", "far"}


def _prep(pred, obs, mask):
    p = np.asarray(pred, dtype=np.float64)
    o = np.asarray(obs, dtype=np.float64)
    if p.shape != o.shape:
        raise ValueError(f"grid mismatch: {p.shape} vs {o.shape}")
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != p.shape:
        raise ValueError(f"mask shape {m.shape} differs from grid {p.shape}")
    if not m.any():
        raise ValueError("mask selects no points")
    return p, o, m


def mae(pred, obs, mask=None) -> float:
    p, o, m = _prep(pred, obs, mask)
    return float(np.abs(p[m] - o[m]).mean())


def rmse(pred, obs, mask=None) -> float:
    p, o, m = _prep(pred, obs, mask)
    d = p[m] - o[m]
    return float(np.sqrt((d * d).mean()))


def pearson(pred, obs, mask=None) -> float:
    """Sample correlation over masked points; NaN when either field is constant."""
    p, o, m = _prep(pred, obs, mask)
    a, b = p[m], o[m]
    if a.size < 2:
        raise ValueError("pearson needs at least 2 points")
    a = a - a.mean()
    b = b - b.mean()
    sa, sb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if sa == 0 or sb == 0:
        return math.nan
    return float(np.clip((a * b).sum() / (sa * sb), -1.0, 1.0))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t * t) / (2 * sigma * sigma))
    return g / g.sum()


def _blur(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    ap = np.pad(a, r, mode="reflect" if min(a.shape) > r else "edge")
    tmp = sum(g[k] * ap[:, k:k + a.shape[1]] for k in range(len(g)))
    return sum(g[k] * tmp[k:k + a.shape[0], :] for k in range(len(g)))


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float) -> np.ndarray:
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mx * mx
    syy = _blur(y * y, g) - my * my
    sxy = _blur(x * y, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred, obs, mask=None, data_range: float | None = None) -> float:
    """Mean local SSIM (11x11 Gaussian, sigma 1.5) over masked points.

    Off-mask points are zeroed before filtering. ``data_range`` defaults to
    max(pred max, obs max, 1 mm).
    """
    p, o, m = _prep(pred, obs, mask)
    p = np.where(m, p, 0.0)
    o = np.where(m, o, 0.0)
    if data_range is None:
        data_range = max(float(p[m].max()), float(o[m].max()), 1.0)
    return float(ssim_map(p, o, data_range)[m].mean())


@dataclass
class Contingency:
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int
    threshold: float = RAIN_THRESHOLD

    @classmethod
    def from_fields(cls, pred, obs, mask=None, t: float = RAIN_THRESHOLD) -> "Contingency":
        p, o, m = _prep(pred, obs, mask)
        pw, ow = p[m] >= t, o[m] >= t
        return cls(int((pw & ow).sum()), int((~pw & ow).sum()), int((pw & ~ow).sum()), int((~pw & ~ow).sum()), t)

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def pod(self) -> float:
        d = self.hits + self.misses
        return self.hits / d if d else math.nan

    def far(self) -> float:
        d = self.hits + self.false_alarms
        return self.false_alarms / d if d else math.nan

    def ts(self) -> float:
        d = self.hits + self.misses + self.false_alarms
        return self.hits / d if d else math.nan


def forecast_indicators(pred, obs, mask=None, t: float = RAIN_THRESHOLD) -> tuple[float, float, float]:
    c = Contingency.from_fields(pred, obs, mask, t)
    return c.pod(), c.far(), c.ts()


def evaluate_day(pred, obs, mask=None) -> dict[str, float]:
    pod, far, ts = forecast_indicators(pred, obs, mask)
    return {"mae": mae(pred, obs, mask), "rmse": rmse(pred, obs, mask), "pearson": pearson(pred, obs, mask),
            "ssim": ssim(pred, obs, mask), "pod": pod, "far": far, "ts": ts}


@dataclass
class MetricsReport:
    dates: list[str] = field(default_factory=list)
    rows: list[dict[str, float]] = field(default_factory=list)

    def add(self, date: str, values: dict[str, float]) -> None:
        self.dates.append(str(date))
        self.rows.append({k: float(values[k]) for k in METRIC_NAMES})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def undefined(self, name: str) -> int:
        return int(np.isnan(self.column(name)).sum())

    def aggregate(self, how: str) -> dict[str, float]:
        """Mean or median per metric, ignoring undefined (NaN) days."""
        fn = {"mean": np.nanmean, "median": np.nanmedian}[how]
        out = {}
        for k in METRIC_NAMES:
            col = self.column(k)
            out[k] = float(fn(col)) if np.isfinite(col).any() else math.nan
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("date",) + METRIC_NAMES)
            for d, r in zip(self.dates, self.rows):
                w.writerow([d] + [_fmt(r[k]) for k in METRIC_NAMES])
            for how in ("mean", "median"):
                agg = self.aggregate(how)
                w.writerow([how] + [_fmt(agg[k]) for k in METRIC_NAMES])

    @classmethod
    def read_csv(cls, path: str | Path) -> tuple["MetricsReport", dict[str, dict[str, float]]]:
        """Per-day rows and the aggregate footer rows keyed by 'mean'/'median'."""
        rep = cls()
        footer = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != ("date",) + METRIC_NAMES:
                raise ValueError(f"{path}: unexpected metrics header {header}")
            for row in reader:
                vals = {k: float(v) for k, v in zip(METRIC_NAMES, row[1:])}
                if row[0] in ("mean", "median"):
                    footer[row[0]] = vals
                else:
                    rep.add(row[0], vals)
        if set(footer) != {"mean", "median"}:
            raise ValueError(f"{path}: missing aggregate footer rows")
        return rep, footer


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def evaluate_fields(dates: Sequence, preds: Sequence[np.ndarray], obs: Sequence[np.ndarray],
                    masks: Sequence[np.ndarray | None]) -> MetricsReport:
    rep = MetricsReport()
    for d, p, o, m in zip(dates, preds, obs, masks):
        rep.add(str(d), evaluate_day(p, o, m))
    return rep
