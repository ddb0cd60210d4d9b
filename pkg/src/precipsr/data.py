"""Gridded fields, GRD1 raster I/O, preprocessing and the synthetic pair generator."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

GRD_MAGIC = "GRD1"
METERS_PER_DEGREE = 111_320.0


class GridFormatError(ValueError):
    pass


@dataclass
class GridField:
    """Regular lat/lon raster. ``lat0``/``lon0`` locate the centre of cell (0, 0)."""

    values: np.ndarray
    mask: np.ndarray | None = None
    lat0: float = 0.0
    lon0: float = 0.0
    dlat: float = 1.0
    dlon: float = 1.0
    units: str = "mm/day"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"GridField values must be 2-D, got {self.values.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise ValueError(f"mask shape {self.mask.shape} != values shape {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def lats(self) -> np.ndarray:
        return self.lat0 + self.dlat * np.arange(self.height)

    @property
    def lons(self) -> np.ndarray:
        return self.lon0 + self.dlon * np.arange(self.width)

    def valid(self) -> np.ndarray:
        return self.mask if self.mask is not None else np.ones(self.shape, dtype=bool)

    def with_values(self, values, mask=None, units=None) -> "GridField":
        return replace(self, values=values, mask=self.mask if mask is None else mask,
                       units=self.units if units is None else units)

    def same_as(self, other: "GridField") -> bool:
        return (self.values.tobytes() == other.values.tobytes()
                and np.array_equal(self.valid(), other.valid())
                and (self.lat0, self.lon0, self.dlat, self.dlon, self.units)
                == (other.lat0, other.lon0, other.dlat, other.dlon, other.units))


@dataclass
class PairedSample:
    x_lr: GridField
    y_hr: GridField
    date: dt.date


# --- GRD1 ------------------------------------------------------------------

def grid_bytes(f: GridField) -> bytes:
    if " " in f.units or not f.units:
        raise GridFormatError(f"units tag must be a non-empty token, got {f.units!r}")
    header = f"{GRD_MAGIC} {f.height} {f.width} {f.lat0!r} {f.lon0!r} {f.dlat!r} {f.dlon!r} {f.units}\n"
    return (header.encode("ascii")
            + np.ascontiguousarray(f.values, dtype="<f4").tobytes()
            + f.valid().astype(np.uint8).tobytes())


def grid_from_bytes(blob: bytes) -> GridField:
    nl = blob.find(b"\n")
    if nl < 0:
        raise GridFormatError("GRD1 header has no terminating newline")
    parts = blob[:nl].decode("ascii", errors="replace").split(" ")
    if parts[0] != GRD_MAGIC:
        raise GridFormatError(f"bad magic {parts[0]!r} at offset 0")
    if len(parts) != 8:
        raise GridFormatError(f"GRD1 header needs 8 fields, got {len(parts)}")
    try:
        h, w = int(parts[1]), int(parts[2])
        lat0, lon0, dlat, dlon = (float(v) for v in parts[3:7])
    except ValueError as exc:
        raise GridFormatError(f"malformed GRD1 header: {exc}") from None
    if h < 1 or w < 1:
        raise GridFormatError(f"non-positive extents {h}x{w}")
    start = nl + 1
    need = h * w * 5
    have = len(blob) - start
    if have < need:
        raise GridFormatError(f"GRD1 payload truncated at byte offset {len(blob)}: expected {start + need} bytes")
    if have > need:
        raise GridFormatError(f"GRD1 payload has {have - need} trailing bytes after offset {start + need}")
    values = np.frombuffer(blob, dtype="<f4", count=h * w, offset=start).reshape(h, w).astype(np.float32)
    if not np.isfinite(values).all():
        bad = int(np.flatnonzero(~np.isfinite(values.ravel()))[0])
        raise GridFormatError(f"non-finite value at byte offset {start + 4 * bad}")
    mask_raw = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=start + 4 * h * w)
    if mask_raw.max(initial=0) > 1:
        raise GridFormatError("mask bytes must be 0 or 1")
    return GridField(values, mask_raw.reshape(h, w).astype(bool), lat0, lon0, dlat, dlon, parts[7])


def save_grid(f: GridField, path: str | Path) -> None:
    Path(path).write_bytes(grid_bytes(f))


def load_grid(path: str | Path) -> GridField:
    return grid_from_bytes(Path(path).read_bytes())


# --- preprocessing ---------------------------------------------------------

@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float


def _index_range(coords: np.ndarray, lo: float, hi: float, tol: float) -> slice:
    inside = np.flatnonzero((coords >= lo - tol) & (coords <= hi + tol))
    if inside.size == 0:
        raise ValueError(f"bounding box [{lo}, {hi}] lies outside raster coordinates")
    return slice(int(inside.min()), int(inside.max()) + 1)


def crop_to_box(f: GridField, box: BoundingBox) -> GridField:
    rows = _index_range(f.lats, box.lat_min, box.lat_max, abs(f.dlat) * 1e-6)
    cols = _index_range(f.lons, box.lon_min, box.lon_max, abs(f.dlon) * 1e-6)
    return GridField(f.values[rows, cols], None if f.mask is None else f.mask[rows, cols],
                     float(f.lats[rows.start]), float(f.lons[cols.start]), f.dlat, f.dlon, f.units)


def preprocess_lr(raw: GridField | Sequence[GridField], box: BoundingBox | None = None) -> GridField:
    """Reanalysis precipitation in metres of water -> daily mean mm/day, cropped to ``box``.

    A sequence of fields (e.g. hourly) is averaged first.
    """
    if isinstance(raw, GridField):
        base, vals = raw, raw.values.astype(np.float64)
    else:
        raw = list(raw)
        if not raw:
            raise ValueError("no fields to average")
        base = raw[0]
        vals = np.mean([r.values.astype(np.float64) for r in raw], axis=0)
    out = GridField((vals * 1e3).astype(np.float32), base.mask, base.lat0, base.lon0,
                    base.dlat, base.dlon, "mm/day")
    return crop_to_box(out, box) if box is not None else out


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    lat0: float
    lon0: float
    dlat: float
    dlon: float

    @property
    def lats(self) -> np.ndarray:
        return self.lat0 + self.dlat * np.arange(self.height)

    @property
    def lons(self) -> np.ndarray:
        return self.lon0 + self.dlon * np.arange(self.width)


def nearest_indices(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index into ``src`` of the nearest coordinate for each ``dst`` coordinate (ties -> lower index)."""
    return np.abs(dst[:, None] - src[None, :]).argmin(axis=1)


def mask_sea(f: GridField) -> GridField:
    if f.mask is None:
        raise ValueError("field has no land/sea mask")
    return f.with_values(np.where(f.mask, f.values, 0).astype(np.float32))


def preprocess_hr(raw: GridField, target: GridSpec | None = None) -> GridField:
    """Zero and mask sea points, then align to ``target`` by nearest neighbour."""
    f = mask_sea(raw)
    if target is None:
        return f
    ri = nearest_indices(f.lats, target.lats)
    ci = nearest_indices(f.lons, target.lons)
    return GridField(f.values[np.ix_(ri, ci)], f.mask[np.ix_(ri, ci)],
                     target.lat0, target.lon0, target.dlat, target.dlon, f.units)


def normalize(values):
    """log1p transform; accepts arrays or GridFields."""
    if isinstance(values, GridField):
        return values.with_values(normalize(values.values))
    v = np.asarray(values)
    if np.any(v < 0):
        raise ValueError("normalize expects nonnegative values")
    return np.log1p(v.astype(np.float64)).astype(np.float32)


def denormalize(values):
    if isinstance(values, GridField):
        return values.with_values(denormalize(values.values))
    return np.expm1(np.asarray(values, dtype=np.float64)).astype(np.float32)


def mask_elevation(terrain: GridField) -> GridField:
    """Mask and zero points below sea level."""
    keep = terrain.values >= 0
    if terrain.mask is not None:
        keep &= terrain.mask
    return terrain.with_values(np.where(keep, terrain.values, 0).astype(np.float32), mask=keep)


def terrain_divergence(terrain: GridField, dy_m: float | None = None, dx_m: float | None = None) -> GridField:
    """Slope magnitude sqrt(sx^2 + sy^2) in 1/m; central differences, one-sided at borders.

    Spacing defaults to degrees converted at each row's latitude.
    """
    z = terrain.values.astype(np.float64)
    if min(z.shape) < 2:
        raise ValueError(f"terrain_divergence needs at least 2x2 cells, got {z.shape}")
    dy = dy_m if dy_m is not None else abs(terrain.dlat) * METERS_PER_DEGREE
    if dx_m is not None:
        dx = np.full(z.shape[0], dx_m)
    else:
        dx = abs(terrain.dlon) * METERS_PER_DEGREE * np.cos(np.radians(terrain.lats))
    sy = np.gradient(z, axis=0) / dy
    sx = np.gradient(z, axis=1) / dx[:, None]
    return terrain.with_values(np.sqrt(sx * sx + sy * sy).astype(np.float32), units="1/m")


def block_mean(values: np.ndarray, r: int) -> np.ndarray:
    h, w = values.shape
    if h % r or w % r:
        raise ValueError(f"{values.shape} not divisible into {r}x{r} blocks")
    return values.reshape(h // r, r, w // r, r).mean(axis=(1, 3), dtype=np.float64)


def center_slices(big: tuple[int, int], small: tuple[int, int]) -> tuple[slice, slice]:
    top = (big[0] - small[0]) // 2
    left = (big[1] - small[1]) // 2
    return slice(top, top + small[0]), slice(left, left + small[1])


def center_fit(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Centre crop or zero-pad a 2-D array; same offsets as the model's crop."""
    out = np.zeros(shape, dtype=values.dtype)
    top = (values.shape[0] - shape[0]) // 2
    left = (values.shape[1] - shape[1]) // 2
    sr = slice(max(top, 0), min(top + shape[0], values.shape[0]))
    sc = slice(max(left, 0), min(left + shape[1], values.shape[1]))
    out[sr.start - top:sr.stop - top, sc.start - left:sc.stop - left] = values[sr, sc]
    return out


def coarsen(hr: GridField, lr_shape: tuple[int, int], r: int) -> np.ndarray:
    """Degrade a high-resolution field to the low-resolution grid by block means."""
    native = center_fit(hr.values.astype(np.float64), (lr_shape[0] * r, lr_shape[1] * r))
    return block_mean(native, r)


# --- dataset splitting -----------------------------------------------------

def split(dataset: Sequence, seed: int, fractions=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    """Random disjoint train/val/test partition."""
    n = len(dataset)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    pick = lambda idx: [dataset[i] for i in sorted(idx)]
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:]))


# --- synthetic heterogeneous pairs -----------------------------------------

@dataclass
class SynthConfig:
    seed: int = 0
    n_days: int = 400
    lr_shape: tuple[int, int] = (14, 9)
    hr_shape: tuple[int, int] = (66, 41)
    scale: int = 5
    cells_min: int = 1
    cells_max: int = 6
    cell_amplitude: float = 20.0
    cell_radius: tuple[float, float] = (2.0, 7.0)
    orographic_gain: float = 3.0
    wet_bias: float = 1.5
    displacement: tuple[int, int] = (5, -5)
    smoothing: float = 2.0
    dry_prob: float = 0.2
    island: bool = True
    start_date: dt.date = dt.date(2000, 1, 1)
    lat_top: float = 25.375
    lon_left: float = 119.875
    lr_step: float = 0.25

    def __post_init__(self):
        self.lr_shape = tuple(int(v) for v in self.lr_shape)
        self.hr_shape = tuple(int(v) for v in self.hr_shape)
        self.displacement = tuple(int(v) for v in self.displacement)
        self.cell_radius = tuple(float(v) for v in self.cell_radius)
        if isinstance(self.start_date, str):
            self.start_date = dt.date.fromisoformat(self.start_date)
        if not 0 <= self.dry_prob <= 1:
            raise ValueError("dry_prob must lie in [0, 1]")
        if self.cells_min < 0 or self.cells_max < self.cells_min:
            raise ValueError("bad rain-cell count range")
        native = (self.lr_shape[0] * self.scale, self.lr_shape[1] * self.scale)
        if abs(native[0] / native[1] - self.hr_shape[0] / self.hr_shape[1]) > 0.25 * native[0] / native[1]:
            raise ValueError(f"hr_shape {self.hr_shape} aspect ratio far from lr_shape {self.lr_shape}")


@dataclass
class SyntheticDataset:
    samples: list[PairedSample]
    elevation: GridField
    config: SynthConfig = field(repr=False, default=None)


def _grids(cfg: SynthConfig) -> tuple[GridSpec, GridSpec, GridSpec]:
    step = cfg.lr_step
    lr = GridSpec(cfg.lr_shape[0], cfg.lr_shape[1], cfg.lat_top, cfg.lon_left, -step, step)
    hstep = step / cfg.scale
    native = GridSpec(cfg.lr_shape[0] * cfg.scale, cfg.lr_shape[1] * cfg.scale,
                      cfg.lat_top + step / 2 - hstep / 2, cfg.lon_left - step / 2 + hstep / 2, -hstep, hstep)
    rs, cs = center_slices((native.height, native.width), cfg.hr_shape)
    hr = GridSpec(cfg.hr_shape[0], cfg.hr_shape[1], float(native.lats[rs.start]),
                  float(native.lons[cs.start]), -hstep, hstep)
    return lr, native, hr


def _terrain(cfg: SynthConfig, shape: tuple[int, int], rng: np.random.Generator):
    """Island mask and elevation (m) on the native high-resolution grid."""
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = (H - 1) / 2, (W - 1) / 2
    if cfg.island:
        land = ((yy - cy) / (0.45 * H)) ** 2 + ((xx - cx) / (0.38 * W)) ** 2 <= 1.0
    else:
        land = np.ones(shape, dtype=bool)
    ridge_x = cx + 0.12 * W * np.sin(yy / H * np.pi * 1.3)
    elev = 3000.0 * np.exp(-(((xx - ridge_x) / (0.16 * W)) ** 2))
    for _ in range(24):
        py, px = rng.uniform(0, H), rng.uniform(0, W)
        elev += rng.uniform(200, 900) * np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * rng.uniform(1.0, 2.5) ** 2))
    elev *= np.clip(1.0 - (((yy - cy) / (0.5 * H)) ** 2 + ((xx - cx) / (0.45 * W)) ** 2), 0, 1) ** 0.5
    elev = np.where(land, elev, -rng.uniform(0, 40, size=shape))
    return land, elev


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(a)
    H, W = a.shape
    out[max(dy, 0):H + min(dy, 0), max(dx, 0):W + min(dx, 0)] = a[max(-dy, 0):H - max(dy, 0), max(-dx, 0):W - max(dx, 0)]
    return out


def generate_synthetic(cfg: SynthConfig) -> SyntheticDataset:
    """Seeded stand-in for reanalysis/observation pairs.

    Truth is a sum of Gaussian rain cells amplified by ``1 + gain * elev/max``
    on land, zero at sea. The low-resolution input comes from the same cells
    without the orographic term, shifted by ``displacement`` (hr cells),
    scaled by ``wet_bias``, blurred with ``smoothing`` and block-averaged.
    """
    rng = np.random.default_rng(cfg.seed)
    lr_spec, native, hr_spec = _grids(cfg)
    Hn, Wn = native.height, native.width
    land_n, elev_n = _terrain(cfg, (Hn, Wn), rng)
    rs, cs = center_slices((Hn, Wn), cfg.hr_shape) if cfg.hr_shape[0] <= Hn and cfg.hr_shape[1] <= Wn else (None, None)

    def to_hr(a: np.ndarray) -> np.ndarray:
        return a[rs, cs] if rs is not None else center_fit(a, cfg.hr_shape)

    land = to_hr(land_n)
    elev_pos = np.clip(elev_n, 0, None)
    orog = 1.0 + cfg.orographic_gain * elev_pos / max(elev_pos.max(), 1e-9)
    yy, xx = np.mgrid[0:Hn, 0:Wn].astype(np.float64)
    dy, dx = cfg.displacement
    samples = []
    for day in range(cfg.n_days):
        date = cfg.start_date + dt.timedelta(days=day)
        cells = np.zeros((Hn, Wn))
        if rng.random() >= cfg.dry_prob:
            for _ in range(int(rng.integers(cfg.cells_min, cfg.cells_max + 1))):
                py, px = rng.uniform(0, Hn), rng.uniform(0, Wn)
                rad = rng.uniform(*cfg.cell_radius)
                amp = rng.exponential(cfg.cell_amplitude)
                cells += amp * np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * rad * rad))
        truth = np.where(land_n, cells * orog, 0.0)
        src = _shift(cells, dy, dx) if (dy or dx) else cells
        if cfg.smoothing > 0:
            src = gaussian_filter(src, cfg.smoothing, mode="nearest")
        lr_vals = block_mean(cfg.wet_bias * src, cfg.scale)
        x_lr = GridField(np.clip(lr_vals, 0, None), None, lr_spec.lat0, lr_spec.lon0, lr_spec.dlat, lr_spec.dlon)
        y_hr = GridField(to_hr(truth), land, hr_spec.lat0, hr_spec.lon0, hr_spec.dlat, hr_spec.dlon)
        samples.append(PairedSample(x_lr, y_hr, date))
    elevation = GridField(to_hr(elev_n), None, hr_spec.lat0, hr_spec.lon0, hr_spec.dlat, hr_spec.dlon, "m")
    return SyntheticDataset(samples, elevation, cfg)


# --- arrays for the network ------------------------------------------------

def stack_inputs(samples: Sequence[PairedSample]) -> tuple[np.ndarray, np.ndarray]:
    """log1p-normalised [n,h,w,1] inputs and [n,H,W,1] targets."""
    x = np.stack([normalize(np.clip(s.x_lr.values, 0, None)) for s in samples])[..., None]
    y = np.stack([normalize(np.clip(s.y_hr.values, 0, None)) for s in samples])[..., None]
    return x, y


def elevation_input(elevation: GridField) -> np.ndarray:
    """Masked, log1p-normalised elevation as [1,H,W,1]."""
    return normalize(mask_elevation(elevation).values)[None, ..., None]


def day_of_year(date: dt.date) -> int:
    """Calendar day 1..365; 31 Dec of leap years folds onto 365."""
    return min(date.timetuple().tm_yday, 365)
