"""Command-line entry point: synth, train, eval, baseline, compare, digest.

Every command writes plain files into its output directory and finishes by
writing ``run.json`` (the run manifest). Options can also come from a
``--config`` file of ``key=value`` lines whose keys are the long flag names.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import (GridField, PairedSample, SynthConfig, denormalize, elevation_input, generate_synthetic,
                   load_grid, save_grid, split, stack_inputs)
from .metrics import LOWER_IS_BETTER, METRIC_NAMES, MetricsReport, evaluate_day
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .statdown import WINDOW_HALF_WIDTH, bcsd_downscale, bilinear_downscale, qm_downscale
from .training import ArrayDataset, TrainConfig, predict, train

log = logging.getLogger("precipsr")

SCALES = (2, 4, 5, 8)
UPSCALE_CHOICES = ("bilinear", "bicubic", "deconv", "shuffle")
RASTER_MAX_MM = 50.0
MANIFEST_NAME = "run.json"
TABLE_HEADERS = {"mae": "MAE", "rmse": "RMSE", "pearson": "Corr.", "ssim": "SSIM", "pod": "POD", "far": "FAR",
                 "ts": "TS"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- run manifest -------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def directory_digest(root: str | Path, exclude: tuple[str, ...] = (MANIFEST_NAME,)) -> str:
    """sha256 over sorted relative paths and file contents, skipping run manifests."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file() and q.name not in exclude):
        h.update(p.relative_to(root).as_posix().encode() + b"\0" + bytes.fromhex(sha256_file(p)))
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int | None
    started: str
    finished: str = ""
    threads: int = 1
    version: str = __version__
    options: dict = field(default_factory=dict)
    artifacts: list[dict] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        self.artifacts = [
            {"path": p.relative_to(out_dir).as_posix(), "bytes": p.stat().st_size, "sha256": sha256_file(p)}
            for p in sorted(q for q in out_dir.rglob("*") if q.is_file() and q.name != MANIFEST_NAME)
        ]
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _options(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "verbose")}


def _digest(options: dict) -> str:
    return hashlib.sha256(json.dumps(options, sort_keys=True, default=str).encode()).hexdigest()


def thread_count() -> int:
    raw = os.environ.get("DOWNSCALE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DOWNSCALE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"DOWNSCALE_THREADS must be a positive integer, got {raw!r}")
    return n


# --- dataset directories ------------------------------------------------------

@dataclass
class Dataset:
    samples: list[PairedSample]
    elevation: GridField
    scale: int


def _grid_name(date: dt.date) -> str:
    return f"{date.isoformat()}.grd"


def write_dataset(out: Path, samples, elevation: GridField, scale: int, synth: dict) -> None:
    (out / "lr").mkdir(parents=True, exist_ok=True)
    (out / "hr").mkdir(exist_ok=True)
    rows = []
    for s in samples:
        lr, hr = f"lr/{_grid_name(s.date)}", f"hr/{_grid_name(s.date)}"
        save_grid(s.x_lr, out / lr)
        save_grid(s.y_hr, out / hr)
        rows.append((s.date.isoformat(), lr, hr))
    save_grid(elevation, out / "elevation.grd")
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("date", "lr_path", "hr_path"))
        w.writerows(rows)
    meta = {"scale": scale, "lr_shape": list(samples[0].x_lr.shape), "hr_shape": list(samples[0].y_hr.shape),
            "synth": synth}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")


def read_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{root} is not a dataset directory (no dataset.json)")
    meta = json.loads(meta_path.read_text())
    samples = []
    with open(root / "manifest.csv", newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0] == "date":
                continue
            if len(rec) != 3:
                raise ValueError(f"manifest.csv: expected date,lr_path,hr_path, got {rec}")
            date = dt.date.fromisoformat(rec[0])
            samples.append(PairedSample(load_grid(root / rec[1]), load_grid(root / rec[2]), date))
    if not samples:
        raise ValueError(f"{root}: manifest lists no days")
    return Dataset(samples, load_grid(root / "elevation.grd"), int(meta["scale"]))


def _select(ds: Dataset, which: str, seed: int) -> tuple[list, list, list, list]:
    tr, va, te = split(ds.samples, seed)
    chosen = {"train": tr, "val": va, "test": te, "all": ds.samples}[which]
    return tr, va, te, chosen


# --- rasters ------------------------------------------------------------------

def write_pgm16(path: Path, values: np.ndarray, mask: np.ndarray, vmax: float) -> None:
    """16-bit binary PGM; gray = round(65535 * clip(v, 0, vmax) / vmax), masked points 0."""
    gray = np.round(65535.0 * np.clip(values, 0, vmax) / vmax)
    gray = np.where(mask, gray, 0).astype(">u2")
    h, w = gray.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + gray.tobytes())
    path.with_suffix(".txt").write_text(
        "quantity: |prediction - observation| (mm/day)\n"
        f"mapping: gray = round(65535 * clip(value_mm, 0, {vmax:g}) / {vmax:g})\n"
        "masked (sea) points: gray 0\n"
    )


# --- shared evaluation --------------------------------------------------------

def _evaluate(samples, preds, threads: int, out: Path, rasters: bool, raster_max: float) -> MetricsReport:
    masks = [s.y_hr.valid() for s in samples]
    with ThreadPoolExecutor(threads) as pool:
        rows = list(pool.map(lambda a: evaluate_day(*a), zip(preds, [s.y_hr.values for s in samples], masks)))
    report = MetricsReport()
    for s, row in zip(samples, rows):
        report.add(s.date.isoformat(), row)
    report.write_csv(out / "metrics.csv")
    (out / "fields").mkdir(exist_ok=True)
    if rasters:
        (out / "rasters").mkdir(exist_ok=True)
    for s, p, m in zip(samples, preds, masks):
        save_grid(s.y_hr.with_values(np.asarray(p, np.float32)), out / "fields" / _grid_name(s.date))
        if rasters:
            err = np.abs(np.asarray(p, np.float64) - s.y_hr.values)
            write_pgm16(out / "rasters" / f"{s.date.isoformat()}.pgm", err, m, raster_max)
    return report


def _print_summary(report: MetricsReport, label: str) -> None:
    agg = report.aggregate("mean")
    parts = " ".join(f"{k}={agg[k]:.4f}" for k in METRIC_NAMES)
    print(f"{label}: {len(report.rows)} days, mean {parts}")


# --- commands -----------------------------------------------------------------

def default_hr_shape(lr_shape: tuple[int, int], r: int) -> tuple[int, int]:
    """Truth grid a little inside the lr*r footprint; 14x9 at r=5 gives 66x41."""
    trim = max(1, round(4 * r / 5))
    return lr_shape[0] * r - trim, lr_shape[1] * r - trim


def cmd_synth(args, manifest: RunManifest) -> None:
    lr = (args.lr_rows, args.lr_cols)
    hr = (args.hr_rows, args.hr_cols) if args.hr_rows and args.hr_cols else default_hr_shape(lr, args.scale)
    cfg = SynthConfig(seed=args.seed, n_days=args.days, lr_shape=lr, hr_shape=hr, scale=args.scale,
                      orographic_gain=args.gain, wet_bias=args.wet_bias, dry_prob=args.dry_prob,
                      start_date=args.start_date)
    data = generate_synthetic(cfg)
    out = Path(args.out)
    write_dataset(out, data.samples, data.elevation, args.scale, asdict(cfg))
    print(f"wrote {len(data.samples)} days ({lr[0]}x{lr[1]} -> {hr[0]}x{hr[1]}, r={args.scale}) to {out}")


def cmd_train(args, manifest: RunManifest) -> None:
    ds = read_dataset(args.data)
    r = args.scale or ds.scale
    if r != ds.scale:
        raise ValueError(f"--scale {r} does not match the dataset's scale factor {ds.scale}")
    tr, va, te, _ = _select(ds, "all", args.split_seed)
    cfg = ModelConfig(scale_factor=r, backbone_layers=args.layers, filters=args.filters,
                      head_filters=args.head_filters, cab_mlp_nodes=args.cab_nodes,
                      target_shape=ds.samples[0].y_hr.shape, upscale=args.upscale, use_topography=args.topo == "on")
    tcfg = TrainConfig(epochs_max=args.epochs, batch_size=args.batch_size, patience=args.patience,
                       learning_rate=args.learning_rate, seed=args.seed)
    elev = elevation_input(ds.elevation) if cfg.use_topography else None
    train_data = ArrayDataset(*stack_inputs(tr), elev)
    val_data = ArrayDataset(*stack_inputs(va), elev)
    model = build_model(cfg, seed=args.seed)
    log.info("model: %d parameters, %d attention blocks", model.parameter_count(), cfg.n_rab)
    max_s = args.max_minutes * 60 if args.max_minutes else None
    result = train(model, train_data, val_data, tcfg, max_seconds=max_s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.asrw")
    result.write_history(out / "history.csv")
    with open(out / "split.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("date", "split"))
        rows = [(s.date.isoformat(), name) for name, part in (("train", tr), ("val", va), ("test", te)) for s in part]
        w.writerows(sorted(rows))
    manifest.options["parameter_count"] = model.parameter_count()
    print(f"trained {len(result.history)} epochs, best val {result.state.best_val:.6f} at epoch "
          f"{result.best_epoch}; checkpoint {out / 'model.asrw'}")


def cmd_eval(args, manifest: RunManifest) -> None:
    ds = read_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    hr_shape = ds.samples[0].y_hr.shape
    if model.config.target_shape != hr_shape or model.config.scale_factor != ds.scale:
        raise ValueError(f"checkpoint expects r={model.config.scale_factor} -> {model.config.target_shape}, "
                         f"dataset has r={ds.scale} -> {hr_shape}")
    *_, chosen = _select(ds, args.split, args.split_seed)
    x, _ = stack_inputs(chosen)
    elev = elevation_input(ds.elevation) if model.config.use_topography else None
    preds = np.clip(denormalize(predict(model, x, elev))[..., 0], 0, None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = _evaluate(chosen, list(preds), manifest.threads, out, args.rasters, args.raster_max)
    _print_summary(report, "model")


def cmd_baseline(args, manifest: RunManifest) -> None:
    ds = read_dataset(args.data)
    tr, _, _, chosen = _select(ds, args.split, args.split_seed)
    r = ds.scale
    if args.method == "bilinear":
        fn = lambda s: bilinear_downscale(s, r)
    else:
        years = {s.date.year for s in tr}
        if len(years) < 2:
            raise ValueError(f"{args.method} needs a training split covering at least 2 years, got {sorted(years)}")
        base = qm_downscale if args.method == "qm" else bcsd_downscale
        fn = lambda s: base(tr, s, r, args.window)
    with ThreadPoolExecutor(manifest.threads) as pool:
        preds = list(pool.map(fn, chosen))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = _evaluate(chosen, preds, manifest.threads, out, args.rasters, args.raster_max)
    _print_summary(report, args.method)


def _fmt(v: float, digits: int = 4) -> str:
    return "nan" if math.isnan(v) else f"{v:.{digits}f}"


def compare_table(names: list[str], footers: list[dict]) -> tuple[str, list[list[str]]]:
    """Markdown table (Avg. / Med. per metric, best average in bold) and plain CSV rows."""
    best = {}
    for k in METRIC_NAMES:
        vals = [f["mean"][k] for f in footers if not math.isnan(f["mean"][k])]
        if vals:
            best[k] = min(vals) if k in LOWER_IS_BETTER else max(vals)
    lines = ["| Method | " + " | ".join(TABLE_HEADERS[k] for k in METRIC_NAMES) + " |",
             "|---|" + "---|" * len(METRIC_NAMES)]
    rows = [["method"] + [f"{k}_{how}" for k in METRIC_NAMES for how in ("mean", "median")]]
    for name, f in zip(names, footers):
        cells = []
        for k in METRIC_NAMES:
            cell = f"{_fmt(f['mean'][k])} / {_fmt(f['median'][k])}"
            cells.append(f"**{cell}**" if k in best and f["mean"][k] == best[k] else cell)
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
        rows.append([name] + [_fmt(f[how][k], 6) for k in METRIC_NAMES for how in ("mean", "median")])
    return "\n".join(lines) + "\n", rows


def cmd_compare(args, manifest: RunManifest) -> None:
    paths = [Path(p) for p in args.csvs]
    names = args.names.split(",") if args.names else [p.parent.name or p.stem for p in paths]
    if len(names) != len(paths):
        raise UsageError(f"--names lists {len(names)} methods for {len(paths)} CSV files")
    footers = [MetricsReport.read_csv(p)[1] for p in paths]
    table, rows = compare_table(names, footers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.md").write_text("Metrics (Avg. / Med.), best average in bold\n\n" + table)
    with open(out / "compare.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    print(table, end="")


def cmd_digest(args, manifest: RunManifest | None) -> None:
    print(directory_digest(args.path))


# --- argument parsing ---------------------------------------------------------

def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return n


def _probability(v: str) -> float:
    p = float(v)
    if not 0 <= p <= 1:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {v}")
    return p


def _split_opts(p):
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--rasters", action="store_true", help="dump |pred - obs| as 16-bit PGM")
    p.add_argument("--raster-max", type=float, default=RASTER_MAX_MM, help="mm/day mapped to full gray")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="precipsr", description=__doc__.splitlines()[0])
    top.add_argument("--version", action="version", version=f"precipsr {__version__}")
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value file; keys are long flag names")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate a synthetic paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--days", type=_positive, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=int, choices=SCALES, default=5)
    p.add_argument("--lr-rows", type=_positive, default=14)
    p.add_argument("--lr-cols", type=_positive, default=9)
    p.add_argument("--hr-rows", type=_positive, default=None)
    p.add_argument("--hr-cols", type=_positive, default=None)
    p.add_argument("--gain", type=float, default=SynthConfig.orographic_gain, help="orographic amplification")
    p.add_argument("--wet-bias", type=float, default=SynthConfig.wet_bias)
    p.add_argument("--dry-prob", type=_probability, default=SynthConfig.dry_prob)
    p.add_argument("--start-date", default=SynthConfig.start_date.isoformat())

    p = command("train", cmd_train, "train the attention super-resolution model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, choices=SCALES, default=None, help="defaults to the dataset's factor")
    p.add_argument("--layers", type=_positive, default=32, help="backbone convolutions (study: 16, 32, 48)")
    p.add_argument("--filters", type=_positive, default=64)
    p.add_argument("--head-filters", type=_positive, default=None)
    p.add_argument("--cab-nodes", type=_positive, default=256)
    p.add_argument("--upscale", choices=UPSCALE_CHOICES, default="shuffle")
    p.add_argument("--topo", choices=("on", "off"), default="on")
    p.add_argument("--epochs", type=_positive, default=1000)
    p.add_argument("--batch-size", type=_positive, default=64)
    p.add_argument("--patience", type=int, default=60)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--max-minutes", type=float, default=None)

    p = command("eval", cmd_eval, "evaluate a checkpoint on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _split_opts(p)

    p = command("baseline", cmd_baseline, "run a statistical baseline on a dataset split")
    p.add_argument("method", choices=("qm", "bcsd", "bilinear"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=WINDOW_HALF_WIDTH, help="calendar half-width in days")
    _split_opts(p)

    p = command("compare", cmd_compare, "tabulate several metrics CSVs")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--names", help="comma-separated method names (default: parent directory names)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("digest", help="content digest of a directory, ignoring run manifests")
    p.add_argument("path")
    p.set_defaults(func=cmd_digest, config=None, verbose=False)
    return top


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


def _config_argv(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Prepend config-file entries as flags so they go through the same validation; CLI flags win."""
    commands = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in commands), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    if command is None or config is None:
        return argv
    sub = commands[command]
    by_dest = {a.dest: a for a in sub._actions if a.option_strings}
    extra = []
    for key, value in read_config_file(config).items():
        action = by_dest.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"{config}: unknown key {key!r} for '{command}'")
        flag = max(action.option_strings, key=len)
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                extra.append(flag)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"{config}: {key} expects true/false, got {value!r}")
        else:
            extra += [flag, value]
    i = argv.index(command) + 1
    return argv[:i] + extra + argv[i:]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_config_argv(parser, argv))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.func is cmd_digest:
            args.func(args, None)
            return 0
        threads = thread_count()
        options = _options(args)
        manifest = RunManifest(args.command, _digest(options), options.get("seed"), _now(), threads=threads,
                               options=options)
        t0 = time.monotonic()
        with threadpool_limits(limits=threads):
            args.func(args, manifest)
        manifest.options["elapsed_seconds"] = round(time.monotonic() - t0, 3)
        manifest.write(Path(args.out))
        return 0
    except UsageError as exc:
        print(f"precipsr: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"precipsr: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
