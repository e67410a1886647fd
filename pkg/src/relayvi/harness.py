"""Sweep execution and aggregation: configuration grids to CSV files.

A sweep is the Cartesian product of methods, learning rates, decoder
architectures, missing rates and repetitions. Each unit runs
independently (optionally on a process pool), writes ``runs/<id>.csv``,
and the scheduler finishes with ``summary.csv`` (final-epoch statistics
per configuration) plus ``curves.csv`` (per-epoch statistics for curve
plotting). Failures are recorded in the summary and do not stop the
sweep.
"""

from __future__ import annotations

import csv
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import MaskedDataset, MissingSpec, apply_missing, gen_artificial, load_idx, subsample
from .errors import IdxFormatError
from .optimize import TrainConfig, train_rvi, train_vad, train_vae
from .records import read_records, write_records

DATA_DIR_ENV = "RVI_DATA_DIR"

POSTERIOR_LR_GRID = (0.01, 0.005, 0.001, 0.0005, 0.0001, 0.00005, 0.00001)

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class SweepSpec:
    """Grid definition plus execution knobs."""

    dataset: str = "artificial"
    methods: tuple[str, ...] = ("rvi", "vad", "vae")
    network_lrs: tuple[float, ...] = (1e-3,)
    posterior_lrs: tuple[float, ...] | None = None  # None: tied to the network lr
    archs: tuple[tuple[int, ...], ...] = ((64, 64),)
    missing_rates: tuple[float, ...] = (0.0,)
    repetitions: int = 1
    out_dir: str = "sweep-out"
    parallelism: int = 1
    epochs: int = 250
    batch_size: int = 256
    base_seed: int = 0
    train_cap: int = 10_000
    artificial_n: int = 10_000
    latent_dim: int = 64
    group_sizes: tuple[int, ...] = (25, 50, 100)
    budget_fraction: float = 0.5
    mode: str = "topk"
    data_dir: str | None = None


def preset_sweep(name: str, **overrides) -> SweepSpec:
    """Named grids; overrides replace individual fields."""
    if name == "paper-6.1-scaled":
        spec = SweepSpec(
            methods=("rvi", "vad", "vae"),
            network_lrs=(1e-2, 1e-3),
            archs=((64,), (64, 64)),
            missing_rates=(0.1, 0.5, 0.9),
            repetitions=3,
        )
    elif name == "paper-6.1-full":
        # the full grid is 4 x 3 x 9 x 10 = 1080 runs per method per dataset; long-running
        spec = SweepSpec(
            methods=("rvi", "vad", "vae"),
            network_lrs=(1e-2, 1e-3, 1e-4, 1e-5),
            archs=((64,), (64, 64), (64, 64, 64)),
            missing_rates=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
            repetitions=10,
        )
    elif name == "posterior-lr-study":
        spec = SweepSpec(
            methods=("rvi", "vad"),
            network_lrs=(1e-3,),
            posterior_lrs=POSTERIOR_LR_GRID,
            archs=((64, 64),),
            missing_rates=(0.0,),
            repetitions=1,
            epochs=50,
        )
    else:
        raise ValueError(f"unknown sweep preset {name!r}")
    return replace(spec, **overrides)


def resolve_dataset(
    name: str,
    split: str,
    data_dir: str | None,
    seed: int,
    artificial_n: int = 10_000,
) -> MaskedDataset:
    """Load a named dataset split; artificial data is generated on the fly."""
    if name == "artificial":
        return gen_artificial(artificial_n, seed=seed)
    root = Path(data_dir or os.environ.get(DATA_DIR_ENV, "."))
    images_name, labels_name = IDX_FILES[split]
    base = root / name
    if not base.is_dir():
        base = root
    for suffix in ("", ".gz"):
        images = base / (images_name + suffix)
        labels = base / (labels_name + suffix)
        if images.exists():
            return load_idx(images, labels if labels.exists() else None)
    raise OSError(f"cannot resolve dataset {name!r} ({split}) under {root}")


def prepare_dataset(spec: SweepSpec, rate: float, rep: int, split: str = "train") -> MaskedDataset:
    """Dataset pipeline for one run: load/generate, cap, apply missingness.

    The underlying data is shared across runs (seeded by base_seed); the
    missing mask is re-drawn per repetition so compared methods see the
    same mask at the same repetition.
    """
    ds = resolve_dataset(spec.dataset, split, spec.data_dir, spec.base_seed, spec.artificial_n)
    if spec.train_cap and ds.n > spec.train_cap:
        ds = subsample(ds, spec.train_cap, seed=spec.base_seed)
    if rate > 0.0:
        ds = apply_missing(ds, MissingSpec(kind="mcar", rate=rate, seed=spec.base_seed + rep))
    return ds


def run_units(spec: SweepSpec):
    """Enumerate (method, network_lr, posterior_lr, arch, rate, rep) units."""
    posterior_lrs = spec.posterior_lrs
    for method in spec.methods:
        for network_lr in spec.network_lrs:
            for posterior_lr in posterior_lrs or (network_lr,):
                for arch in spec.archs:
                    for rate in spec.missing_rates:
                        for rep in range(spec.repetitions):
                            yield method, network_lr, posterior_lr, arch, rate, rep


def unit_config(spec: SweepSpec, unit) -> TrainConfig:
    method, network_lr, posterior_lr, arch, rate, rep = unit
    missing = MissingSpec(kind="mcar", rate=rate, seed=spec.base_seed + rep) if rate > 0.0 else MissingSpec()
    return TrainConfig(
        method=method,
        dataset=spec.dataset,
        decoder_arch=tuple(arch),
        network_lr=network_lr,
        posterior_lr=posterior_lr,
        epochs=spec.epochs,
        batch_size=spec.batch_size,
        seed=spec.base_seed + rep,
        missing=missing,
        group_sizes=spec.group_sizes,
        budget_fraction=spec.budget_fraction,
        mode=spec.mode,
        latent_dim=spec.latent_dim,
    )


TRAINERS = {"rvi": train_rvi, "vad": train_vad, "vae": train_vae}


def _execute_unit(spec: SweepSpec, unit) -> tuple[str, str, str]:
    """Run one unit; returns (run_id, status, csv_path or message)."""
    method, _, _, _, rate, rep = unit
    cfg = unit_config(spec, unit)
    run_id = cfg.run_id()
    try:
        ds = prepare_dataset(spec, rate, rep)
        _, _, records = TRAINERS[method](ds, cfg)
        path = Path(spec.out_dir) / "runs" / f"{run_id}.csv"
        write_records(path, records)
        return run_id, "ok", str(path)
    except Exception as exc:  # noqa: BLE001 - failures become summary rows
        return run_id, f"failed: {type(exc).__name__}: {exc}", ""


def run_sweep(spec: SweepSpec) -> bool:
    """Execute the grid; True iff every requested run completed."""
    out = Path(spec.out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    units = list(run_units(spec))
    if spec.parallelism > 1:
        with ProcessPoolExecutor(max_workers=spec.parallelism) as pool:
            results = list(pool.map(_execute_unit, [spec] * len(units), units))
    else:
        results = [_execute_unit(spec, unit) for unit in units]

    statuses = {run_id: status for run_id, status, _ in results}
    aggregate(out, statuses=statuses)
    return all(status == "ok" for status in statuses.values())


CONFIG_COLUMNS = (
    "method",
    "dataset",
    "arch",
    "network_lr",
    "posterior_lr",
    "missing",
    "group_sizes",
    "budget_fraction",
    "mode",
    "batch_size",
    "epochs",
)
METRIC_COLUMNS = ("recon_loglik", "kl", "elbo", "train_metric")


def _stats(values) -> tuple[float, float, float]:
    mean = statistics.fmean(values)
    std = statistics.pstdev(values)
    median = statistics.median(values)
    return mean, std, median


def aggregate(run_dir, statuses: dict[str, str] | None = None) -> None:
    """Group runs by configuration; write summary.csv and curves.csv."""
    run_dir = Path(run_dir)
    runs_path = run_dir / "runs"
    files = sorted(runs_path.glob("*.csv")) if runs_path.is_dir() else []
    if not files and not statuses:
        raise IdxFormatError(f"no run files under {runs_path}")

    by_config: dict[tuple, dict[int, list]] = {}
    run_ids: dict[tuple, list[str]] = {}
    for path in files:
        records = read_records(path)
        if not records:
            raise IdxFormatError(f"malformed run file {path}: no rows")
        key = tuple(getattr(records[0], col) for col in CONFIG_COLUMNS)
        epochs = by_config.setdefault(key, {})
        run_ids.setdefault(key, []).append(records[0].run_id)
        for rec in records:
            epochs.setdefault(rec.epoch, []).append(rec)

    with open(run_dir / "curves.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        header = list(CONFIG_COLUMNS) + ["epoch", "n_runs"]
        for metric in METRIC_COLUMNS:
            header += [f"{metric}_mean", f"{metric}_std", f"{metric}_median"]
        writer.writerow(header)
        for key in sorted(by_config, key=str):
            for epoch in sorted(by_config[key]):
                recs = by_config[key][epoch]
                row = list(key) + [epoch, len(recs)]
                for metric in METRIC_COLUMNS:
                    row += [repr(v) for v in _stats([getattr(r, metric) for r in recs])]
                writer.writerow(row)

    with open(run_dir / "summary.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        header = list(CONFIG_COLUMNS) + ["n_runs", "status"]
        for metric in METRIC_COLUMNS:
            header += [f"final_{metric}_mean", f"final_{metric}_std", f"final_{metric}_median"]
        writer.writerow(header)
        for key in sorted(by_config, key=str):
            final_epoch = max(by_config[key])
            recs = by_config[key][final_epoch]
            status = "ok"
            row = list(key) + [len(recs), status]
            for metric in METRIC_COLUMNS:
                row += [repr(v) for v in _stats([getattr(r, metric) for r in recs])]
            writer.writerow(row)
        if statuses:
            failed = {rid: s for rid, s in statuses.items() if s != "ok"}
            for rid in sorted(failed):
                row = [""] * len(CONFIG_COLUMNS) + [0, f"{rid}: {failed[rid]}"]
                writer.writerow(row + [""] * (3 * len(METRIC_COLUMNS)))
