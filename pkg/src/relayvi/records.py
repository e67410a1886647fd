"""Per-epoch run records and their CSV serialization.

One row per (run, epoch). Floats are written with repr so the CSV
round-trips losslessly; absent metrics are written as nan. Wall seconds
are the only nondeterministic column, so determinism comparisons strip
them (``csv_body_without_wall``).
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields

from .errors import IdxFormatError

WALL_COLUMN = "wall_seconds"


@dataclass
class RunRecord:
    run_id: str
    method: str
    dataset: str
    epoch: int
    recon_loglik: float
    kl: float
    elbo: float
    train_metric: float = float("nan")
    test_metric: float = float("nan")
    imputation_metric: float = float("nan")
    wall_seconds: float = 0.0
    seed: int = 0
    thread_count: int = 1
    network_lr: float = 0.0
    posterior_lr: float = 0.0
    arch: str = ""
    batch_size: int = 0
    epochs: int = 0
    missing: str = "none"
    group_sizes: str = ""
    budget_fraction: float = 0.0
    budgets: str = ""
    mode: str = ""
    status: str = "ok"


_FIELDS = [f.name for f in fields(RunRecord)]
_FLOAT_FIELDS = {f.name for f in fields(RunRecord) if f.type == "float"}
_INT_FIELDS = {f.name for f in fields(RunRecord) if f.type == "int"}


def blas_thread_count() -> int:
    """Thread count recorded with each run (determinism caveat for BLAS reductions)."""
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        value = os.environ.get(var)
        if value:
            return int(value)
    return os.cpu_count() or 1


def write_records(path, records) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(_FIELDS)
        for r in records:
            row = asdict(r)
            writer.writerow([repr(float(row[k])) if k in _FLOAT_FIELDS else row[k] for k in _FIELDS])


def read_records(path) -> list[RunRecord]:
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise IdxFormatError(f"malformed run file {path}: empty") from None
        if header != _FIELDS:
            raise IdxFormatError(f"malformed run file {path}: unexpected header")
        for row in reader:
            if len(row) != len(_FIELDS):
                raise IdxFormatError(f"malformed run file {path}: ragged row")
            kwargs = {}
            for key, raw in zip(_FIELDS, row):
                if key in _FLOAT_FIELDS:
                    kwargs[key] = float(raw)
                elif key in _INT_FIELDS:
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = raw
            records.append(RunRecord(**kwargs))
    return records


def csv_body_without_wall(path) -> str:
    """CSV content with the wall-clock column removed, for bit-exact comparisons."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    drop = rows[0].index(WALL_COLUMN) if WALL_COLUMN in rows[0] else None
    kept = []
    for row in rows:
        if drop is not None:
            row = row[:drop] + row[drop + 1 :]
        kept.append(",".join(row))
    return "\n".join(kept)
