"""Dataset loading, generation, and missingness patterns.

Supports the IDX image/label container (big-endian, magics 0x803/0x801),
a low-rank artificial dataset built from ten fixed univariate
distributions, and MCAR / box missingness. Datasets are plain numpy and
immutable after construction; masks mark observed entries with 1.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataConsistencyError, IdxFormatError, IdxLengthError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

ARTIFICIAL_DIM = 300
ARTIFICIAL_SOURCES = 10
IMAGE_SIDE = 28
IMAGE_DIM = IMAGE_SIDE * IMAGE_SIDE


@dataclass(frozen=True)
class MaskedDataset:
    """Datapoints (N x d), binary observation mask (1 = observed), optional labels."""

    x: np.ndarray
    mask: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.x.shape != self.mask.shape:
            raise DataConsistencyError(f"x shape {self.x.shape} != mask shape {self.mask.shape}")
        if self.labels is not None and len(self.labels) != self.x.shape[0]:
            raise DataConsistencyError(
                f"{self.x.shape[0]} datapoints but {len(self.labels)} labels"
            )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class MissingSpec:
    """Missingness pattern: none, mcar(rate), or boxes(count, side) on 28x28 images."""

    kind: str = "none"
    rate: float = 0.0
    count: int = 0
    side: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "mcar", "boxes"):
            raise ValueError(f"unknown missingness kind {self.kind!r}")
        if self.kind == "mcar" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"mcar rate must lie in [0, 1), got {self.rate}")
        if self.kind == "boxes" and (self.count < 1 or self.side < 1):
            raise ValueError("boxes need count >= 1 and side >= 1")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "MissingSpec":
        """Parse the compact syntax: ``none``, ``mcar:<rate>``, or ``boxes:<count>``."""
        text = text.strip()
        if text == "none":
            return cls(kind="none", seed=seed)
        if text.startswith("mcar:"):
            return cls(kind="mcar", rate=float(text[5:]), seed=seed)
        if text.startswith("boxes:"):
            return cls(kind="boxes", count=int(text[6:]), seed=seed)
        raise ValueError(f"cannot parse missing spec {text!r}")

    def describe(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "mcar":
            return f"mcar:{self.rate:g}"
        return f"boxes:{self.count}"


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IdxLengthError(f"{what}: expected {n} bytes, file ends after {len(data)}")
    return data


def _open_maybe_gz(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path, labels_path=None) -> MaskedDataset:
    """Load an IDX image file (and optional label file) into a MaskedDataset.

    Pixels are scaled by 1/255 into [0, 1]; the mask is all ones.
    """
    with _open_maybe_gz(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x} in {images_path}")
        payload = _read_exact(f, count * rows * cols, "image payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    x = pixels.astype(np.float64) / 255.0

    labels = None
    if labels_path is not None:
        with _open_maybe_gz(labels_path) as f:
            magic, n_labels = struct.unpack(">II", _read_exact(f, 8, "label header"))
            if magic != IDX_LABEL_MAGIC:
                raise IdxFormatError(f"bad label magic 0x{magic:08x} in {labels_path}")
            raw = _read_exact(f, n_labels, "label payload")
        if n_labels != count:
            raise DataConsistencyError(f"{count} images but {n_labels} labels")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    return MaskedDataset(x=x, mask=np.ones_like(x), labels=labels)


def save_idx_images(path, images: np.ndarray) -> None:
    """Write uint8 images of shape (N, rows, cols) as an IDX file."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    """Write uint8 labels of shape (N,) as an IDX file."""
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def to_uint8_images(ds: MaskedDataset, side: int = IMAGE_SIDE) -> np.ndarray:
    """Invert the 1/255 scaling back to uint8 image planes (round trip exact)."""
    if ds.d != side * side:
        raise ValueError(f"dataset dimension {ds.d} is not {side}x{side}")
    return np.rint(ds.x * 255.0).astype(np.uint8).reshape(ds.n, side, side)


def subsample(ds: MaskedDataset, n: int, seed: int) -> MaskedDataset:
    """Uniform subsample without replacement; deterministic for a fixed seed."""
    if n > ds.n:
        raise ValueError(f"cannot take {n} rows from a dataset of {ds.n}")
    idx = np.random.default_rng(seed).choice(ds.n, size=n, replace=False)
    return MaskedDataset(
        x=ds.x[idx],
        mask=ds.mask[idx],
        labels=None if ds.labels is None else ds.labels[idx],
    )


def gen_artificial(n: int, seed: int, weights=None, bias=None) -> MaskedDataset:
    """Generate the low-rank artificial dataset: x = W s + b.

    Each datapoint's source vector s has one coordinate from each of ten
    fixed univariate distributions; W (300x10) and b (300) are drawn once
    from Normal(0,1) using the seed. ``weights``/``bias`` exist as test
    hooks to force degenerate generators.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    if weights is None:
        weights = rng.standard_normal((ARTIFICIAL_DIM, ARTIFICIAL_SOURCES))
    if bias is None:
        bias = rng.standard_normal(ARTIFICIAL_DIM)
    sources = np.column_stack(
        [
            rng.normal(0.0, 1.0, n),
            rng.beta(2.0, 5.0, n),
            rng.gumbel(0.0, 1.0, n),
            rng.uniform(-1.0, 1.0, n),
            rng.laplace(0.0, 1.0, n),
            rng.exponential(1.0, n),
            rng.lognormal(0.0, 0.5, n),
            rng.standard_t(5, n),
            rng.gamma(2.0, 1.0, n),
            rng.triangular(-1.0, 0.0, 1.0, n),
        ]
    )
    x = sources @ np.asarray(weights, dtype=np.float64).T + np.asarray(bias, dtype=np.float64)
    return MaskedDataset(x=x, mask=np.ones_like(x))


def apply_missing(ds: MaskedDataset, spec: MissingSpec) -> MaskedDataset:
    """Apply a missingness pattern to the mask; x values are never altered.

    Missing values stay in storage so they can be revealed later for
    imputation scoring; the objective module guarantees they never reach
    a training loss.
    """
    if spec.kind == "none":
        return ds
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "mcar":
        hit = rng.random(ds.x.shape) < spec.rate
        new_mask = ds.mask * (~hit)
        return replace(ds, mask=new_mask)

    # boxes: only defined for image-shaped data
    if ds.d != IMAGE_DIM:
        raise ValueError(f"box missingness needs {IMAGE_SIDE}x{IMAGE_SIDE} data, got d={ds.d}")
    side = spec.side
    plane = ds.mask.reshape(ds.n, IMAGE_SIDE, IMAGE_SIDE).copy()
    corners = rng.integers(0, IMAGE_SIDE - side + 1, size=(ds.n, spec.count, 2))
    for i in range(ds.n):
        for r, c in corners[i]:
            plane[i, r : r + side, c : c + side] = 0.0
    return replace(ds, mask=plane.reshape(ds.n, IMAGE_DIM))


def export_csv(ds: MaskedDataset, path) -> None:
    """Write datapoints as CSV with header dim_0..dim_{d-1},label."""
    header = ",".join(f"dim_{j}" for j in range(ds.d)) + ",label"
    with open(path, "w", newline="") as f:
        f.write(header + "\n")
        for i in range(ds.n):
            row = ",".join(repr(float(v)) for v in ds.x[i])
            label = "" if ds.labels is None else str(int(ds.labels[i]))
            f.write(row + "," + label + "\n")


def export_mask_csv(ds: MaskedDataset, path) -> None:
    """Write the observation mask as a parallel CSV of 0/1."""
    header = ",".join(f"dim_{j}" for j in range(ds.d))
    with open(path, "w", newline="") as f:
        f.write(header + "\n")
        for i in range(ds.n):
            f.write(",".join(str(int(v)) for v in ds.mask[i]) + "\n")
