"""Experiment-level measurements over trained artifacts.

Test loss and imputation run test-time inference first and score the
posterior-mean reconstructions; the supervised probe trains a small
classifier on frozen posterior means; progression decodes cumulative
relay-group contributions; the ablations sweep budget fractions and
group configurations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import MaskedDataset
from .errors import ConfigError, MetricError
from .models import Mlp, decode_values
from .objective import elastic_metric, elastic_metric_per_row, imputation_loss
from .optimize import Adam, TrainConfig, infer_test_bank, train_rvi
from .posterior import PosteriorBank, posterior_mean_values, relay_mean_values
from .records import RunRecord
from .seeding import TAG_PROBE, TAG_SHUFFLE, derived_rng
from .tensor import Tensor, matmul, relu


def eval_test_loss(
    decoder: Mlp,
    bank: PosteriorBank,
    test_ds: MaskedDataset,
    cfg: TrainConfig,
    steps: int,
) -> tuple[float, PosteriorBank]:
    """Observed-entry elastic metric after test-time inference."""
    test_bank, _ = infer_test_bank(decoder, bank, test_ds, cfg, steps)
    recon = decode_values(decoder, posterior_mean_values(test_bank, np.arange(test_ds.n)))
    return elastic_metric(test_ds.x, test_ds.mask, recon), test_bank


def mean_imputation_baseline(train_ds: MaskedDataset) -> np.ndarray:
    """Per-dimension mean of observed training values (global mean fallback)."""
    counts = train_ds.mask.sum(axis=0)
    sums = (train_ds.x * train_ds.mask).sum(axis=0)
    total_observed = train_ds.mask.sum()
    if total_observed == 0:
        raise MetricError("baseline undefined: nothing observed in the training split")
    global_mean = (train_ds.x * train_ds.mask).sum() / total_observed
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)
    return means


def eval_imputation(
    decoder: Mlp,
    bank: PosteriorBank,
    test_ds: MaskedDataset,
    cfg: TrainConfig,
    steps: int,
    train_ds: MaskedDataset | None = None,
) -> tuple[float, float | None, PosteriorBank]:
    """(model imputation loss, mean-imputation baseline, test bank).

    Inference sees only observed entries; missing values are revealed
    afterwards purely for scoring.
    """
    if not np.any(test_ds.mask == 0.0):
        raise ValueError("imputation evaluation needs a nonzero missing pattern")
    test_bank, _ = infer_test_bank(decoder, bank, test_ds, cfg, steps)
    recon = decode_values(decoder, posterior_mean_values(test_bank, np.arange(test_ds.n)))
    score = imputation_loss(test_ds.x, test_ds.mask, recon)
    baseline = None
    if train_ds is not None:
        fill = np.tile(mean_imputation_baseline(train_ds), (test_ds.n, 1))
        baseline = imputation_loss(test_ds.x, test_ds.mask, fill)
    return score, baseline, test_bank


@dataclass
class ProbeResult:
    """One probe epoch: classification loss and held-out accuracy."""

    epoch: int
    loss: float
    accuracy: float
    missing_rate: float = 0.0
    method: str = ""
    seed: int = 0


def _softmax_cross_entropy(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean cross-entropy; the row-max shift is detached, which leaves the gradient exact."""
    shift = logits.values.max(axis=1, keepdims=True)
    shifted = logits - Tensor(np.broadcast_to(shift, logits.values.shape).copy())
    log_norm = shifted.exp().sum(axes=1).log()  # (B,)
    picked = (shifted * Tensor(onehot)).sum(axes=1)  # (B,)
    return (log_norm - picked).mean()


def supervised_probe(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int,
    epochs: int = 250,
    hidden: int = 64,
    lr: float = 1e-3,
    batch_size: int = 256,
    holdout_fraction: float = 0.2,
    missing_rate: float = 0.0,
    method: str = "",
) -> list[ProbeResult]:
    """Train a frozen-feature classifier [t -> hidden -> classes], record curves.

    Features are copied up front, so the producing bank cannot move.
    """
    if labels is None:
        raise ValueError("supervised probe needs labels")
    features = np.array(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    rng = derived_rng(seed, TAG_PROBE)
    order = rng.permutation(features.shape[0])
    n_holdout = int(round(holdout_fraction * features.shape[0]))
    hold_idx, train_idx = order[:n_holdout], order[n_holdout:]
    x_train, y_train = features[train_idx], labels[train_idx]
    x_hold, y_hold = features[hold_idx], labels[hold_idx]
    onehot = np.eye(n_classes)[y_train]

    clf = Mlp.init([features.shape[1], hidden, n_classes], rng)
    opt = Adam(clf.params(), lr)
    results = []
    for epoch in range(epochs):
        perm = derived_rng(seed, TAG_PROBE, TAG_SHUFFLE, epoch).permutation(x_train.shape[0])
        loss_sum, n_batches = 0.0, 0
        for start in range(0, perm.size, batch_size):
            rows = perm[start : start + batch_size]
            h = relu(matmul(Tensor(x_train[rows]), clf.weights[0]) + matmul(Tensor(np.ones((rows.size, 1))), clf.biases[0]))
            logits = matmul(h, clf.weights[1]) + matmul(Tensor(np.ones((rows.size, 1))), clf.biases[1])
            loss = _softmax_cross_entropy(logits, onehot[rows])
            loss.backward()
            opt.step()
            loss_sum += loss.item()
            n_batches += 1
        pred = decode_values(clf, x_hold).argmax(axis=1)
        accuracy = float((pred == y_hold).mean()) if y_hold.size else float("nan")
        results.append(
            ProbeResult(
                epoch=epoch,
                loss=loss_sum / n_batches,
                accuracy=accuracy,
                missing_rate=missing_rate,
                method=method,
                seed=seed,
            )
        )
    return results


@dataclass
class ProgressionStage:
    """Decoded reconstruction for one cumulative slice of the posterior mean."""

    label: str
    recon: np.ndarray
    per_row_metric: np.ndarray

    @property
    def median_metric(self) -> float:
        return float(np.median(self.per_row_metric))


def progression_reconstructions(
    bank: PosteriorBank, decoder: Mlp, ds: MaskedDataset, rows
) -> list[ProgressionStage]:
    """Stages decode cumulative relay-group sums; the last stage adds the residual."""
    if not bank.groups:
        raise ConfigError("progression needs at least one relay group")
    rows = np.asarray(rows, dtype=np.int64)
    stages = []
    cumulative = np.zeros((rows.size, bank.t))
    label_parts = []
    for g in bank.groups:
        one_group = PosteriorBank(groups=[g], mu_eps=bank.mu_eps, log_sigma=bank.log_sigma, t=bank.t, mode=bank.mode)
        cumulative = cumulative + relay_mean_values(one_group, rows)
        label_parts.append(str(g.k))
        recon = decode_values(decoder, cumulative)
        stages.append(
            ProgressionStage(
                label="relays:" + "+".join(label_parts),
                recon=recon,
                per_row_metric=elastic_metric_per_row(ds.x[rows], ds.mask[rows], recon),
            )
        )
    full_mean = posterior_mean_values(bank, rows)
    recon = decode_values(decoder, full_mean)
    stages.append(
        ProgressionStage(
            label="mean",
            recon=recon,
            per_row_metric=elastic_metric_per_row(ds.x[rows], ds.mask[rows], recon),
        )
    )
    return stages


def ablate_budget(ds: MaskedDataset, fractions, base_cfg: TrainConfig) -> dict[float, list[RunRecord]]:
    """One training run per budget fraction, shared seeds, records tagged."""
    if base_cfg.method != "rvi":
        raise ConfigError("budget ablation applies to the relay method")
    out = {}
    for fraction in fractions:
        cfg = replace(base_cfg, budget_fraction=float(fraction))
        _, _, records = train_rvi(ds, cfg)
        out[float(fraction)] = records
    return out


def ablate_groupings(
    ds: MaskedDataset, groupings, base_cfg: TrainConfig
) -> dict[str, tuple[list[RunRecord], np.ndarray, float]]:
    """One run per grouping; returns records plus final reconstructions and metric."""
    if base_cfg.method != "rvi":
        raise ConfigError("grouping ablation applies to the relay method")
    out = {}
    for grouping in groupings:
        sizes = tuple(int(k) for k in grouping)
        cfg = replace(base_cfg, group_sizes=sizes)
        decoder, bank, records = train_rvi(ds, cfg)
        recon = decode_values(decoder, posterior_mean_values(bank, np.arange(ds.n)))
        metric = elastic_metric(ds.x, ds.mask, recon)
        out["+".join(str(k) for k in sizes)] = (records, recon, metric)
    return out


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 grayscale image from a uint8 array."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        f.write(image.tobytes())


def reconstruction_grid(columns: list[np.ndarray], side: int = 28) -> np.ndarray:
    """Tile reconstructions into a grid: row = datapoint, column = stage."""
    n = columns[0].shape[0]
    grid = np.zeros((n * side, len(columns) * side), dtype=np.uint8)
    for c, recon in enumerate(columns):
        tiles = np.clip(recon, 0.0, 1.0).reshape(n, side, side)
        for r in range(n):
            grid[r * side : (r + 1) * side, c * side : (c + 1) * side] = np.rint(tiles[r] * 255.0)
    return grid


def export_progression_pgm(path, stages: list[ProgressionStage], side: int = 28) -> None:
    write_pgm(path, reconstruction_grid([s.recon for s in stages], side=side))
