"""Per-datapoint diagonal-Gaussian posteriors with shared relay means.

Each datapoint's posterior mean decomposes into a relay part (a sparse
linear combination of vectors shared across the dataset, one combination
per relay group, summed over groups) plus an individual residual. The
relay part is what lets one datapoint's gradient move another
datapoint's posterior; the residual and log-scale stay private.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IdxFormatError
from .seeding import derived_rng
from .tensor import Tensor, gather_rows

BANK_MAGIC = b"RVIB1"

MODE_TOPK = "topk"
MODE_CLUSTER = "cluster"

INIT_SCALE = 0.01  # stddev for vectors / coefficients / residual means


@dataclass
class RelayGroup:
    """K shared latent vectors plus per-datapoint candidate coefficients."""

    vectors: Tensor  # (K, t)
    coeffs: Tensor  # (N, K)
    budget: int  # vectors each datapoint actually combines

    @property
    def k(self) -> int:
        return self.vectors.values.shape[0]


@dataclass
class PosteriorBank:
    """Posterior parameters for a whole dataset split.

    ``groups`` may be empty, which degenerates to a relay-free mean-field
    bank (the autodecoding baseline).
    """

    groups: list[RelayGroup]
    mu_eps: Tensor  # (N, t) residual means
    log_sigma: Tensor  # (N, t)
    t: int
    mode: str = MODE_TOPK
    frozen_vectors: bool = False

    @property
    def n(self) -> int:
        return self.mu_eps.values.shape[0]

    def row_params(self) -> list[Tensor]:
        """Per-datapoint parameters (row-sparse during optimization)."""
        return [g.coeffs for g in self.groups] + [self.mu_eps, self.log_sigma]

    def shared_params(self) -> list[Tensor]:
        """Parameters shared across datapoints (the relay vectors)."""
        return [g.vectors for g in self.groups]

    def param_count(self) -> int:
        total = 2 * self.n * self.t
        for g in self.groups:
            total += g.vectors.values.size + g.coeffs.values.size
        return total


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def compute_budget(k: int, fraction: float, mode: str) -> int:
    if mode == MODE_CLUSTER:
        return 1
    return max(1, min(k, _round_half_up(fraction * k)))


def init_bank(
    n: int,
    t: int,
    group_sizes,
    budget_fraction: float,
    seed: int,
    mode: str = MODE_TOPK,
) -> PosteriorBank:
    """Randomly initialized bank: small Normal means, unit sigmas.

    An empty ``group_sizes`` yields a relay-free bank (mean-field baseline).
    """
    if mode not in (MODE_TOPK, MODE_CLUSTER):
        raise ConfigError(f"unknown relay mode {mode!r}")
    if not 0.0 < budget_fraction <= 1.0:
        raise ConfigError(f"budget fraction must lie in (0, 1], got {budget_fraction}")
    rng = derived_rng(seed)
    groups = []
    for k in group_sizes:
        vectors = Tensor(rng.normal(0.0, INIT_SCALE, (k, t)), requires_grad=True)
        coeffs = Tensor(rng.normal(0.0, INIT_SCALE, (n, k)), requires_grad=True)
        groups.append(RelayGroup(vectors=vectors, coeffs=coeffs, budget=compute_budget(k, budget_fraction, mode)))
    mu_eps = Tensor(rng.normal(0.0, INIT_SCALE, (n, t)), requires_grad=True)
    log_sigma = Tensor(np.zeros((n, t)), requires_grad=True)
    return PosteriorBank(groups=groups, mu_eps=mu_eps, log_sigma=log_sigma, t=t, mode=mode)


def extend_bank(bank: PosteriorBank, n_new: int, seed: int) -> PosteriorBank:
    """Fresh per-datapoint rows for new data; relay vectors shared and frozen.

    Returns a bank holding only the new rows. The trained bank is left
    untouched; its vectors are shared by reference so they stay
    bit-identical across the extension.
    """
    rng = derived_rng(seed)
    groups = []
    for g in bank.groups:
        coeffs = Tensor(rng.normal(0.0, INIT_SCALE, (n_new, g.k)), requires_grad=True)
        groups.append(RelayGroup(vectors=g.vectors, coeffs=coeffs, budget=g.budget))
    mu_eps = Tensor(rng.normal(0.0, INIT_SCALE, (n_new, bank.t)), requires_grad=True)
    log_sigma = Tensor(np.zeros((n_new, bank.t)), requires_grad=True)
    return PosteriorBank(
        groups=groups,
        mu_eps=mu_eps,
        log_sigma=log_sigma,
        t=bank.t,
        mode=bank.mode,
        frozen_vectors=True,
    )


def selection_mask(coeff_rows: np.ndarray, budget: int) -> np.ndarray:
    """0/1 mask keeping each row's top-``budget`` coefficients by |value|.

    Ties break toward the lower index. Implemented with a partition plus
    an explicit tie fill, which matches a stable descending-|value| sort
    exactly but costs O(K) per row instead of O(K log K).
    """
    magnitude = np.abs(coeff_rows)
    k = magnitude.shape[1]
    if budget >= k:
        return np.ones_like(coeff_rows)
    cut = np.partition(magnitude, k - budget, axis=1)[:, k - budget, None]
    mask = (magnitude > cut).astype(np.float64)
    need = budget - mask.sum(axis=1, dtype=np.int64)
    at_cut = magnitude == cut
    take = np.cumsum(at_cut, axis=1) <= need[:, None]
    mask[at_cut & take] = 1.0
    return mask


def selection_masks(bank: PosteriorBank, rows) -> list[np.ndarray]:
    """Current per-group selection masks for the given datapoint rows."""
    rows = np.asarray(rows, dtype=np.int64)
    return [selection_mask(g.coeffs.values[rows], g.budget) for g in bank.groups]


def relay_mean(bank: PosteriorBank, rows, masks: list[np.ndarray] | None = None) -> Tensor:
    """Summed relay contributions for the given rows, differentiable.

    Gradients flow only through selected coefficients and the vectors
    they select; everything else receives an exact zero. Passing
    precomputed ``masks`` holds the selection fixed across a forward.
    """
    if not bank.groups:
        raise ConfigError("relay_mean needs at least one relay group")
    rows = np.asarray(rows, dtype=np.int64)
    if masks is None:
        masks = selection_masks(bank, rows)
    total = None
    for g, mask in zip(bank.groups, masks):
        coeff_rows = gather_rows(g.coeffs, rows)
        contribution = (coeff_rows * Tensor(mask)) @ g.vectors
        total = contribution if total is None else total + contribution
    return total


def posterior_params(bank: PosteriorBank, rows, masks=None) -> tuple[Tensor, Tensor]:
    """(mu, sigma) for the given rows: mu = relay mean + residual, sigma = exp(log_sigma)."""
    rows = np.asarray(rows, dtype=np.int64)
    eps_rows = gather_rows(bank.mu_eps, rows)
    if bank.groups:
        mu = relay_mean(bank, rows, masks) + eps_rows
    else:
        mu = eps_rows
    sigma = gather_rows(bank.log_sigma, rows).exp()
    return mu, sigma


def reparam_sample(mu: Tensor, sigma: Tensor, noise_seed, noise: np.ndarray | None = None) -> Tensor:
    """z = mu + lambda * sigma with lambda ~ N(0, I) drawn from the seed.

    Gradients flow to mu and sigma, never to the noise. ``noise``
    overrides the draw (test hook, e.g. zeros to force z = mu).
    """
    if noise is None:
        rng = noise_seed if isinstance(noise_seed, np.random.Generator) else np.random.default_rng(noise_seed)
        noise = rng.standard_normal(mu.values.shape)
    return mu + sigma * Tensor(noise)


def relay_mean_values(bank: PosteriorBank, rows) -> np.ndarray:
    """Graph-free relay means, bit-identical to relay_mean's forward."""
    rows = np.asarray(rows, dtype=np.int64)
    total = np.zeros((rows.size, bank.t))
    for g in bank.groups:
        coeff_rows = g.coeffs.values[rows]
        mask = selection_mask(coeff_rows, g.budget)
        total = total + (coeff_rows * mask) @ g.vectors.values
    return total


def posterior_mean_values(bank: PosteriorBank, rows) -> np.ndarray:
    """Graph-free posterior means for evaluation and reporting."""
    rows = np.asarray(rows, dtype=np.int64)
    if bank.groups:
        return relay_mean_values(bank, rows) + bank.mu_eps.values[rows]
    return bank.mu_eps.values[rows].copy()


def save_bank(path, bank: PosteriorBank) -> None:
    """Binary checkpoint: RVIB1 header + row-major float64 buffers."""
    mode_byte = 0 if bank.mode == MODE_TOPK else 1
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<BQQQB", mode_byte, bank.n, bank.t, len(bank.groups), int(bank.frozen_vectors)))
        for g in bank.groups:
            f.write(struct.pack("<QQ", g.k, g.budget))
        for g in bank.groups:
            f.write(g.vectors.values.astype("<f8").tobytes())
        for g in bank.groups:
            f.write(g.coeffs.values.astype("<f8").tobytes())
        f.write(bank.mu_eps.values.astype("<f8").tobytes())
        f.write(bank.log_sigma.values.astype("<f8").tobytes())


def load_bank(path) -> PosteriorBank:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != BANK_MAGIC:
            raise IdxFormatError(f"not a bank checkpoint (magic {magic!r})")
        mode_byte, n, t, n_groups, frozen = struct.unpack("<BQQQB", f.read(26))
        sizes = [struct.unpack("<QQ", f.read(16)) for _ in range(n_groups)]

        def read_array(shape):
            count = int(np.prod(shape))
            return np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape).astype(np.float64)

        vectors = [read_array((k, t)) for k, _ in sizes]
        coeffs = [read_array((n, k)) for k, _ in sizes]
        mu_eps = read_array((n, t))
        log_sigma = read_array((n, t))
    groups = [
        RelayGroup(
            vectors=Tensor(vec, requires_grad=True),
            coeffs=Tensor(cf, requires_grad=True),
            budget=int(budget),
        )
        for (k, budget), vec, cf in zip(sizes, vectors, coeffs)
    ]
    return PosteriorBank(
        groups=groups,
        mu_eps=Tensor(mu_eps, requires_grad=True),
        log_sigma=Tensor(log_sigma, requires_grad=True),
        t=int(t),
        mode=MODE_TOPK if mode_byte == 0 else MODE_CLUSTER,
        frozen_vectors=bool(frozen),
    )
