"""ELBo with missing-data marginalization, plus the reporting metrics.

The reconstruction term is a unit-variance Gaussian log-likelihood over
observed entries only (additive log-normalization constant omitted);
masked-out entries contribute exactly zero value and exactly zero
gradient. The KL term is the closed form against a standard normal
prior, summed over latent dimensions and averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, MetricError, ShapeError
from .models import decode
from .posterior import posterior_params, reparam_sample
from .tensor import Tensor


@dataclass
class ElboBreakdown:
    """Scalar graph nodes for one reparameterized ELBo estimate."""

    recon_loglik: Tensor
    kl: Tensor
    elbo: Tensor
    n_observed: int

    def floats(self) -> tuple[float, float, float]:
        return (self.recon_loglik.item(), self.kl.item(), self.elbo.item())


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def masked_recon_loglik(x_batch, mask_batch, recon_batch: Tensor) -> Tensor:
    """-1/2 * sum over observed entries of (x - recon)^2.

    ``mask_batch`` may be None for fully observed data. Entries with mask
    0 are multiplied out before squaring, so both the value and the
    gradient at those entries are exactly zero.
    """
    x = _values(x_batch)
    if x.shape != recon_batch.values.shape:
        raise ShapeError(f"data shape {x.shape} != reconstruction shape {recon_batch.values.shape}")
    diff = Tensor(x) - recon_batch
    if mask_batch is not None:
        mask = _values(mask_batch)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != data shape {x.shape}")
        diff = diff * Tensor(mask)
    return diff.square().sum() * (-0.5)


def kl_diag_gaussian(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over dims, averaged over batch.

    Closed form per row: 1/2 * sum_j (mu_j^2 + sigma_j^2 - 1 - 2 log sigma_j).
    """
    if np.any(sigma.values <= 0.0):
        raise DomainError("sigma must be strictly positive")
    inner = mu.square() + sigma.square() - 1.0 - sigma.log() * 2.0
    axis = 1 if inner.values.ndim == 2 else None
    per_row = inner.sum(axes=axis) * 0.5
    return per_row.mean() if per_row.values.ndim else per_row


def elbo_from_params(
    mu: Tensor,
    sigma: Tensor,
    decoder,
    x_batch,
    mask_batch,
    noise_seed,
    noise: np.ndarray | None = None,
) -> ElboBreakdown:
    """Single-sample reparameterized ELBo given posterior parameters."""
    z = reparam_sample(mu, sigma, noise_seed, noise=noise)
    recon = decode(decoder, z)
    recon_ll = masked_recon_loglik(x_batch, mask_batch, recon)
    kl = kl_diag_gaussian(mu, sigma)
    if mask_batch is None:
        n_observed = int(_values(x_batch).size)
    else:
        n_observed = int(_values(mask_batch).sum())
    return ElboBreakdown(recon_loglik=recon_ll, kl=kl, elbo=recon_ll - kl, n_observed=n_observed)


def elbo(
    bank,
    rows,
    decoder,
    x,
    mask,
    noise_seed,
    masks=None,
    noise: np.ndarray | None = None,
) -> ElboBreakdown:
    """ELBo for a batch of bank rows; differentiable w.r.t. bank and decoder.

    ``masks`` pins the relay selection for the forward (finite-difference
    testing); ``noise`` overrides the reparameterization draw.
    """
    rows = np.asarray(rows, dtype=np.int64)
    mu, sigma = posterior_params(bank, rows, masks=masks)
    x_rows = _values(x)[rows]
    mask_rows = None if mask is None else _values(mask)[rows]
    return elbo_from_params(mu, sigma, decoder, x_rows, mask_rows, noise_seed, noise=noise)


def elastic_metric(x, mask, recon) -> float:
    """Mean over observed entries of |d| + d^2, d = x - recon. Reporting only."""
    x, recon = _values(x), _values(recon)
    if x.shape != recon.shape:
        raise ShapeError(f"data shape {x.shape} != reconstruction shape {recon.shape}")
    d = x - recon
    if mask is not None:
        d *= _values(mask)  # masked entries contribute exact zero
        n_obs = int(_values(mask).sum())
    else:
        n_obs = d.size
    if n_obs == 0:
        raise MetricError("elastic metric undefined: no observed entries")
    flat = d.ravel()
    return float((np.abs(flat).sum() + np.einsum("i,i->", flat, flat)) / n_obs)


def elastic_metric_per_row(x, mask, recon) -> np.ndarray:
    """Row-wise elastic metric (mean over each row's observed entries)."""
    x, recon = _values(x), _values(recon)
    observed = np.ones_like(x) if mask is None else _values(mask)
    d = (x - recon) * observed
    per_row = (np.abs(d) + d * d).sum(axis=1)
    counts = observed.sum(axis=1)
    if np.any(counts == 0):
        raise MetricError("elastic metric undefined for rows with no observed entries")
    return per_row / counts


def imputation_loss(x, mask, recon) -> float:
    """Elastic metric over missing entries only (revealed after inference)."""
    mask = _values(mask)
    if not np.any(mask == 0.0):
        raise MetricError("imputation loss undefined: no missing entries")
    return elastic_metric(x, 1.0 - mask, recon)
