"""Adam optimization, the three training procedures, and test-time inference.

Two optimizer flavors back the training loops:

* ``Adam`` steps whole tensors (decoder weights, relay vectors) with the
  standard bias-corrected update.
* ``RowAdam`` steps per-datapoint parameters row-sparsely: only rows that
  appeared in the batch move, each row keeping its own step counter.
  This is what makes a mean-field baseline's posteriors bit-independent
  across datapoints, while relay vectors (stepped densely) still carry
  gradients between them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .data import MaskedDataset, MissingSpec
from .errors import ConfigError, ContractError
from .models import (
    EncoderHead,
    Mlp,
    build_decoder,
    build_encoder,
    decode_values,
    encode,
    encode_values,
)
from .objective import elastic_metric, elbo, elbo_from_params
from .posterior import (
    PosteriorBank,
    extend_bank,
    init_bank,
    posterior_mean_values,
)
from .records import RunRecord, blas_thread_count
from .seeding import checksum, derived_rng
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Adam:
    """Bias-corrected Adam over a list of parameter tensors."""

    def __init__(self, params, lr: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        """p <- p - lr * m_hat / (sqrt(v_hat) + eps); grads are cleared afterwards."""
        self.step_count += 1
        t = self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise ContractError("adam step without a populated gradient")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


class RowAdam:
    """Adam over the rows of one per-datapoint parameter.

    ``step(rows)`` updates only those rows' moments and values; every
    other row of the parameter stays bit-identical. Bias correction uses
    per-row step counters, so each datapoint's posterior follows its own
    Adam trajectory regardless of how batches interleave.
    """

    def __init__(self, param: Tensor, lr: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.param = param
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(param.values)
        self.v = np.zeros_like(param.values)
        self.steps = np.zeros(param.values.shape[0], dtype=np.int64)

    def step(self, rows) -> None:
        if self.param.grad is None:
            raise ContractError("adam step without a populated gradient")
        rows = np.asarray(rows, dtype=np.int64)
        g = self.param.grad[rows]
        self.steps[rows] += 1
        t = self.steps[rows].astype(np.float64)[:, None]
        m_rows = self.beta1 * self.m[rows] + (1.0 - self.beta1) * g
        v_rows = self.beta2 * self.v[rows] + (1.0 - self.beta2) * g * g
        self.m[rows] = m_rows
        self.v[rows] = v_rows
        m_hat = m_rows / (1.0 - self.beta1**t)
        v_hat = v_rows / (1.0 - self.beta2**t)
        self.param.values[rows] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.param.grad = None


@dataclass
class TrainConfig:
    """Everything a single run needs; defaults follow the benchmark protocol."""

    method: str = "rvi"
    dataset: str = ""
    decoder_arch: tuple[int, ...] = (64, 64)
    network_lr: float = 1e-3
    posterior_lr: float = 1e-3  # ignored by the amortized baseline
    epochs: int = 250
    batch_size: int = 256
    seed: int = 0
    missing: MissingSpec = field(default_factory=MissingSpec)
    group_sizes: tuple[int, ...] = (25, 50, 100)
    budget_fraction: float = 0.5
    mode: str = "topk"
    latent_dim: int = 64
    infer_steps: int = 250

    def run_id(self) -> str:
        arch = "x".join(str(a) for a in self.decoder_arch)
        missing = self.missing.describe().replace(":", "")
        return f"{self.method}_{self.dataset or 'data'}_a{arch}_nlr{self.network_lr:g}_plr{self.posterior_lr:g}_{missing}_seed{self.seed}"


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, order.size, batch_size):
        yield order[start : start + batch_size]


def _record(cfg: TrainConfig, bank_groups, epoch: int, recon: float, kl: float, metric: float, wall: float) -> RunRecord:
    budgets = "|".join(str(g.budget) for g in bank_groups)
    sizes = "+".join(str(g.k) for g in bank_groups)
    return RunRecord(
        run_id=cfg.run_id(),
        method=cfg.method,
        dataset=cfg.dataset,
        epoch=epoch,
        recon_loglik=recon,
        kl=kl,
        elbo=recon - kl,
        train_metric=metric,
        wall_seconds=wall,
        seed=cfg.seed,
        thread_count=blas_thread_count(),
        network_lr=cfg.network_lr,
        posterior_lr=cfg.posterior_lr,
        arch="x".join(str(a) for a in cfg.decoder_arch),
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        missing=cfg.missing.describe(),
        group_sizes=sizes,
        budget_fraction=cfg.budget_fraction if bank_groups else 0.0,
        budgets=budgets,
        mode=cfg.mode if bank_groups else "",
    )


def train_metric_values(ds: MaskedDataset, decoder: Mlp, bank: PosteriorBank) -> float:
    """Elastic metric of the posterior-mean reconstruction over a whole split."""
    mu = posterior_mean_values(bank, np.arange(ds.n))
    return elastic_metric(ds.x, ds.mask, decode_values(decoder, mu))


def derived_seed_int(*keys: int) -> int:
    """Collapse a key path to one integer seed for APIs that take a seed."""
    return int(derived_rng(*keys).integers(0, 2**31 - 1))


def _train_bank(ds: MaskedDataset, cfg: TrainConfig, group_sizes) -> tuple[Mlp, PosteriorBank, list[RunRecord]]:
    # the decoder is seeded identically across methods so that only the
    # posterior machinery differs between compared runs
    decoder = build_decoder(cfg.decoder_arch, cfg.latent_dim, ds.d, cfg.seed)
    bank = init_bank(
        ds.n,
        cfg.latent_dim,
        group_sizes,
        cfg.budget_fraction,
        derived_seed_int(cfg.seed, seeding.TAG_BANK),
        mode=cfg.mode,
    )
    net_opt = Adam(decoder.params(), cfg.network_lr)
    shared_opt = Adam(bank.shared_params(), cfg.posterior_lr) if bank.groups else None
    row_opts = [RowAdam(p, cfg.posterior_lr) for p in bank.row_params()]

    records = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = derived_rng(cfg.seed, seeding.TAG_SHUFFLE, epoch).permutation(ds.n)
        recon_sum = kl_sum = 0.0
        n_batches = 0
        for b, rows in enumerate(_batches(order, cfg.batch_size)):
            noise_rng = derived_rng(cfg.seed, seeding.TAG_NOISE, epoch, b)
            breakdown = elbo(bank, rows, decoder, ds.x, ds.mask, noise_rng)
            (-breakdown.elbo).backward()
            net_opt.step()
            if shared_opt is not None:
                shared_opt.step()
            for opt in row_opts:
                opt.step(rows)
            recon_sum += breakdown.recon_loglik.item()
            kl_sum += breakdown.kl.item()
            n_batches += 1
        metric = train_metric_values(ds, decoder, bank)
        records.append(
            _record(
                cfg,
                bank.groups,
                epoch,
                recon_sum / n_batches,
                kl_sum / n_batches,
                metric,
                time.perf_counter() - started,
            )
        )
    return decoder, bank, records


def train_rvi(ds: MaskedDataset, cfg: TrainConfig) -> tuple[Mlp, PosteriorBank, list[RunRecord]]:
    """Relay training: decoder at network_lr, all posterior parameters at posterior_lr."""
    if cfg.method != "rvi":
        raise ConfigError(f"train_rvi called with method {cfg.method!r}")
    return _train_bank(ds, cfg, cfg.group_sizes)


def train_vad(ds: MaskedDataset, cfg: TrainConfig) -> tuple[Mlp, PosteriorBank, list[RunRecord]]:
    """Mean-field baseline: the identical loop with no relay groups."""
    if cfg.method != "vad":
        raise ConfigError(f"train_vad called with method {cfg.method!r}")
    return _train_bank(ds, cfg, ())


def train_vae(ds: MaskedDataset, cfg: TrainConfig) -> tuple[Mlp, EncoderHead, list[RunRecord]]:
    """Amortized baseline: encoder on zero-filled inputs, one lr for everything.

    ``posterior_lr`` is a documented no-op here.
    """
    if cfg.method != "vae":
        raise ConfigError(f"train_vae called with method {cfg.method!r}")
    decoder = build_decoder(cfg.decoder_arch, cfg.latent_dim, ds.d, cfg.seed)
    encoder = build_encoder(cfg.decoder_arch, cfg.latent_dim, ds.d, derived_seed_int(cfg.seed, seeding.TAG_ENCODER))
    opt = Adam([*decoder.params(), *encoder.params()], cfg.network_lr)
    x_filled = ds.x * ds.mask  # the encoder has no mask channel

    records = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        order = derived_rng(cfg.seed, seeding.TAG_SHUFFLE, epoch).permutation(ds.n)
        recon_sum = kl_sum = 0.0
        n_batches = 0
        for b, rows in enumerate(_batches(order, cfg.batch_size)):
            noise_rng = derived_rng(cfg.seed, seeding.TAG_NOISE, epoch, b)
            mu, sigma = encode(encoder, Tensor(x_filled[rows]))
            breakdown = elbo_from_params(mu, sigma, decoder, ds.x[rows], ds.mask[rows], noise_rng)
            (-breakdown.elbo).backward()
            opt.step()
            recon_sum += breakdown.recon_loglik.item()
            kl_sum += breakdown.kl.item()
            n_batches += 1
        mu_all, _ = encode_values(encoder, x_filled)
        metric = elastic_metric(ds.x, ds.mask, decode_values(decoder, mu_all))
        records.append(
            _record(cfg, (), epoch, recon_sum / n_batches, kl_sum / n_batches, metric, time.perf_counter() - started)
        )
    return decoder, encoder, records


def infer_test_bank(
    decoder: Mlp,
    bank: PosteriorBank,
    test_ds: MaskedDataset,
    cfg: TrainConfig,
    steps: int,
    posterior_lr: float | None = None,
) -> tuple[PosteriorBank, list[RunRecord]]:
    """Optimize fresh posterior rows for test data; decoder and vectors stay frozen.

    One step is one pass over the test split. A frozen-parameter checksum
    is enforced on every call.
    """
    lr = cfg.posterior_lr if posterior_lr is None else posterior_lr
    frozen = [*decoder.params(), *bank.shared_params()]
    before = checksum(frozen)
    test_bank = extend_bank(bank, test_ds.n, derived_seed_int(cfg.seed, seeding.TAG_TEST_BANK))
    row_opts = [RowAdam(p, lr) for p in test_bank.row_params()]

    records = []
    order = np.arange(test_ds.n)
    for step in range(steps):
        started = time.perf_counter()
        recon_sum = kl_sum = 0.0
        n_batches = 0
        for b, rows in enumerate(_batches(order, cfg.batch_size)):
            noise_rng = derived_rng(cfg.seed, seeding.TAG_INFER_NOISE, step, b)
            breakdown = elbo(test_bank, rows, decoder, test_ds.x, test_ds.mask, noise_rng)
            (-breakdown.elbo).backward()
            for g in test_bank.shared_params():
                g.zero_grad()  # frozen: gradients discarded, never stepped
            for opt in row_opts:
                opt.step(rows)
            recon_sum += breakdown.recon_loglik.item()
            kl_sum += breakdown.kl.item()
            n_batches += 1
        metric = train_metric_values(test_ds, decoder, test_bank)
        rec = _record(cfg, test_bank.groups, step, recon_sum / n_batches, kl_sum / n_batches, float("nan"), time.perf_counter() - started)
        rec.test_metric = metric
        records.append(rec)
    if checksum(frozen) != before:
        raise ContractError("frozen decoder or relay vectors changed during test-time inference")
    return test_bank, records


def infer_test_vae(
    decoder: Mlp, encoder: EncoderHead, test_ds: MaskedDataset, cfg: TrainConfig
) -> tuple[tuple[np.ndarray, np.ndarray], list[RunRecord]]:
    """Amortized inference is a single forward pass over zero-filled inputs."""
    frozen = [*decoder.params(), *encoder.params()]
    before = checksum(frozen)
    started = time.perf_counter()
    mu, sigma = encode_values(encoder, test_ds.x * test_ds.mask)
    metric = elastic_metric(test_ds.x, test_ds.mask, decode_values(decoder, mu))
    rec = _record(cfg, (), 0, float("nan"), float("nan"), float("nan"), time.perf_counter() - started)
    rec.test_metric = metric
    if checksum(frozen) != before:
        raise ContractError("frozen parameters changed during amortized inference")
    return (mu, sigma), [rec]


def infer_test(method: str, decoder: Mlp, bank_or_encoder, test_ds: MaskedDataset, cfg: TrainConfig, steps: int, posterior_lr: float | None = None):
    if method in ("rvi", "vad"):
        return infer_test_bank(decoder, bank_or_encoder, test_ds, cfg, steps, posterior_lr)
    if method == "vae":
        return infer_test_vae(decoder, bank_or_encoder, test_ds, cfg)
    raise ConfigError(f"unknown method {method!r}")


def generate(decoder: Mlp, n: int, seed: int) -> np.ndarray:
    """Draw z ~ N(0, I) and decode; conventional generation, bank not needed."""
    t = decoder.widths[0]
    z = derived_rng(seed, seeding.TAG_GENERATE).standard_normal((n, t))
    return decode_values(decoder, z)
