"""Decoder MLP shared by all methods and the encoder for the amortized baseline.

Hidden layers are ReLU, the output layer is linear. Weights use He
initialization (Normal(0, sqrt(2/fan_in))), biases start at zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IdxFormatError, ShapeError
from .seeding import derived_rng
from .tensor import Tensor, matmul, relu

MODEL_MAGIC = b"RVIM1"

DECODER_ARCHS = ((64,), (64, 64), (64, 64, 64))


@dataclass
class Mlp:
    """Fully connected stack: widths [in, hidden..., out]."""

    widths: list[int]
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, widths, rng: np.random.Generator) -> "Mlp":
        widths = [int(w) for w in widths]
        weights, biases = [], []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            scale = np.sqrt(2.0 / w_in)
            weights.append(Tensor(rng.normal(0.0, scale, (w_in, w_out)), requires_grad=True))
            biases.append(Tensor(np.zeros((1, w_out)), requires_grad=True))
        return cls(widths=widths, weights=weights, biases=biases)

    def params(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def param_count(self) -> int:
        return sum(w_in * w_out + w_out for w_in, w_out in zip(self.widths[:-1], self.widths[1:]))


def build_decoder(arch, t: int, d: int, seed: int) -> Mlp:
    """Decoder with widths [t, *arch, d]; arch must be one of the studied stacks."""
    arch = tuple(int(a) for a in arch)
    if arch not in DECODER_ARCHS:
        raise ConfigError(f"unsupported decoder architecture {list(arch)}; pick one of {[list(a) for a in DECODER_ARCHS]}")
    if d < 1:
        raise ConfigError(f"output dimension must be positive, got {d}")
    return Mlp.init([t, *arch, d], derived_rng(seed))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    rows = np.ones((x.values.shape[0], 1))
    return matmul(x, w) + matmul(Tensor(rows), b)


def decode(m: Mlp, z: Tensor) -> Tensor:
    """Forward pass: ReLU hidden layers, linear output."""
    if z.values.ndim != 2 or z.values.shape[1] != m.widths[0]:
        raise ShapeError(f"input shape {z.values.shape} does not feed widths {m.widths}")
    h = z
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        h = _affine(h, w, b)
        if i != last:
            h = relu(h)
    return h


def decode_values(m: Mlp, z: np.ndarray) -> np.ndarray:
    """Graph-free forward pass, bit-identical to decode's forward."""
    h = np.asarray(z, dtype=np.float64)
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        h = h @ w.values + b.values
        if i != last:
            h = np.maximum(h, 0.0)
    return h


@dataclass
class EncoderHead:
    """Shared ReLU trunk with affine mean and log-scale heads."""

    trunk: Mlp
    w_mu: Tensor
    b_mu: Tensor
    w_logsig: Tensor
    b_logsig: Tensor

    def params(self) -> list[Tensor]:
        return [*self.trunk.params(), self.w_mu, self.b_mu, self.w_logsig, self.b_logsig]


def build_encoder(arch, t: int, d: int, seed: int) -> EncoderHead:
    """Encoder as the reverse of the decoder: trunk [d, *reversed(arch)], heads to t."""
    arch = tuple(int(a) for a in arch)
    if arch not in DECODER_ARCHS:
        raise ConfigError(f"unsupported encoder architecture {list(arch)}")
    rng = derived_rng(seed)
    trunk = Mlp.init([d, *reversed(arch)], rng)
    h = trunk.widths[-1]
    scale = np.sqrt(2.0 / h)
    return EncoderHead(
        trunk=trunk,
        w_mu=Tensor(rng.normal(0.0, scale, (h, t)), requires_grad=True),
        b_mu=Tensor(np.zeros((1, t)), requires_grad=True),
        w_logsig=Tensor(rng.normal(0.0, scale, (h, t)), requires_grad=True),
        b_logsig=Tensor(np.zeros((1, t)), requires_grad=True),
    )


def encode(e: EncoderHead, x_filled: Tensor) -> tuple[Tensor, Tensor]:
    """(mu, sigma) from zero-filled inputs; every trunk layer is ReLU-activated."""
    if x_filled.values.ndim != 2 or x_filled.values.shape[1] != e.trunk.widths[0]:
        raise ShapeError(f"input shape {x_filled.values.shape} does not feed widths {e.trunk.widths}")
    h = x_filled
    for w, b in zip(e.trunk.weights, e.trunk.biases):
        h = relu(_affine(h, w, b))
    mu = _affine(h, e.w_mu, e.b_mu)
    sigma = _affine(h, e.w_logsig, e.b_logsig).exp()
    return mu, sigma


def encode_values(e: EncoderHead, x_filled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Graph-free encoder forward."""
    h = np.asarray(x_filled, dtype=np.float64)
    for w, b in zip(e.trunk.weights, e.trunk.biases):
        h = np.maximum(h @ w.values + b.values, 0.0)
    mu = h @ e.w_mu.values + e.b_mu.values
    sigma = np.exp(h @ e.w_logsig.values + e.b_logsig.values)
    return mu, sigma


def _write_mlp(f, m: Mlp) -> None:
    f.write(MODEL_MAGIC)
    f.write(struct.pack("<Q", len(m.widths)))
    f.write(struct.pack(f"<{len(m.widths)}Q", *m.widths))
    for w, b in zip(m.weights, m.biases):
        f.write(w.values.astype("<f8").tobytes())
        f.write(b.values.astype("<f8").tobytes())


def _read_mlp(f) -> Mlp:
    magic = f.read(5)
    if magic != MODEL_MAGIC:
        raise IdxFormatError(f"not a model checkpoint (magic {magic!r})")
    (n_widths,) = struct.unpack("<Q", f.read(8))
    widths = list(struct.unpack(f"<{n_widths}Q", f.read(8 * n_widths)))
    weights, biases = [], []
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        w = np.frombuffer(f.read(8 * w_in * w_out), dtype="<f8").reshape(w_in, w_out)
        b = np.frombuffer(f.read(8 * w_out), dtype="<f8").reshape(1, w_out)
        weights.append(Tensor(w.astype(np.float64), requires_grad=True))
        biases.append(Tensor(b.astype(np.float64), requires_grad=True))
    return Mlp(widths=widths, weights=weights, biases=biases)


def save_mlp(path, m: Mlp) -> None:
    """Model checkpoint: RVIM1 header (widths) + row-major float64 buffers."""
    with open(path, "wb") as f:
        _write_mlp(f, m)


def load_mlp(path) -> Mlp:
    with open(path, "rb") as f:
        return _read_mlp(f)


def save_encoder(path, e: EncoderHead) -> None:
    """Encoder checkpoint: three consecutive RVIM1 blocks (trunk, mu head, log-scale head)."""
    mu_head = Mlp(widths=[e.w_mu.values.shape[0], e.w_mu.values.shape[1]], weights=[e.w_mu], biases=[e.b_mu])
    sig_head = Mlp(
        widths=[e.w_logsig.values.shape[0], e.w_logsig.values.shape[1]],
        weights=[e.w_logsig],
        biases=[e.b_logsig],
    )
    with open(path, "wb") as f:
        for block in (e.trunk, mu_head, sig_head):
            _write_mlp(f, block)


def load_encoder(path) -> EncoderHead:
    with open(path, "rb") as f:
        trunk = _read_mlp(f)
        mu_head = _read_mlp(f)
        sig_head = _read_mlp(f)
    return EncoderHead(
        trunk=trunk,
        w_mu=mu_head.weights[0],
        b_mu=mu_head.biases[0],
        w_logsig=sig_head.weights[0],
        b_logsig=sig_head.biases[0],
    )
