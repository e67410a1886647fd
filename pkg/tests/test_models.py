"""Decoder/encoder construction, forward passes, and checkpoints."""

import numpy as np
import pytest

from relayvi.errors import ConfigError, IdxFormatError, ShapeError
from relayvi.models import (
    Mlp,
    build_decoder,
    build_encoder,
    decode,
    decode_values,
    encode,
    encode_values,
    load_encoder,
    load_mlp,
    save_encoder,
    save_mlp,
)
from relayvi.seeding import checksum
from relayvi.tensor import Tensor

from oracles import finite_diff_grad, rel_err


class TestBuildDecoder:
    def test_main_architecture_widths(self):
        m = build_decoder((64, 64), t=64, d=784, seed=0)
        assert m.widths == [64, 64, 64, 784]

    def test_one_layer_architecture(self):
        m = build_decoder((64,), t=64, d=300, seed=0)
        assert m.widths == [64, 64, 300]

    def test_unsupported_arch(self):
        with pytest.raises(ConfigError):
            build_decoder((32, 32), t=64, d=10, seed=0)

    def test_zero_weight_decoder_maps_to_bias(self):
        m = build_decoder((64,), t=8, d=5, seed=1)
        for w in m.weights:
            w.values[:] = 0.0
        m.biases[-1].values[:] = np.arange(5.0)
        z = np.random.default_rng(0).standard_normal((3, 8))
        out = decode_values(m, z)
        np.testing.assert_array_equal(out, np.tile(np.arange(5.0), (3, 1)))

    def test_param_count_formula(self):
        m = build_decoder((64, 64), t=64, d=784, seed=0)
        expected = 64 * 64 + 64 + 64 * 64 + 64 + 64 * 784 + 784
        assert m.param_count() == expected
        assert sum(p.values.size for p in m.params()) == expected


class TestDecode:
    def test_identity_affine(self):
        m = Mlp.init([3, 3], np.random.default_rng(0))
        m.weights[0].values[:] = np.eye(3)
        m.biases[0].values[:] = 0.0
        z = np.random.default_rng(1).standard_normal((4, 3))
        np.testing.assert_array_equal(decode(m, Tensor(z)).values, z)

    def test_relu_zeroes_negative_preactivations(self):
        m = Mlp.init([1, 1, 1], np.random.default_rng(0))
        m.weights[0].values[:] = 1.0
        m.weights[1].values[:] = 1.0
        m.biases[0].values[:] = 0.0
        m.biases[1].values[:] = 0.0
        out = decode_values(m, np.array([[-3.0]]))
        np.testing.assert_array_equal(out, [[0.0]])

    def test_width_mismatch(self):
        m = build_decoder((64,), t=8, d=5, seed=1)
        with pytest.raises(ShapeError):
            decode(m, Tensor(np.ones((2, 7))))

    def test_weight_gradients_match_finite_differences(self):
        m = build_decoder((64,), t=3, d=2, seed=2)
        z = np.random.default_rng(3).standard_normal((4, 3))
        decode(m, Tensor(z)).square().sum().backward()
        arrays = [p.values.copy() for p in m.params()]

        def forward_np(*params):
            n_layers = len(params) // 2
            h = z
            for i in range(n_layers):
                h = h @ params[i] + params[n_layers + i]
                if i != n_layers - 1:
                    h = np.maximum(h, 0.0)
            return (h**2).sum()

        ordered = [*[w.values.copy() for w in m.weights], *[b.values.copy() for b in m.biases]]
        for i, p in enumerate([*m.weights, *m.biases]):
            fd = finite_diff_grad(forward_np, ordered, which=i)
            assert rel_err(p.grad, fd) < 1e-4

    def test_batch_order_equivariance(self):
        m = build_decoder((64, 64), t=8, d=6, seed=4)
        z = np.random.default_rng(5).standard_normal((5, 8))
        perm = np.array([4, 2, 0, 1, 3])
        np.testing.assert_array_equal(decode_values(m, z)[perm], decode_values(m, z[perm]))

    def test_graph_and_value_paths_agree(self):
        m = build_decoder((64, 64, 64), t=8, d=6, seed=6)
        z = np.random.default_rng(7).standard_normal((3, 8))
        np.testing.assert_array_equal(decode(m, Tensor(z)).values, decode_values(m, z))


class TestEncoder:
    def test_trunk_is_reverse_architecture(self):
        e = build_encoder((64, 64), t=64, d=784, seed=0)
        assert e.trunk.widths == [784, 64, 64]
        assert e.w_mu.values.shape == (64, 64)

    def test_zero_weight_encoder_returns_biases(self):
        e = build_encoder((64,), t=4, d=6, seed=1)
        for p in (e.trunk.weights[0], e.w_mu, e.w_logsig):
            p.values[:] = 0.0
        e.b_mu.values[:] = 2.0
        e.b_logsig.values[:] = 0.5
        mu, sigma = encode_values(e, np.random.default_rng(2).standard_normal((3, 6)))
        np.testing.assert_array_equal(mu, np.full((3, 4), 2.0))
        np.testing.assert_allclose(sigma, np.exp(0.5), rtol=1e-15)

    def test_sigma_strictly_positive(self):
        e = build_encoder((64, 64), t=8, d=12, seed=3)
        x = np.random.default_rng(4).standard_normal((10, 12)) * 50
        _, sigma = encode_values(e, x)
        assert np.all(sigma > 0.0)

    def test_graph_and_value_paths_agree(self):
        e = build_encoder((64,), t=5, d=9, seed=5)
        x = np.random.default_rng(6).standard_normal((4, 9))
        mu_t, sigma_t = encode(e, Tensor(x))
        mu_v, sigma_v = encode_values(e, x)
        np.testing.assert_array_equal(mu_t.values, mu_v)
        np.testing.assert_array_equal(sigma_t.values, sigma_v)


class TestCheckpoints:
    def test_mlp_round_trip(self, tmp_path):
        m = build_decoder((64, 64), t=16, d=32, seed=7)
        save_mlp(tmp_path / "m.rvim", m)
        loaded = load_mlp(tmp_path / "m.rvim")
        assert loaded.widths == m.widths
        assert checksum(loaded.params()) == checksum(m.params())
        save_mlp(tmp_path / "m2.rvim", loaded)
        assert (tmp_path / "m2.rvim").read_bytes() == (tmp_path / "m.rvim").read_bytes()

    def test_encoder_round_trip(self, tmp_path):
        e = build_encoder((64, 64), t=16, d=32, seed=8)
        save_encoder(tmp_path / "e.rvim", e)
        loaded = load_encoder(tmp_path / "e.rvim")
        assert checksum(loaded.params()) == checksum(e.params())

    def test_magic_checked(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"garbagegarbage")
        with pytest.raises(IdxFormatError):
            load_mlp(tmp_path / "junk")
