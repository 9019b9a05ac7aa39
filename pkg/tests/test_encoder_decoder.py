import numpy as np
import pytest
import torch

from conftest import random_cloud, rescale_head
from fd import check_grads, random_scalar_probe
from ristcorr.config import DecoderConfig, EncoderConfig, ModelConfig
from ristcorr.decoder import Decoder
from ristcorr.encoder import apply_transform
from ristcorr.errors import InvalidArgument
from ristcorr.geometry import knn_graph, sample_uniform_rotation
from ristcorr.model import build_model


def rel(a, b):
    a, b = a.detach(), b.detach()
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def rotations(rng, n, dtype):
    return [torch.tensor(sample_uniform_rotation(rng).matrix, dtype=dtype) for _ in range(n)]


def equivariance_errors(model, pts, rots):
    """Worst relative errors of each component over ``rots`` (x -> x @ R.T)."""
    x = model.as_tensor(pts)
    other = model.as_tensor(np.roll(pts, 5, axis=0) * [1.1, 0.9, 1.0])
    with torch.no_grad():
        base, base_q = model.encode(x), model.encode(other)
        rec = model.self_reconstruct(base)
        cross = model.cross_reconstruct(base, base_q)
        worst = dict.fromkeys(["Z", "theta", "descriptors", "decoder", "cross_src", "cross_tgt"], 0.0)
        for R in rots:
            enc = model.encode(x @ R.T)
            enc_q = model.encode(other @ R.T)
            worst["Z"] = max(worst["Z"], rel(enc.Z, base.Z @ R.T))
            worst["theta"] = max(worst["theta"], rel(enc.theta, base.theta))
            worst["descriptors"] = max(worst["descriptors"], rel(enc.descriptors, base.descriptors @ R.T))
            worst["decoder"] = max(worst["decoder"], rel(model.self_reconstruct(enc), rec @ R.T))
            worst["cross_src"] = max(worst["cross_src"], rel(model.cross_reconstruct(enc, base_q), cross))
            worst["cross_tgt"] = max(worst["cross_tgt"], rel(model.cross_reconstruct(base, enc_q), cross @ R.T))
    return worst


class TestEquivariance:
    def test_double_precision(self, model, rng):
        worst = equivariance_errors(model, random_cloud(rng), rotations(rng, 100, torch.float64))
        assert worst["Z"] < 1e-8
        assert all(v < 1e-4 for v in worst.values()), worst

    def test_single_precision(self, model32, rng):
        worst = equivariance_errors(model32, random_cloud(rng), rotations(rng, 100, torch.float32))
        assert all(v < 1e-4 for v in worst.values()), worst

    def test_permutation(self, model, rng):
        pts = random_cloud(rng, 64)
        perm = rng.permutation(64)
        with torch.no_grad():
            a, b = model.encode(pts), model.encode(pts[perm])
        assert rel(b.Z, a.Z) < 1e-12
        assert rel(b.theta, a.theta[perm]) < 1e-12

    def test_z_is_nonzero_for_generic_shape(self, model, rng):
        with torch.no_grad():
            assert float(model.encode(random_cloud(rng)).Z.norm()) > 0


class TestEncoder:
    def test_shapes(self, model, rng):
        cfg = model.cfg.encoder
        enc = model.encode(random_cloud(rng, 40))
        assert enc.Z.shape == (cfg.C, 3)
        assert enc.theta.shape == (40, cfg.C_prime, cfg.C)
        assert enc.V_in.shape == (40, cfg.C_prime, 3)
        assert enc.descriptors.shape == (40, cfg.C_prime, 3)
        assert len(enc) == 40

    def test_coincident_points(self, model):
        enc = model.encode(np.ones((32, 3)))
        assert torch.isfinite(enc.theta).all() and torch.isfinite(enc.Z).all()

    def test_too_few_points(self, model):
        with pytest.raises(InvalidArgument):
            model.encode(np.zeros((model.cfg.encoder.k, 3)))

    def test_bad_shape(self, model):
        with pytest.raises(InvalidArgument):
            model.encode(np.zeros((10, 2)))

    def test_explicit_graph_matches_default(self, model, rng):
        pts = random_cloud(rng, 30)
        nbr = knn_graph(pts, model.cfg.encoder.k)
        x = model.as_tensor(pts)
        assert torch.equal(model.encoder(x).theta, model.encoder(x, nbr).theta)


def test_apply_transform_examples():
    Z = torch.arange(6.0).reshape(2, 3)
    assert torch.equal(apply_transform(torch.eye(2), Z), Z)
    swap = torch.tensor([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    assert torch.equal(apply_transform(swap, Z), torch.tensor([[3.0, 4, 5], [0, 1, 2], [3, 5, 7]]))
    batched = apply_transform(torch.stack([torch.eye(2), 2 * torch.eye(2)]), Z)
    assert torch.equal(batched[1], 2 * Z)
    with pytest.raises(InvalidArgument):
        apply_transform(torch.eye(3), Z)


class TestDecoder:
    def test_zero_maps_to_origin(self):
        dec = Decoder(DecoderConfig(4, (3,))).double()
        assert torch.equal(dec(torch.zeros(5, 4, 3, dtype=torch.float64)), torch.zeros(5, 3, dtype=torch.float64))

    def test_pointwise(self, rng):
        dec = Decoder(DecoderConfig(4, (6, 3))).double()
        D = torch.tensor(rng.normal(size=(10, 4, 3)))
        perm = torch.as_tensor(rng.permutation(10))
        assert torch.equal(dec(D[perm]), dec(D)[perm])

    def test_rejects_wrong_width(self):
        dec = Decoder(DecoderConfig(4, (3,)))
        with pytest.raises(InvalidArgument):
            dec(torch.zeros(5, 3, 3))

    def test_cross_with_wrong_descriptor(self, model, rng):
        enc = model.encode(random_cloud(rng, 20))
        with pytest.raises(InvalidArgument):
            model.cross_reconstruct(enc, torch.zeros(enc.Z.shape[0] + 1, 3, dtype=torch.float64))

    def test_self_is_cross_with_own_descriptor(self, model, rng):
        enc = model.encode(random_cloud(rng, 20))
        assert torch.equal(model.self_reconstruct(enc), model.cross_reconstruct(enc, enc))


def test_end_to_end_gradients(rng):
    cfg = ModelConfig(EncoderConfig(edge_channels=(2, 2, 2, 2), k=3, C=4, C_prime=2, mlp_hidden=6),
                      DecoderConfig(in_channels=2, hidden=(2,)))
    model = build_model(cfg, seed=3)
    pts = torch.tensor(random_cloud(rng, 16), requires_grad=True)
    nbr = knn_graph(pts.detach().numpy(), 3)
    probe = random_scalar_probe((16, 3), seed=1)

    def fn():
        return (model.decoder(model.encoder(pts, nbr).descriptors) * probe).sum()

    params = list(model.parameters())
    assert check_grads(fn, [pts]) < 1e-6
    assert check_grads(fn, params, joint=True) < 1e-6


def test_gradients_test_config(model, rng):
    pts = torch.tensor(random_cloud(rng, 16), requires_grad=True)
    rescale_head(model, pts.detach().numpy())
    nbr = knn_graph(pts.detach().numpy(), model.cfg.encoder.k)
    probe = random_scalar_probe((16, 3), seed=2)

    def fn():
        enc = model.encoder(pts, nbr)
        return (model.decoder(enc.descriptors) * probe).sum() + (enc.Z * probe[: enc.Z.shape[0]]).sum()

    assert check_grads(fn, [pts]) < 1e-6
    assert check_grads(fn, list(model.parameters()), joint=True, sample=24) < 1e-6
