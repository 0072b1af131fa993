import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vibssm import nets, pdm
from vibssm.nets import (
    VARIANCE_FLOOR,
    LatentGaussian,
    Variant,
    VariantSpec,
    aggregate_kl,
    kl_to_standard_normal,
    pca_det_loss,
    ppca_offset_loss,
    ppca_score_nll,
    predict_with_uncertainty,
    reparameterize,
    vib_loss,
)


@pytest.fixture(autouse=True, scope="module")
def _float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


T = lambda *a: torch.tensor(a, dtype=torch.float64)  # noqa: E731


def _lat(mu, lv):
    return LatentGaussian(torch.as_tensor(mu, dtype=torch.float64), torch.as_tensor(lv, dtype=torch.float64))


def test_reparameterize_trivial():
    lat = _lat([[1.0, -2.0]], [[0.3, -0.4]])
    assert torch.equal(reparameterize(lat, torch.zeros(1, 2)), lat.mean)
    lat0 = _lat([[1.0, -2.0]], [[0.0, 0.0]])
    assert torch.equal(reparameterize(lat0, T([1.0, 0.0])[None]), T([2.0, -2.0])[None])


def test_reparameterize_monte_carlo_variance():
    lv = T(-1.0, 0.0, 0.7)
    lat = _lat(torch.zeros(3), lv)
    eps = torch.randn(100_000, 3, generator=torch.Generator().manual_seed(0))
    var = reparameterize(lat, eps).var(0)
    np.testing.assert_allclose(var.numpy(), np.exp(lv.numpy()), rtol=0.03)


def test_reparameterize_differentiable():
    mu = torch.zeros(1, 2, requires_grad=True)
    lv = torch.zeros(1, 2, requires_grad=True)
    reparameterize(LatentGaussian(mu, lv), torch.ones(1, 2)).sum().backward()
    np.testing.assert_allclose(mu.grad.numpy(), 1.0)
    np.testing.assert_allclose(lv.grad.numpy(), 0.5)


def test_kl_closed_form_values():
    assert kl_to_standard_normal(_lat([0.0], [0.0])).item() == 0.0
    assert math.isclose(kl_to_standard_normal(_lat([1.0], [0.0])).item(), 0.5, rel_tol=1e-12)
    assert math.isclose(kl_to_standard_normal(_lat([0.0], [1.0])).item(), 0.5 * (math.e - 2), rel_tol=1e-12)
    assert math.isclose(0.5 * (math.e - 2), 0.35914, rel_tol=1e-5)


def test_kl_nonnegative_random():
    g = torch.Generator().manual_seed(1)
    lat = _lat(torch.randn(10_000, 4, generator=g) * 2, torch.randn(10_000, 4, generator=g) * 2)
    kl = kl_to_standard_normal(lat)
    assert kl.shape == (10_000,) and torch.all(kl > 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_kl_zero_only_at_standard_normal(mu, lv):
    kl = kl_to_standard_normal(_lat([mu], [lv])).item()
    assert kl >= 0
    if abs(mu) > 1e-3 or abs(lv) > 1e-3:
        assert kl > 0


def test_pca_det_loss_values():
    assert pca_det_loss(T(1.0, 2.0)[None], T(1.0, 2.0)[None]).item() == 0.0
    assert pca_det_loss(T(1.0, -1.0)[None], T(0.0, 0.0)[None]).item() == 1.0
    a, b = torch.randn(5, 3), torch.randn(5, 3)
    perm = torch.randperm(5)
    assert math.isclose(pca_det_loss(a, b).item(), pca_det_loss(a[perm], b[perm]).item(), rel_tol=1e-14)
    with pytest.raises(ValueError):
        pca_det_loss(torch.zeros(1, 2), torch.zeros(1, 3))


def test_ppca_nll_values():
    L = 4
    z = torch.randn(3, L)
    np.testing.assert_allclose(ppca_score_nll(_lat(z, torch.zeros(3, L)), z).item(), L / 2 * math.log(2 * math.pi),
                               rtol=1e-12)
    v = ppca_score_nll(_lat([[0.0]], [[0.0]]), T(1.0)[None]).item()
    assert math.isclose(v, 0.5 * math.log(2 * math.pi) + 0.5, rel_tol=1e-12)
    assert math.isclose(v, 1.41894, rel_tol=1e-5)


def test_ppca_nll_minimum_at_squared_residual():
    r = 1.7
    lvs = np.linspace(-3, 3, 2001)
    vals = [ppca_score_nll(_lat([[0.0]], [[lv]]), T(r)[None]).item() for lv in lvs]
    best = lvs[int(np.argmin(vals))]
    np.testing.assert_allclose(math.exp(best), r * r, rtol=5e-3)


class _Identity(torch.nn.Module):
    def forward(self, z):
        return z


def test_vib_toy_expectation():
    lat = _lat([[1.0]], [[0.0]])
    eps = torch.randn(200_000, 1, 1, generator=torch.Generator().manual_seed(2))
    loss = vib_loss(lat, T(1.0)[None], _Identity(), 0.01, eps).item()
    # 0.5 * E[(1 - z)^2] + 0.01 * 0.5; the MC std of the first term is ~0.0016
    assert abs(loss - 0.505) < 0.006


def test_vib_degenerate_sampling_and_perfect_decoder():
    mu, lv = torch.randn(4, 3), torch.full((4, 3), -80.0)
    lat = _lat(mu, lv)
    dec = torch.nn.Linear(3, 5)
    y = torch.randn(4, 5)
    eps = torch.randn(30, 4, 3)
    multi = vib_loss(lat, y, dec, 0.2, eps).item()
    single = (0.5 * ((y - dec(mu)) ** 2).sum(-1) + 0.2 * kl_to_standard_normal(lat)).mean().item()
    assert math.isclose(multi, single, rel_tol=1e-10)
    lat2 = _lat(torch.zeros(2, 1), torch.zeros(2, 1))
    const = lambda z: torch.zeros(*z.shape[:-1], 2)  # noqa: E731
    assert vib_loss(lat2, torch.zeros(2, 2), const, 0.0, torch.randn(7, 2, 1)).item() == 0.0


def test_vib_affine_in_beta():
    lat = _lat(torch.randn(3, 2), torch.randn(3, 2))
    dec = torch.nn.Linear(2, 6)
    y, eps = torch.randn(3, 6), torch.randn(10, 3, 2)
    betas = [0.0, 0.01, 0.5]
    vals = [vib_loss(lat, y, dec, b, eps).item() for b in betas]
    slope = kl_to_standard_normal(lat).mean().item()
    assert slope > 0
    for b, v in zip(betas, vals):
        np.testing.assert_allclose(v, vals[0] + b * slope, rtol=1e-12)


def test_vib_nonfinite_raises():
    lat = _lat([[float("nan")]], [[0.0]])
    with pytest.raises(FloatingPointError):
        vib_loss(lat, T(1.0)[None], _Identity(), 0.01, torch.randn(2, 1, 1))


def test_aggregate_kl_vanishes_for_standard_batch():
    g = torch.Generator().manual_seed(3)
    vals = []
    for n in (10, 1000, 100_000):
        lat = _lat(torch.randn(n, 3, generator=g), torch.full((n, 3), math.log(1e-9)))
        # means ~ N(0, 1) with tiny variances, so the aggregate ~ N(0, 1)
        vals.append(aggregate_kl(lat).item())
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-3


def test_aggregate_kl_differs_from_per_sample_kl():
    lat = _lat(torch.randn(64, 2, generator=torch.Generator().manual_seed(4)), torch.full((64, 2), -6.0))
    assert aggregate_kl(lat).item() < 0.2 < kl_to_standard_normal(lat).mean().item()


def test_aggregate_kl_single_sample_warns():
    with pytest.warns(RuntimeWarning):
        v = aggregate_kl(_lat([[0.0, 0.0]], [[-1e9, 0.0]]))
    assert torch.isfinite(v)


def test_ppca_offset_pure_variance_penalty():
    rng = np.random.default_rng(0)
    U = torch.as_tensor(np.linalg.qr(rng.normal(size=(9, 3)))[0])
    mean = torch.as_tensor(rng.normal(size=9))
    z = torch.randn(5, 3)
    lv = torch.randn(5, 3) * 0.3
    y = z @ U.T + mean
    lat = _lat(z, lv)
    got = ppca_offset_loss(lat, torch.zeros(5, 9), U, mean, y, 0.0).item()
    var = nets.propagated_variance(U, lv)
    expect = (0.5 * torch.log(2 * math.pi * var)).sum(-1).mean().item()
    np.testing.assert_allclose(got, expect, rtol=1e-12)
    with_kl = ppca_offset_loss(lat, torch.zeros(5, 9), U, mean, y, 100.0).item()
    np.testing.assert_allclose(with_kl, expect + 100 * aggregate_kl(lat).item(), rtol=1e-12)
    with pytest.raises(ValueError):
        ppca_offset_loss(lat, None, U, mean, y, -1.0)


def _tiny_spec(kind):
    from vibssm.nets import EncoderSpec

    return VariantSpec(kind=kind, encoder=EncoderSpec(channels=(2, 2, 2, 2, 2), hidden=8), decoder_hidden=(8, 8))


@pytest.fixture(scope="module")
def toy_subspace():
    rng = np.random.default_rng(0)
    return pdm.fit_pca(rng.normal(size=(20, 3)) @ rng.normal(size=(3, 12)) + rng.normal(size=12), 0.999)


@pytest.mark.parametrize("kind", list(Variant))
def test_head_widths_and_shapes(kind, toy_subspace):
    torch.manual_seed(0)
    model = nets.ShapeModel(_tiny_spec(kind), (16, 16, 16), toy_subspace.L, 12, subspace=toy_subspace)
    L = toy_subspace.L
    width = {"PCA_DET": L, "PPCA": 2 * L, "PPCA_OFFSET": 2 * L + 12, "VIB": 2 * L}[kind.value]
    assert model.encoder.fc[-1].out_features == width
    x = torch.randn(3, 16, 16, 16)
    latent, offset = model.encode(x)
    assert latent.mean.shape == (3, L)
    assert (offset is not None) == (kind is Variant.PPCA_OFFSET)
    assert model.predict_mean(x).shape == (3, 12)
    assert isinstance(model.encoder.features[2], torch.nn.PReLU)
    if kind.supervised:
        assert not any(p is model.decoder.weight for p in model.parameters())


def test_pca_det_prediction_flagged(toy_subspace):
    model = nets.ShapeModel(_tiny_spec("PCA_DET"), (16, 16, 16), toy_subspace.L, 12, subspace=toy_subspace)
    pred = predict_with_uncertainty(model, np.random.default_rng(0).normal(size=(2, 16, 16, 16)))
    assert not pred.probabilistic
    assert np.all(pred.point_variance == VARIANCE_FLOOR)
    np.testing.assert_allclose(pred.entropy, 12 * 0.5 * np.log(2 * np.pi * np.e * VARIANCE_FLOOR))


class _FixedLatent(torch.nn.Module):
    """Stands in for an encoder that always returns one mean/log-variance pair."""

    def __init__(self, mu, lv, extra=0):
        super().__init__()
        self.out = torch.nn.Parameter(torch.cat([mu, lv, torch.zeros(extra)]))

    def forward(self, x):
        return self.out.expand(x.shape[0], -1)


def _linear_model(kind, subspace, lv):
    model = nets.ShapeModel(_tiny_spec(kind), (16, 16, 16), subspace.L, 12, subspace=subspace)
    extra = 12 if kind == "PPCA_OFFSET" else 0
    model.encoder = _FixedLatent(torch.zeros(subspace.L), torch.as_tensor(lv, dtype=torch.float64), extra)
    return model.double()


def test_zero_variance_linear_decoder_at_floor(toy_subspace):
    model = _linear_model("PPCA", toy_subspace, np.full(toy_subspace.L, -200.0))
    pred = predict_with_uncertainty(model, np.zeros((1, 16, 16, 16)), n_samples=30)
    assert np.all(pred.point_variance == VARIANCE_FLOOR)
    np.testing.assert_allclose(pred.points[0], toy_subspace.mean, atol=1e-12)


@pytest.mark.parametrize("kind", ["PPCA", "PPCA_OFFSET"])
def test_linear_propagation_oracle(kind, toy_subspace):
    lv = np.log([2.0, 0.5, 0.1])
    model = _linear_model(kind, toy_subspace, lv)
    gen = torch.Generator().manual_seed(0)
    sampled = predict_with_uncertainty(model, np.zeros((1, 16, 16, 16)), n_samples=10_000, generator=gen)
    closed = predict_with_uncertainty(model, np.zeros((1, 16, 16, 16)), n_samples=10, variance="closed_form")
    oracle = (toy_subspace.eigenvectors ** 2) @ np.exp(lv)
    np.testing.assert_allclose(closed.point_variance[0], oracle, rtol=1e-6)
    rel = np.abs(sampled.point_variance[0] - oracle) / oracle
    assert np.mean(rel < 0.15) >= 0.95


def test_predict_errors(toy_subspace):
    model = _linear_model("PPCA", toy_subspace, np.zeros(toy_subspace.L))
    x = np.zeros((1, 16, 16, 16))
    with pytest.raises(ValueError):
        predict_with_uncertainty(model, x, n_samples=1)
    with pytest.raises(ValueError):
        predict_with_uncertainty(model, x, variance="exact")
    vib = nets.ShapeModel(_tiny_spec("VIB"), (16, 16, 16), 3, 12)
    with pytest.raises(ValueError):
        predict_with_uncertainty(vib, x, variance="closed_form")


def test_entropy_diagonal_gaussian():
    var = np.array([[1.0, 2.0, 3.0, 0.5, 0.5, 0.5]])
    expect = 0.5 * np.log((2 * np.pi * np.e) ** 3 * 6.0) + 0.5 * np.log((2 * np.pi * np.e) ** 3 * 0.125)
    np.testing.assert_allclose(nets.gaussian_entropy(var), [expect], rtol=1e-12)


@pytest.mark.parametrize("kind", list(Variant))
def test_checkpoint_roundtrip(tmp_path, kind, toy_subspace):
    torch.manual_seed(1)
    model = nets.ShapeModel(_tiny_spec(kind), (16, 16, 16), toy_subspace.L, 12, subspace=toy_subspace)
    model.eval()
    nets.save_checkpoint(tmp_path / "ckpt", model, epoch=3)
    back, meta = nets.load_checkpoint(tmp_path / "ckpt")
    assert meta["variant"] == kind.value and meta["epoch"] == 3 and meta["M"] == 4
    x = torch.randn(2, 16, 16, 16)
    with torch.no_grad():
        np.testing.assert_array_equal(model.predict_mean(x).numpy(), back.predict_mean(x).numpy())


def test_variant_spec_validation():
    with pytest.raises(ValueError):
        VariantSpec(kind="VIB", n_posterior_samples=0)
    with pytest.raises(ValueError):
        VariantSpec(kind="GAN")
    assert VariantSpec().beta == 0.01 and VariantSpec().lam == 100.0 and VariantSpec().n_posterior_samples == 30
