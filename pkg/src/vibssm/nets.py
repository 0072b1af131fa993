"""Encoders, decoders and losses of the four image-to-shape model variants.

All variants share a 3D convolutional encoder.  They differ in the encoder
head width, the decoder, and the loss:

* ``PCA_DET``      deterministic PCA scores, fixed linear PCA decoder, score MSE
* ``PPCA``         Gaussian over PCA scores, fixed PCA decoder, score NLL
* ``PPCA_OFFSET``  Gaussian scores plus a per-coordinate offset, PDM NLL plus an
                   aggregate-posterior KL
* ``VIB``          unsupervised Gaussian latent, trainable MLP decoder, VIB loss
"""

import enum
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
LOG_2PI = math.log(2 * math.pi)


class Variant(str, enum.Enum):
    PCA_DET = "PCA_DET"
    PPCA = "PPCA"
    PPCA_OFFSET = "PPCA_OFFSET"
    VIB = "VIB"

    @property
    def stochastic(self):
        return self is not Variant.PCA_DET

    @property
    def supervised(self):
        return self is not Variant.VIB


@dataclass
class EncoderSpec:
    channels: tuple = (4, 8, 16, 16, 32)
    kernels: tuple = (3, 3, 3, 3, 3)
    strides: tuple = (2, 2, 2, 2, 1)
    hidden: int = 128


@dataclass
class VariantSpec:
    kind: Variant = Variant.VIB
    beta: float = 0.01
    lam: float = 100.0
    n_posterior_samples: int = 30
    decoder_hidden: tuple = (64, 128)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)

    def __post_init__(self):
        self.kind = Variant(self.kind)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.encoder.items()})
        self.decoder_hidden = tuple(self.decoder_hidden)
        if self.n_posterior_samples < 1:
            raise ValueError("n_posterior_samples must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


class LatentGaussian:
    """Diagonal Gaussian over the latent code, parameterised by log-variance."""

    def __init__(self, mean, log_variance):
        self.mean = mean
        self.log_variance = log_variance

    @property
    def variance(self):
        return torch.exp(self.log_variance)


def _xavier(module):
    if isinstance(module, (nn.Conv3d, nn.Linear)):
        nn.init.xavier_normal_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class Encoder(nn.Module):
    """Five conv + batch-norm + PReLU stages followed by two fully connected layers."""

    def __init__(self, spec, image_shape, out_features):
        super().__init__()
        layers, c = [], 1
        for ch, k, s in zip(spec.channels, spec.kernels, spec.strides):
            layers += [nn.Conv3d(c, ch, k, stride=s, padding=k // 2), nn.BatchNorm3d(ch), nn.PReLU()]
            c = ch
        self.features = nn.Sequential(*layers)
        with torch.no_grad():
            n_flat = self.features(torch.zeros(2, 1, *image_shape)).reshape(2, -1).shape[1]
        self.fc = nn.Sequential(nn.Linear(n_flat, spec.hidden), nn.PReLU(), nn.Linear(spec.hidden, out_features))
        self.apply(_xavier)

    def forward(self, x):
        if x.dim() == 4:
            x = x.unsqueeze(1)
        return self.fc(self.features(x).flatten(1))


class FixedPcaDecoder(nn.Module):
    """Single linear layer with the PCA basis as weights and the mean shape as bias; never trained."""

    def __init__(self, eigenvectors, mean):
        super().__init__()
        dtype = torch.get_default_dtype()
        self.register_buffer("weight", torch.as_tensor(np.asarray(eigenvectors), dtype=dtype).clone())
        self.register_buffer("bias", torch.as_tensor(np.asarray(mean), dtype=dtype).clone())

    def forward(self, z):
        return z @ self.weight.T + self.bias


class MlpDecoder(nn.Module):
    """Three fully connected layers with PReLU activations between them."""

    def __init__(self, latent_dim, out_dim, hidden=(64, 128), init_mean=None):
        super().__init__()
        h1, h2 = hidden
        self.net = nn.Sequential(nn.Linear(latent_dim, h1), nn.PReLU(), nn.Linear(h1, h2), nn.PReLU(),
                                 nn.Linear(h2, out_dim))
        self.apply(_xavier)
        if init_mean is not None:
            with torch.no_grad():
                self.net[-1].bias.copy_(torch.as_tensor(np.asarray(init_mean)))

    def forward(self, z):
        return self.net(z)


class ShapeModel(nn.Module):
    def __init__(self, spec, image_shape, latent_dim, n_coords, subspace=None, init_mean=None):
        super().__init__()
        self.spec = spec
        self.image_shape = tuple(image_shape)
        self.latent_dim = latent_dim
        self.n_coords = n_coords
        kind = spec.kind
        width = {Variant.PCA_DET: latent_dim, Variant.PPCA: 2 * latent_dim,
                 Variant.PPCA_OFFSET: 2 * latent_dim + n_coords, Variant.VIB: 2 * latent_dim}[kind]
        self.encoder = Encoder(spec.encoder, image_shape, width)
        if kind.supervised:
            if subspace is not None:
                u, mean = subspace.eigenvectors, subspace.mean
            else:  # placeholder buffers, overwritten when loading a checkpoint
                u, mean = np.zeros((n_coords, latent_dim)), np.zeros(n_coords)
            self.decoder = FixedPcaDecoder(u, mean)
        else:
            if init_mean is None and subspace is not None:
                init_mean = subspace.mean
            self.decoder = MlpDecoder(latent_dim, n_coords, spec.decoder_hidden, init_mean)

    @property
    def kind(self):
        return self.spec.kind

    def encode(self, x):
        """Return ``(latent, offset)``; ``latent.log_variance`` is ``None`` for PCA_DET."""
        out = self.encoder(x)
        L = self.latent_dim
        if self.kind is Variant.PCA_DET:
            return LatentGaussian(out, None), None
        latent = LatentGaussian(out[:, :L], out[:, L:2 * L])
        offset = out[:, 2 * L:] if self.kind is Variant.PPCA_OFFSET else None
        return latent, offset

    def decode(self, z, offset=None):
        y = self.decoder(z)
        return y if offset is None else y + offset

    def predict_mean(self, x):
        """Deterministic point prediction, decoded at the latent mean."""
        latent, offset = self.encode(x)
        return self.decode(latent.mean, offset)

    def loss(self, x, y, z_pca=None, burnin=1.0, eps=None):
        """Effective training loss ``(1 - w) * PDM-MSE + w * variant loss``.

        The deterministic PCA_DET variant always uses its score MSE.
        ``eps`` optionally fixes the reparameterisation noise, shape (S, B, L).
        """
        latent, offset = self.encode(x)
        kind = self.kind
        if kind.supervised and z_pca is None:
            raise ValueError(f"{kind.value} needs ground-truth PCA scores")
        if kind is Variant.PCA_DET:
            return pca_det_loss(latent.mean, z_pca)
        det = pdm_mse(self.decode(latent.mean, offset), y)
        if burnin <= 0:
            return det
        if kind is Variant.PPCA:
            stoch = ppca_score_nll(latent, z_pca)
        elif kind is Variant.PPCA_OFFSET:
            stoch = ppca_offset_loss(latent, offset, self.decoder.weight, self.decoder.bias, y, self.spec.lam)
        else:
            if eps is None:
                eps = torch.randn(self.spec.n_posterior_samples, *latent.mean.shape, dtype=latent.mean.dtype)
            stoch = vib_loss(latent, y, self.decoder, self.spec.beta, eps)
        return (1 - burnin) * det + burnin * stoch


def reparameterize(latent, eps):
    """``mean + eps * exp(log_variance / 2)``; broadcasts over leading sample dims of ``eps``."""
    return latent.mean + eps * torch.exp(0.5 * latent.log_variance)


def kl_to_standard_normal(latent):
    """Per-sample ``KL(N(mean, var) || N(0, I))``, summed over latent dims."""
    mu, lv = latent.mean, latent.log_variance
    return 0.5 * torch.sum(mu * mu + (torch.expm1(lv) - lv), dim=-1)


def vib_loss(latent, y, decoder, beta, eps):
    """Monte Carlo VIB loss with a unit-variance Gaussian likelihood.

    Per sample: ``mean_eps 0.5 * ||y - f_d(z_eps)||^2 + beta * KL``, averaged
    over the batch.  ``eps`` has shape (S, B, L).
    """
    z = reparameterize(latent, eps)
    recon = 0.5 * torch.sum((y.unsqueeze(0) - decoder(z)) ** 2, dim=-1).mean(dim=0)
    loss = torch.mean(recon + beta * kl_to_standard_normal(latent))
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite VIB loss")
    return loss


def pca_det_loss(pred_scores, true_scores):
    if pred_scores.shape != true_scores.shape:
        raise ValueError(f"score shapes differ: {tuple(pred_scores.shape)} vs {tuple(true_scores.shape)}")
    return torch.mean((pred_scores - true_scores) ** 2)


def pdm_mse(pred, y):
    return torch.mean((pred - y) ** 2)


def ppca_score_nll(latent, z_pca):
    """Gaussian NLL of the true PCA scores, summed over dims and averaged over the batch."""
    lv = latent.log_variance
    nll = 0.5 * (LOG_2PI + lv) + (z_pca - latent.mean) ** 2 / (2 * torch.exp(lv))
    return nll.sum(dim=-1).mean()


def propagated_variance(basis, log_variance):
    """Per-coordinate variance ``sum_l U_il^2 sigma_l^2`` of a linear decoder."""
    return torch.exp(log_variance) @ (basis * basis).T


def aggregate_kl(latent):
    """KL of the moment-matched aggregate batch posterior to N(0, I)."""
    mu, var = latent.mean, torch.exp(latent.log_variance)
    if mu.shape[0] < 2:
        warnings.warn("aggregate posterior from a single sample; variance clamped at the floor", RuntimeWarning)
    agg_mu = mu.mean(dim=0)
    agg_var = torch.clamp(mu.var(dim=0, unbiased=False) + var.mean(dim=0), min=VARIANCE_FLOOR)
    return 0.5 * torch.sum(agg_mu ** 2 + (agg_var - 1.0 - torch.log(agg_var)))


def ppca_offset_loss(latent, offset, basis, mean, y, lam):
    """PDM NLL at the latent mean with diagonal propagated variance, plus ``lam`` times the aggregate KL."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    y_hat = latent.mean @ basis.T + mean
    if offset is not None:
        y_hat = y_hat + offset
    var = torch.clamp(propagated_variance(basis, latent.log_variance), min=VARIANCE_FLOOR)
    nll = 0.5 * (LOG_2PI + torch.log(var)) + (y - y_hat) ** 2 / (2 * var)
    loss = nll.sum(dim=-1).mean() + lam * aggregate_kl(latent)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite PPCA-offset loss")
    return loss


def gaussian_entropy(point_variance):
    """Sum over points of the entropy of each point's diagonal 3D Gaussian."""
    v = np.maximum(np.asarray(point_variance, dtype=np.float64), VARIANCE_FLOOR)
    return 0.5 * np.sum(np.log(2 * np.pi * np.e * v), axis=-1)


@dataclass
class ShapePrediction:
    points: np.ndarray  # (B, 3M)
    point_variance: np.ndarray  # (B, 3M)
    entropy: np.ndarray  # (B,)
    probabilistic: bool = True


@torch.no_grad()
def predict_with_uncertainty(model, x, n_samples=30, variance="sampled", generator=None):
    """Posterior-sampled prediction with per-coordinate variance and entropy.

    ``variance="closed_form"`` uses ``sum_l U_il^2 sigma_l^2`` for the fixed PCA
    decoders instead of the sample variance.
    """
    if variance not in ("sampled", "closed_form"):
        raise ValueError("variance must be 'sampled' or 'closed_form'")
    model.eval()
    x = torch.as_tensor(np.asarray(x), dtype=next(model.parameters()).dtype)
    latent, offset = model.encode(x)
    if model.kind is Variant.PCA_DET:
        points = model.decode(latent.mean).cpu().numpy().astype(np.float64)
        var = np.full_like(points, VARIANCE_FLOOR)
        return ShapePrediction(points, var, gaussian_entropy(var), probabilistic=False)
    if variance == "closed_form":
        if not model.kind.supervised:
            raise ValueError("closed-form variance needs a fixed linear decoder")
        eps = torch.randn(n_samples, *latent.mean.shape, generator=generator, dtype=latent.mean.dtype)
        points = model.decode(reparameterize(latent, eps)).mean(0)
        if offset is not None:
            points = points + offset
        var = propagated_variance(model.decoder.weight.to(latent.mean.dtype), latent.log_variance)
    else:
        if n_samples < 2:
            raise ValueError("sampled variance needs n_samples >= 2")
        eps = torch.randn(n_samples, *latent.mean.shape, generator=generator, dtype=latent.mean.dtype)
        samples = model.decode(reparameterize(latent, eps))
        if offset is not None:
            samples = samples + offset
        points = samples.mean(0)
        var = samples.var(0, unbiased=True)
    points = points.cpu().numpy().astype(np.float64)
    var = np.maximum(var.cpu().numpy().astype(np.float64), VARIANCE_FLOOR)
    return ShapePrediction(points, var, gaussian_entropy(var))


def save_checkpoint(path, model, **header):
    """Write ``<path>.pt`` (state dict) and ``<path>.json`` (architecture header)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path.with_suffix(".pt"))
    meta = {
        "variant": model.kind.value,
        "spec": model.spec.to_dict(),
        "image_shape": list(model.image_shape),
        "L": model.latent_dim,
        "n_coords": model.n_coords,
        "M": model.n_coords // 3,
        "beta": model.spec.beta,
        "lam": model.spec.lam,
        **header,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    spec = VariantSpec(**meta["spec"])
    model = ShapeModel(spec, meta["image_shape"], meta["L"], meta["n_coords"])
    model.load_state_dict(torch.load(path.with_suffix(".pt"), weights_only=True))
    model.eval()
    return model, meta
