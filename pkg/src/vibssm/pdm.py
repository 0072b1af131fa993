"""PCA subspaces of point distribution models and image-space outlier scoring."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vibssm import io


class DegenerateVarianceError(ValueError):
    pass


def _eig_centered(x):
    """Eigenpairs of the sample covariance of centred rows ``x``, descending.

    Uses the N x N Gram matrix when there are fewer rows than columns.
    """
    n, dim = x.shape
    if n < dim:
        gram = x @ x.T / (n - 1)
        vals, vecs = np.linalg.eigh(gram)
        vals, vecs = vals[::-1], vecs[:, ::-1]
        keep = vals > max(vals[0], 0.0) * 1e-12
        vals, vecs = vals[keep], vecs[:, keep]
        u = x.T @ vecs / np.sqrt((n - 1) * vals)
        # re-orthonormalise against round-off in the Gram route
        u, _ = np.linalg.qr(u)
    else:
        cov = x.T @ x / (n - 1)
        vals, u = np.linalg.eigh(cov)
        vals, u = vals[::-1], u[:, ::-1]
        keep = vals > max(vals[0], 0.0) * 1e-12
        vals, u = vals[keep], u[:, keep]
    # sign convention: largest-magnitude entry of each eigenvector is positive
    pivot = np.argmax(np.abs(u), axis=0)
    u = u * np.sign(u[pivot, np.arange(u.shape[1])])
    return vals, u


def select_dimension(eigenvalues, total_variance, threshold):
    """Smallest count whose cumulative variance fraction reaches ``threshold``."""
    frac = np.cumsum(eigenvalues) / total_variance
    return int(min(np.searchsorted(frac, threshold - 1e-12) + 1, len(eigenvalues)))


@dataclass(frozen=True, eq=False)
class PcaSubspace:
    mean: np.ndarray
    eigenvectors: np.ndarray  # (3M, L), orthonormal columns
    eigenvalues: np.ndarray  # (L,), descending
    total_variance: float
    variance_threshold: float = 0.95

    @property
    def L(self):
        return self.eigenvectors.shape[1]

    @property
    def dim(self):
        return self.mean.shape[0]

    def project(self, y):
        return project(self, y)

    def reconstruct(self, z):
        return reconstruct(self, z)

    def save(self, directory, **meta):
        d = Path(directory)
        io.write_array(d / "pca_mean.f32", self.mean)
        io.write_array(d / "pca_eigenvectors.f32", self.eigenvectors)
        io.write_json(d / "pca.json", {
            "schema_version": io.SCHEMA_VERSION,
            "L": self.L,
            "variance_threshold": self.variance_threshold,
            "eigenvalues": self.eigenvalues.tolist(),
            "total_variance": self.total_variance,
            **meta,
        })

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta = io.read_json(d / "pca.json")
        mean, _ = io.read_array(d / "pca_mean.f32")
        vecs, _ = io.read_array(d / "pca_eigenvectors.f32")
        return cls(mean=mean, eigenvectors=vecs, eigenvalues=np.array(meta["eigenvalues"]),
                   total_variance=meta["total_variance"], variance_threshold=meta["variance_threshold"])


def fit_pca(pdms, variance_threshold=0.95):
    """Fit a PCA subspace to an (N, 3M) PDM matrix keeping ``variance_threshold`` of the variance."""
    pdms = np.asarray(pdms, dtype=np.float64)
    if pdms.ndim != 2 or pdms.shape[0] < 2:
        raise ValueError("need an (N, 3M) matrix with N >= 2")
    if not 0 < variance_threshold <= 1:
        raise ValueError("variance_threshold must be in (0, 1]")
    mean = pdms.mean(axis=0)
    x = pdms - mean
    total = float(np.sum(x * x) / (x.shape[0] - 1))
    if total <= 1e-300 or not np.any(x):
        raise DegenerateVarianceError("all PDMs are identical; total variance is zero")
    vals, vecs = _eig_centered(x)
    L = select_dimension(vals, total, variance_threshold)
    return PcaSubspace(mean=mean, eigenvectors=vecs[:, :L].copy(), eigenvalues=vals[:L].copy(),
                       total_variance=total, variance_threshold=variance_threshold)


def project(subspace, y):
    """PCA scores ``U^T (y - mean)``; accepts a vector or a batch of rows."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != subspace.dim:
        raise ValueError(f"expected vectors of length {subspace.dim}, got {y.shape[-1]}")
    return (y - subspace.mean) @ subspace.eigenvectors


def reconstruct(subspace, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != subspace.L:
        raise ValueError(f"expected {subspace.L} scores, got {z.shape[-1]}")
    return z @ subspace.eigenvectors.T + subspace.mean


def downsample_stride(shape, max_dims=4096):
    """Smallest stride that brings a volume of ``shape`` to at most ``max_dims`` voxels."""
    stride = 1
    while np.prod([-(-n // stride) for n in shape]) > max_dims:
        stride += 1
    return stride


@dataclass(frozen=True, eq=False)
class ImageSubspace:
    """Image PCA for subspace outlier degrees (distance in and from feature space).

    ``rho`` is the mean of the discarded eigenvalues over the full residual
    dimension.  Degrees are standardised by the training raw-degree mean and
    standard deviation.
    """

    mean: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    rho: float
    stride: int
    image_shape: tuple
    degree_mean: float = 0.0
    degree_std: float = 1.0

    def vectorize(self, images):
        images = np.asarray(images, dtype=np.float64)
        if images.shape[-3:] != tuple(self.image_shape):
            raise ValueError(f"expected images of shape {self.image_shape}, got {images.shape[-3:]}")
        s = self.stride
        return images[..., ::s, ::s, ::s].reshape(*images.shape[:-3], -1)

    def distances(self, vectors):
        """(DIFS, DFFS) for already-vectorised images."""
        x = np.asarray(vectors, dtype=np.float64) - self.mean
        w = x @ self.eigenvectors
        resid = x - w @ self.eigenvectors.T
        difs = np.sum(w * w / self.eigenvalues, axis=-1)
        dffs = np.sum(resid * resid, axis=-1) / self.rho
        return difs, dffs

    def raw_degree(self, images):
        difs, dffs = self.distances(self.vectorize(images))
        return np.sqrt(difs + dffs)

    def save(self, directory):
        d = Path(directory)
        io.write_array(d / "image_mean.f32", self.mean)
        io.write_array(d / "image_eigenvectors.f32", self.eigenvectors)
        io.write_json(d / "image_subspace.json", {
            "schema_version": io.SCHEMA_VERSION,
            "eigenvalues": self.eigenvalues.tolist(),
            "rho": self.rho,
            "stride": self.stride,
            "image_shape": list(self.image_shape),
            "degree_mean": self.degree_mean,
            "degree_std": self.degree_std,
        })

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta = io.read_json(d / "image_subspace.json")
        mean, _ = io.read_array(d / "image_mean.f32")
        vecs, _ = io.read_array(d / "image_eigenvectors.f32")
        return cls(mean=mean, eigenvectors=vecs, eigenvalues=np.array(meta["eigenvalues"]), rho=meta["rho"],
                   stride=meta["stride"], image_shape=tuple(meta["image_shape"]),
                   degree_mean=meta["degree_mean"], degree_std=meta["degree_std"])


def fit_image_subspace(images, n_components=10, max_dims=4096):
    """Fit the outlier-scoring subspace on training images only."""
    images = np.asarray(images, dtype=np.float64)
    shape = images.shape[1:]
    stride = downsample_stride(shape, max_dims)
    x = images[:, ::stride, ::stride, ::stride].reshape(images.shape[0], -1)
    mean = x.mean(axis=0)
    xc = x - mean
    total = float(np.sum(xc * xc) / (x.shape[0] - 1))
    if total <= 0:
        raise DegenerateVarianceError("training images are identical")
    vals, vecs = _eig_centered(xc)
    q = min(n_components, len(vals) - 1)
    rho = (total - vals[:q].sum()) / (x.shape[1] - q)
    if rho <= 0:
        raise DegenerateVarianceError("no residual variance outside the retained image subspace")
    sub = ImageSubspace(mean=mean, eigenvectors=vecs[:, :q].copy(), eigenvalues=vals[:q].copy(), rho=float(rho),
                        stride=stride, image_shape=tuple(shape))
    raw = sub.raw_degree(images)
    return ImageSubspace(mean=mean, eigenvectors=sub.eigenvectors, eigenvalues=sub.eigenvalues, rho=sub.rho,
                         stride=stride, image_shape=tuple(shape), degree_mean=float(raw.mean()),
                         degree_std=float(raw.std(ddof=1)))


def outlier_degree(image_subspace, images):
    """Standardised outlier degree: ``(sqrt(DIFS + DFFS) - mean) / std`` over training images."""
    if image_subspace is None:
        raise ValueError("image subspace has not been fitted")
    raw = image_subspace.raw_degree(images)
    return (raw - image_subspace.degree_mean) / image_subspace.degree_std
