"""Synthetic shape populations with exact correspondences and noisy image volumes.

Shapes are star-shaped surfaces around the origin.  A unit direction ``d`` maps
to the surface point ``s(d) * (radii * d)`` where the radial scale

    s(d) = 1 + sum_k p_k h_k(d)

is linear in the generative parameters ``p``; ``h_k`` are low-order polynomial
angular functions.  Correspondence point ``j`` is the image of the fixed
direction ``base_directions[j]``, so the point set is an exact linear function
of ``p`` and a PDM of the population lies in a ``K``-dimensional affine
subspace.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import erfc
from sklearn.cluster import KMeans

from vibssm import io, kernels

log = logging.getLogger(__name__)

# (name, [(coefficient, (ex, ey, ez)), ...]); every function is bounded by 1 on the sphere
ANGULAR_BASIS = [
    ("size", [(1.0, (0, 0, 0))]),
    ("elongation_z", [(1.5, (0, 0, 2)), (-0.5, (0, 0, 0))]),
    ("anisotropy_xy", [(1.0, (2, 0, 0)), (-1.0, (0, 2, 0))]),
    ("bulge_x", [(1.0, (1, 0, 0))]),
    ("shear_xz", [(2.0, (1, 0, 1))]),
    ("shear_yz", [(2.0, (0, 1, 1))]),
    ("shear_xy", [(2.0, (1, 1, 0))]),
    ("bulge_y", [(1.0, (0, 1, 0))]),
    ("bulge_z", [(1.0, (0, 0, 1))]),
    ("trefoil_x", [(1.0, (3, 0, 0)), (-3.0, (1, 2, 0))]),
    ("trefoil_y", [(3.0, (2, 1, 0)), (-1.0, (0, 3, 0))]),
    ("cubic_z", [(2.5, (0, 0, 3)), (-1.5, (0, 0, 1))]),
]

DEFAULT_RADII = (8.0, 6.5, 5.5)
DEFAULT_MODE_SCALES = (0.06, 0.13, 0.10, 0.085, 0.09, 0.09)


class ShapeExceedsGridError(ValueError):
    pass


def fibonacci_sphere(n):
    """``n`` near-uniform unit vectors on the sphere (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@dataclass(frozen=True, eq=False)
class ShapeFamily:
    radii: np.ndarray
    mode_scales: np.ndarray
    base_directions: np.ndarray
    exponents: np.ndarray  # (T, 3) monomial exponents
    coefficients: np.ndarray  # (K, T) monomial weights of each mode
    mode_names: tuple

    @classmethod
    def create(cls, n_points=128, n_modes=6, radii=DEFAULT_RADII, mode_scales=None):
        if n_points < 8:
            raise ValueError(f"need at least 8 correspondence points, got {n_points}")
        if not 0 < n_modes < n_points or n_modes > len(ANGULAR_BASIS):
            raise ValueError(f"n_modes must be in [1, {min(len(ANGULAR_BASIS), n_points - 1)}]")
        radii = np.asarray(radii, dtype=np.float64)
        if radii.shape != (3,) or np.any(radii <= 0):
            raise ValueError("radii must be three positive lengths")
        if mode_scales is None:
            extra = [DEFAULT_MODE_SCALES[-1]] * max(0, n_modes - len(DEFAULT_MODE_SCALES))
            mode_scales = (list(DEFAULT_MODE_SCALES) + extra)[:n_modes]
        mode_scales = np.asarray(mode_scales, dtype=np.float64)
        if mode_scales.shape != (n_modes,) or np.any(mode_scales < 0):
            raise ValueError("mode_scales must be K non-negative standard deviations")
        chosen = ANGULAR_BASIS[:n_modes]
        monos = sorted({e for _, terms in chosen for _, e in terms})
        coefs = np.zeros((n_modes, len(monos)))
        for k, (_, terms) in enumerate(chosen):
            for c, e in terms:
                coefs[k, monos.index(e)] += c
        return cls(
            radii=radii,
            mode_scales=mode_scales,
            base_directions=fibonacci_sphere(n_points),
            exponents=np.array(monos, dtype=np.int64),
            coefficients=coefs,
            mode_names=tuple(name for name, _ in chosen),
        )

    @property
    def n_points(self):
        return self.base_directions.shape[0]

    @property
    def n_modes(self):
        return self.coefficients.shape[0]

    @property
    def base(self):
        return self.radii * self.base_directions

    @cached_property
    def mode_basis(self):
        """(K, M, 3) displacement fields ``h_k(d_j) * radii * d_j``."""
        h = self._angular(self.base_directions)  # (M, K)
        return h.T[:, :, None] * self.base[None]

    def _angular(self, dirs):
        out = np.empty((dirs.shape[0], self.n_modes))
        for k in range(self.n_modes):
            s, _ = kernels.radial_scale(dirs, self.exponents, self.coefficients[k])
            out[:, k] = s - 1.0
        return out

    def surface_coefficients(self, p):
        """Monomial weights of the radial scale ``s(d) - 1`` for parameters ``p``."""
        p = _check_params(self, p)
        return p @ self.coefficients

    def surface_points(self, dirs, p):
        """Surface points along arbitrary unit directions (rows of ``dirs``)."""
        s, _ = kernels.radial_scale(np.asarray(dirs, dtype=np.float64), self.exponents, self.surface_coefficients(p))
        return s[:, None] * self.radii * dirs

    def describe(self):
        return {
            "radii": self.radii.tolist(),
            "mode_scales": self.mode_scales.tolist(),
            "mode_names": list(self.mode_names),
            "n_points": self.n_points,
            "n_modes": self.n_modes,
            "base_directions": "fibonacci_sphere",
        }


def _check_params(family, p):
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (family.n_modes,):
        raise ValueError(f"expected {family.n_modes} shape parameters, got shape {p.shape}")
    return p


def sample_shape_params(family, seed):
    if seed < 0:
        raise ValueError("seed must be non-negative")
    rng = np.random.default_rng(seed)
    return rng.standard_normal(family.n_modes) * family.mode_scales


def correspondence_points(family, p):
    """(M, 3) correspondence coordinates, ``base + sum_k p_k * mode_basis[k]``."""
    p = _check_params(family, p)
    return family.base + np.tensordot(p, family.mode_basis, axes=1)


def voxel_centres(grid, spacing=1.0):
    """World coordinates of voxel centres, shape ``grid + (3,)``, centred on the origin."""
    axes = [(np.arange(n) - (n - 1) / 2.0) * spacing for n in grid]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def voxelize_image(family, p, grid=(32, 32, 32), noise_level=0.0, seed=0, *, spacing=1.0,
                   background=0.5, contrast=1.0, width=1.5):
    """Render a soft-edged, noisy intensity volume of shape ``grid``.

    Occupancy is ``0.5 * erfc(sdf / width)`` of the (first-order) signed
    distance to the surface, so it saturates within ~2 widths of the boundary.
    """
    grid = tuple(int(n) for n in grid)
    if len(grid) != 3 or min(grid) < 16:
        raise ValueError(f"grid must have three dimensions of at least 16 voxels, got {grid}")
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    coef = family.surface_coefficients(p)
    dense = fibonacci_sphere(2048)
    s, _ = kernels.radial_scale(dense, family.exponents, coef)
    if s.min() <= 0.05:
        raise ShapeExceedsGridError("shape parameters fold the surface through its centre")
    extent = np.abs(s[:, None] * family.radii * dense).max(axis=0)
    limit = (np.array(grid) - 1) / 2.0 * spacing - 2.0 * spacing
    if np.any(extent > limit):
        raise ShapeExceedsGridError(f"shape extent {extent.round(2)} exceeds grid limit {limit}")
    coords = voxel_centres(grid, spacing).reshape(-1, 3)
    sdf = kernels.implicit_sdf(coords, family.radii, family.exponents, coef)
    occupancy = 0.5 * erfc(sdf / width)
    image = background + contrast * occupancy.reshape(grid)
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        image = image + noise_level * rng.standard_normal(grid)
    return image


OUTLIER_MODES = ("exposure", "bias_field", "artifact")


def bias_field(shape, severity, seed, *, amplitude=1.5, max_frequency=1, n_terms=2):
    """Smooth positive multiplicative field ``exp(severity * amplitude * c(x))``, ``|c| <= 1``."""
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    idx = np.stack(np.meshgrid(*[np.arange(n) / n for n in shape], indexing="ij"), axis=-1)
    weights = rng.uniform(0.5, 1.0, n_terms)
    weights /= weights.sum()
    log_field = np.zeros(shape)
    for w in weights:
        k = np.zeros(3)
        while not np.any(k):
            k = rng.integers(-max_frequency, max_frequency + 1, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        log_field += w * np.cos(2 * np.pi * idx @ k + phase)
    return np.exp(severity * amplitude * log_field)


def bias_field_gradient_bound(shape, severity, *, amplitude=1.5, max_frequency=1):
    """Upper bound on the per-voxel Euclidean gradient of :func:`bias_field`."""
    lam = severity * amplitude
    return np.exp(lam) * lam * 2 * np.pi * max_frequency * np.sqrt(3) / min(shape)


def corrupt_outlier(volume, mode, severity=1.0, seed=0, *, exposure_level=1.5,
                    artifact_radius=8.0, artifact_level=3.0):
    """Apply an outlier corruption; the output has the input's shape.

    ``exposure`` brightens and flattens contrast, ``bias_field`` multiplies by a
    smooth positive field, ``artifact`` blends a random sphere or slab towards a
    constant (fully overwritten once ``severity >= 1``).
    """
    if severity <= 0:
        raise ValueError("severity must be positive")
    volume = np.asarray(volume, dtype=np.float64)
    if mode == "exposure":
        gamma = 1.0 / (1.0 + severity)
        remapped = np.sign(volume) * np.abs(volume) ** gamma
        return remapped / (1.0 + severity) + exposure_level * severity / (1.0 + severity)
    if mode == "bias_field":
        return volume * bias_field(volume.shape, severity, seed)
    if mode == "artifact":
        rng = np.random.default_rng(seed)
        coords = np.stack(np.meshgrid(*[np.arange(n) for n in volume.shape], indexing="ij"), axis=-1)
        centre = rng.uniform(0.25, 0.75, 3) * (np.array(volume.shape) - 1)
        if rng.random() < 0.5:
            mask = np.linalg.norm(coords - centre, axis=-1) < artifact_radius
        else:
            axis = rng.integers(3)
            mask = np.abs(coords[..., axis] - centre[axis]) < artifact_radius / 2.0
        alpha = min(severity, 1.0)
        out = volume.copy()
        out[mask] = (1 - alpha) * volume[mask] + alpha * artifact_level
        return out
    raise ValueError(f"unknown outlier mode {mode!r}; expected one of {OUTLIER_MODES}")


@dataclass(eq=False)
class ShapeSample:
    id: str
    p: np.ndarray
    points: np.ndarray
    image: np.ndarray
    noise_level: float
    is_outlier: bool = False
    outlier_mode: str | None = None
    outlier_degree: float = float("nan")


@dataclass
class DatasetConfig:
    n_train: int = 200
    n_val: int = 30
    n_inlier_test: int = 30
    n_outlier_test: int = 20
    seed: int = 0
    grid: tuple = (32, 32, 32)
    n_points: int = 128
    n_modes: int = 6
    radii: tuple = DEFAULT_RADII
    mode_scales: tuple | None = None
    noise_range: tuple = (0.02, 0.4)
    outlier_severity: float = 1.0
    outlier_modes: tuple = OUTLIER_MODES
    background: float = 0.5
    contrast: float = 1.0
    width: float = 1.5

    def validate(self):
        errors = []
        for name in ("n_train", "n_val", "n_inlier_test", "n_outlier_test"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                errors.append(f"{name}: must be a non-negative integer, got {v!r}")
        if isinstance(self.n_train, int) and 0 <= self.n_train < 2:
            errors.append("n_train: need at least 2 training samples")
        if isinstance(self.n_val, int) and 0 <= self.n_val < 1:
            errors.append("n_val: need at least 1 validation sample")
        lo, hi = self.noise_range
        if not 0 <= lo <= hi:
            errors.append(f"noise_range: need 0 <= low <= high, got {self.noise_range}")
        if self.outlier_severity <= 0:
            errors.append("outlier_severity: must be positive")
        for m in self.outlier_modes:
            if m not in OUTLIER_MODES:
                errors.append(f"outlier_modes: unknown mode {m!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            errors.append("seed: must be a non-negative integer")
        return errors

    def family(self):
        return ShapeFamily.create(self.n_points, self.n_modes, self.radii, self.mode_scales)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known) - {"schema_version"})
        if unknown:
            raise ValueError(f"unknown dataset config fields: {unknown}")
        for key in ("grid", "radii", "mode_scales", "noise_range", "outlier_modes"):
            if known.get(key) is not None:
                known[key] = tuple(known[key])
        return cls(**known)


@dataclass
class DatasetManifest:
    family: dict
    partitions: dict
    seed: int
    grid: tuple
    n_points: int
    n_modes: int
    config: dict = field(default_factory=dict)
    schema_version: int = io.SCHEMA_VERSION

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        return cls(**d)


PARTITIONS = ("train", "val", "inlier_test", "outlier_test")


def _sample_seed(seed, index):
    return np.random.SeedSequence(entropy=seed, spawn_key=(index,))


def make_sample(config, family, index, is_outlier):
    children = _sample_seed(config.seed, index).spawn(4)
    shape_seed, noise_seed, img_seed, corrupt_seed = (int(c.generate_state(1)[0]) for c in children)
    p = sample_shape_params(family, shape_seed)
    lo, hi = config.noise_range
    noise = float(np.random.default_rng(noise_seed).uniform(lo, hi))
    image = voxelize_image(family, p, config.grid, noise, img_seed, background=config.background,
                           contrast=config.contrast, width=config.width)
    mode = None
    if is_outlier:
        rng = np.random.default_rng(corrupt_seed)
        mode = str(config.outlier_modes[rng.integers(len(config.outlier_modes))])
        image = corrupt_outlier(image, mode, config.outlier_severity, int(rng.integers(2**31)))
    return ShapeSample(
        id=f"s{index:04d}", p=p, points=correspondence_points(family, p), image=image.astype(np.float32),
        noise_level=noise, is_outlier=is_outlier, outlier_mode=mode,
    )


def _make_and_save(args):
    config, family, index, is_outlier, root = args
    sample = make_sample(config, family, index, is_outlier)
    save_sample(root, sample)
    return sample.id


def save_sample(root, sample):
    d = Path(root) / "samples" / sample.id
    meta = {"p": sample.p.tolist(), "noise_level": sample.noise_level, "is_outlier": sample.is_outlier,
            "outlier_mode": sample.outlier_mode}
    io.write_array(d / "points.f32", sample.points, layout="M x 3 row-major", **meta)
    H, W, D = sample.image.shape
    io.write_array(d / "image.f32", np.transpose(sample.image, (2, 1, 0)), layout="D,W,H (D slowest)",
                   grid=[H, W, D])


def load_sample(root, sample_id):
    d = Path(root) / "samples" / sample_id
    points, meta = io.read_array(d / "points.f32")
    image, _ = io.read_array(d / "image.f32")
    return ShapeSample(
        id=sample_id, p=np.array(meta["p"]), points=points, image=np.transpose(image, (2, 1, 0)).astype(np.float32),
        noise_level=meta["noise_level"], is_outlier=meta["is_outlier"], outlier_mode=meta["outlier_mode"],
    )


def generate_dataset(config, out_dir, workers=1):
    """Generate, persist and index a full dataset; returns the manifest."""
    errors = config.validate()
    if errors:
        raise ValueError("invalid dataset config: " + "; ".join(errors))
    family = config.family()
    counts = [config.n_train, config.n_val, config.n_inlier_test, config.n_outlier_test]
    partitions, jobs, start = {}, [], 0
    for name, n in zip(PARTITIONS, counts):
        partitions[name] = [f"s{i:04d}" for i in range(start, start + n)]
        jobs += [(config, family, i, name == "outlier_test", out_dir) for i in range(start, start + n)]
        start += n
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            list(ex.map(_make_and_save, jobs, chunksize=8))
    else:
        for job in jobs:
            _make_and_save(job)
    cfg = asdict(config)
    manifest = DatasetManifest(family=family.describe(), partitions=partitions, seed=config.seed,
                               grid=tuple(config.grid), n_points=config.n_points, n_modes=config.n_modes,
                               config=cfg)
    io.write_json(Path(out_dir) / "manifest.json", manifest.to_dict())
    log.info("generated %d samples in %s", start, out_dir)
    return manifest


class Dataset:
    """A generated dataset loaded into memory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = DatasetManifest.from_dict(io.read_json(self.root / "manifest.json"))
        self.config = DatasetConfig.from_dict(self.manifest.config)
        self.family = self.config.family()
        self._cache = {}

    def ids(self, *partitions):
        return [i for part in partitions for i in self.manifest.partitions[part]]

    def sample(self, sample_id):
        if sample_id not in self._cache:
            self._cache[sample_id] = load_sample(self.root, sample_id)
        return self._cache[sample_id]

    def pdms(self, ids):
        return np.stack([self.sample(i).points.reshape(-1) for i in ids])

    def images(self, ids):
        return np.stack([self.sample(i).image for i in ids])

    def partition_of(self, sample_id):
        for name, ids in self.manifest.partitions.items():
            if sample_id in ids:
                return name
        raise KeyError(sample_id)


def stratified_subset(train_ids, pdms, fraction, n_clusters=5, seed=0):
    """Pick ``round(fraction * N)`` ids so every k-means cluster of PDMs is equally represented.

    Per-cluster quotas use largest-remainder rounding.  Empty clusters are
    re-seeded by scikit-learn's k-means (relocated to far-away points).
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    train_ids = list(train_ids)
    if fraction == 1.0:
        return train_ids
    pdms = np.asarray(pdms, dtype=np.float64).reshape(len(train_ids), -1)
    n_clusters = min(n_clusters, len(train_ids))
    labels = KMeans(n_clusters=n_clusters, n_init=10, random_state=seed).fit_predict(pdms)
    total = max(1, int(round(fraction * len(train_ids))))
    sizes = np.bincount(labels, minlength=n_clusters)
    quota = fraction * sizes
    take = np.floor(quota).astype(int)
    remainder = quota - take
    order = np.argsort(-remainder, kind="stable")
    for c in order[: total - take.sum()]:
        take[c] += 1
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(n_clusters):
        members = np.flatnonzero(labels == c)
        chosen.extend(rng.choice(members, size=take[c], replace=False).tolist())
    return [train_ids[i] for i in sorted(chosen)]
