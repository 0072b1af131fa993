"""Accuracy metrics, surface distances and uncertainty-calibration reports."""

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from vibssm import io, kernels, pdm
from vibssm.nets import predict_with_uncertainty
from vibssm.shapegen import fibonacci_sphere

log = logging.getLogger(__name__)

SURFACE_METHOD = "analytic point-to-surface projection on the generating surface"


class UndefinedCorrelationError(ValueError):
    pass


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return y, y_hat


def rrmse(y, y_hat):
    """Root of the mean squared coordinate error over the last axis (a 3M-vector per shape)."""
    y, y_hat = _pair(y, y_hat)
    return np.sqrt(np.mean((y - y_hat) ** 2, axis=-1))


def point_rrmse(y, y_hat):
    """Per-point RRMSE; the last axis is split into 3D points."""
    y, y_hat = _pair(y, y_hat)
    if y.shape[-1] % 3:
        raise ValueError("last axis must hold 3D points")
    diff = (y - y_hat).reshape(*y.shape[:-1], -1, 3)
    out = np.sqrt(np.mean(diff ** 2, axis=-1))
    return out[..., 0] if y.shape[-1] == 3 else out


def point_surface_distances(points, family, p, tol=1e-6, n_init=4096, n_fallback=200_000):
    """Distance of each point to the analytic surface of shape ``p``.

    Returns ``(distances, fallback)``; ``fallback`` flags points whose projection
    did not converge and were scored by nearest dense surface sample instead.
    """
    q = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    coef = family.surface_coefficients(p)
    dirs = fibonacci_sphere(n_init)
    surf = family.surface_points(dirs, p)
    d2 = np.sum(q * q, 1)[:, None] - 2 * q @ surf.T + np.sum(surf * surf, 1)[None]
    init = dirs[np.argmin(d2, axis=1)]
    _, dist, ok = kernels.project_to_surface(q, init, family.radii, family.exponents, coef, tol=tol, max_iter=1000)
    fallback = ~np.asarray(ok, dtype=bool)
    if np.any(fallback):
        from scipy.spatial import cKDTree

        dense = family.surface_points(fibonacci_sphere(n_fallback), p)
        # never report more than the projection achieved
        dist[fallback] = np.minimum(dist[fallback], cKDTree(dense).query(q[fallback])[0])
        log.warning("surface projection fell back to dense sampling for %d points", fallback.sum())
    return dist, fallback


def surface_distance(points, family, p, tol=1e-6):
    """Mean distance from predicted points to the ground-truth surface."""
    dist, _ = point_surface_distances(points, family, p, tol=tol)
    return float(dist.mean())


def pearson(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-D sequences")
    if u.size < 3:
        raise ValueError("pearson needs at least 3 observations")
    du, dv = u - u.mean(), v - v.mean()
    nu, nv = np.sqrt(du @ du), np.sqrt(dv @ dv)
    if np.ptp(u) == 0 or np.ptp(v) == 0 or nu == 0 or nv == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant sequence")
    return float(np.clip(du @ dv / (nu * nv), -1.0, 1.0))


def _maybe_pearson(u, v):
    try:
        return pearson(u, v)
    except (UndefinedCorrelationError, ValueError):
        return None


def std_volume(point_variance):
    """Product of the three per-axis standard deviations of every point."""
    v = np.asarray(point_variance, dtype=np.float64)
    return np.prod(np.sqrt(v.reshape(*v.shape[:-1], -1, 3)), axis=-1)


CORRELATIONS = {
    "outlier_degree_vs_entropy": ("outlier_degree", "entropy"),
    "rrmse_vs_entropy": ("rrmse", "entropy"),
    "noise_level_vs_entropy": ("noise_level", "entropy"),
}


@dataclass
class EvalReport:
    variant: str
    fraction: float
    probabilistic: bool
    records: list = field(default_factory=list)
    correlations: dict = field(default_factory=dict)
    point_fields: dict = field(default_factory=dict)  # name -> (M,) array
    summary: dict = field(default_factory=dict)
    surface_method: str = SURFACE_METHOD

    def column(self, name, partition=None):
        return np.array([r[name] for r in self.records if partition is None or r["partition"] == partition])

    def to_json(self):
        return {
            "variant": self.variant,
            "fraction": self.fraction,
            "probabilistic": self.probabilistic,
            "correlations": self.correlations,
            "summary": self.summary,
            "surface_method": self.surface_method,
            "point_fields": {k: f"{k}.f32" for k in self.point_fields},
        }


def calibration_report(model, dataset, image_subspace, partitions=("inlier_test", "outlier_test"),
                       n_samples=30, seed=0, fraction=1.0, mean_shape=None):
    """Predict every sample of ``partitions`` and assemble accuracy and calibration statistics."""
    ids = dataset.ids(*partitions)
    images = dataset.images(ids)
    y = dataset.pdms(ids)
    gen = torch.Generator().manual_seed(seed)
    pred = predict_with_uncertainty(model, images, n_samples=n_samples, generator=gen)
    degrees = pdm.outlier_degree(image_subspace, images)
    err = rrmse(y, pred.points)
    pt_err = point_rrmse(y, pred.points)
    vol = std_volume(pred.point_variance)
    report = EvalReport(variant=model.kind.value, fraction=fraction, probabilistic=pred.probabilistic)
    for k, sid in enumerate(ids):
        s = dataset.sample(sid)
        report.records.append({
            "id": sid,
            "partition": dataset.partition_of(sid),
            "rrmse": float(err[k]),
            "surface_distance": surface_distance(pred.points[k], dataset.family, s.p),
            "entropy": float(pred.entropy[k]),
            "outlier_degree": float(degrees[k]),
            "noise_level": float(s.noise_level),
            "mean_shape_rrmse": float(rrmse(y[k], mean_shape)) if mean_shape is not None else None,
        })
    groups = {"pooled": np.ones(len(ids), dtype=bool)}
    parts = np.array([r["partition"] for r in report.records])
    for part in partitions:
        groups[part] = parts == part
    for name, (a, b) in CORRELATIONS.items():
        report.correlations[name] = {
            g: (_maybe_pearson(report.column(a)[m], report.column(b)[m]) if pred.probabilistic else None)
            for g, m in groups.items()
        }
    report.correlations["point_rrmse_vs_std_volume"] = {}
    for g, m in groups.items():
        pe, pv = pt_err[m].mean(0), vol[m].mean(0)
        report.point_fields[f"point_rrmse_{g}"] = pe
        report.point_fields[f"point_std_volume_{g}"] = pv
        report.correlations["point_rrmse_vs_std_volume"][g] = _maybe_pearson(pe, pv) if pred.probabilistic else None
    for g, m in groups.items():
        stats = {}
        for col in ("rrmse", "surface_distance", "entropy", "mean_shape_rrmse"):
            vals = report.column(col)[m]
            if col == "mean_shape_rrmse" and mean_shape is None:
                continue
            stats[col] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        stats["n"] = int(m.sum())
        report.summary[g] = stats
    return report


def save_report(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        cols = ["id", "partition", "rrmse", "surface_distance", "entropy", "outlier_degree", "noise_level",
                "mean_shape_rrmse"]
        wr = csv.DictWriter(f, fieldnames=cols)
        wr.writeheader()
        for r in report.records:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    for name, arr in report.point_fields.items():
        io.write_array(out / f"{name}.f32", arr, aligned_with="base_directions")
    io.write_json(out / "report.json", report.to_json())
    return out


def load_report_records(out_dir):
    with open(Path(out_dir) / "report.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in ("rrmse", "surface_distance", "entropy", "outlier_degree", "noise_level", "mean_shape_rrmse"):
            r[k] = float(r[k]) if r.get(k) not in (None, "", "None") else None
    return rows
