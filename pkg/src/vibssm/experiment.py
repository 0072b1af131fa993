"""Config-driven grid of (variant, training fraction, seed) cells with summary tables."""

import hashlib
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from vibssm import evaluation, io, pdm, shapegen, train
from vibssm.nets import Variant, VariantSpec

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset_dir: str
    output_root: str
    variants: list = field(default_factory=lambda: [v.value for v in Variant])
    fractions: list = field(default_factory=lambda: [1.0])
    seeds: list = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)
    variant_params: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    dataset_config: dict | None = None
    workers: int = 1
    schema_version: int = io.SCHEMA_VERSION

    @classmethod
    def load(cls, path, **overrides):
        path = Path(path)
        try:
            raw = io.read_json(path)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except ValueError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        raw.update({k: v for k, v in overrides.items() if v is not None})
        base = path.parent
        for key in ("dataset_dir", "output_root"):
            if key in raw and not Path(raw[key]).is_absolute():
                raw[key] = str(base / raw[key])
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        errors = []
        if raw.get("schema_version") != io.SCHEMA_VERSION:
            errors.append(f"schema_version: expected {io.SCHEMA_VERSION}, got {raw.get('schema_version')!r}")
        for key in ("dataset_dir", "output_root"):
            if key not in raw:
                errors.append(f"{key}: required")
        unknown = sorted(set(raw) - set(cls.__dataclass_fields__))
        if unknown:
            errors.append(f"unknown fields: {unknown}")
        for v in raw.get("variants", []):
            if v not in Variant.__members__:
                errors.append(f"variants: unknown variant {v!r}")
        for f in raw.get("fractions", []):
            if not isinstance(f, (int, float)) or not 0 < f <= 1:
                errors.append(f"fractions: {f!r} outside (0, 1]")
        for s in raw.get("seeds", []):
            if not isinstance(s, int) or s < 0:
                errors.append(f"seeds: {s!r} is not a non-negative integer")
        train_fields = set(train.TrainConfig.__dataclass_fields__) - {"variant", "fraction", "seed"}
        bad = sorted(set(raw.get("train", {})) - train_fields)
        if bad:
            errors.append(f"train: unknown fields {bad}")
        bad = sorted(set(raw.get("variant_params", {})) - (set(VariantSpec.__dataclass_fields__) - {"kind"}))
        if bad:
            errors.append(f"variant_params: unknown fields {bad}")
        if errors:
            raise ConfigError("; ".join(errors))
        return cls(**raw)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def train_config(self, variant, fraction, seed):
        spec = VariantSpec(kind=variant, **self.variant_params)
        return train.TrainConfig(**self.train, fraction=fraction, seed=seed, variant=spec)


def cell_name(variant, fraction, seed):
    return f"{variant}_f{fraction:g}_s{seed}"


def prepare_outlier_scoring(dataset, out_dir, n_components=10):
    """Fit the image subspace on training images; persist it with every sample's degree."""
    images = dataset.images(dataset.ids("train"))
    sub = pdm.fit_image_subspace(images, n_components=n_components)
    sub.save(Path(out_dir) / "image_subspace")
    all_ids = dataset.ids(*shapegen.PARTITIONS)
    degrees = pdm.outlier_degree(sub, dataset.images(all_ids))
    io.write_json(Path(out_dir) / "outlier_degrees.json", {
        "schema_version": io.SCHEMA_VERSION,
        "stride": sub.stride,
        "threshold": 3.0,
        "degrees": {i: float(d) for i, d in zip(all_ids, degrees)},
    })
    return sub


def run_cell(cfg, variant, fraction, seed, image_subspace=None):
    """Train and evaluate one grid cell; returns its summary entry."""
    dataset = shapegen.Dataset(cfg.dataset_dir)
    root = Path(cfg.output_root)
    if image_subspace is None:
        image_subspace = pdm.ImageSubspace.load(root / "image_subspace")
    out = root / "cells" / cell_name(variant, fraction, seed)
    tc = cfg.train_config(variant, fraction, seed)
    ids = train.select_subset(dataset, fraction, tc.n_clusters, seed)
    sub = pdm.fit_pca(dataset.pdms(ids), tc.variance_threshold)
    model, rec = train.train_variant(tc, dataset, sub, ids, dataset.ids("val"), out)
    ev = cfg.evaluation
    entry = {
        "cell": cell_name(variant, fraction, seed),
        "variant": variant,
        "fraction": fraction,
        "seed": seed,
        "status": "ok",
        "L": rec.latent_dim,
        "n_train": len(ids),
        "best_epoch": rec.best_epoch,
        "stopping_epoch": rec.stopping_epoch,
        "best_val_mse": rec.best_val_mse,
        "files": ["config.json", "metrics.csv", "run.json", "checkpoint.pt", "checkpoint.json",
                  "pca/pca.json", "pca/pca_mean.f32", "pca/pca_eigenvectors.f32"],
    }
    if ev.get("enabled", True):
        report = evaluation.calibration_report(model, dataset, image_subspace, n_samples=ev.get("n_samples", 30),
                                               seed=seed, fraction=fraction, mean_shape=sub.mean)
        evaluation.save_report(report, out / "report")
        entry["summary"] = report.summary
        entry["correlations"] = report.correlations
        entry["files"] += ["report/report.csv", "report/report.json"] + [
            f"report/{k}.f32" for k in sorted(report.point_fields)]
    entry["files"] = [str(Path("cells") / entry["cell"] / f) for f in entry["files"]]
    return entry


def _run_cell_safe(args):
    cfg, variant, fraction, seed = args
    try:
        return run_cell(cfg, variant, fraction, seed)
    except Exception as e:  # partial-failure policy: record and continue
        log.error("cell %s failed: %s", cell_name(variant, fraction, seed), e)
        return {"cell": cell_name(variant, fraction, seed), "variant": variant, "fraction": fraction, "seed": seed,
                "status": "failed", "error": f"{type(e).__name__}: {e}", "traceback": traceback.format_exc()}


def _agg(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    return {"mean": float(np.mean(values)), "std": float(np.std(values)), "n": len(values)}


def grid_table(cells):
    """Aggregate cells over seeds into a variant x fraction table."""
    table = {}
    for c in cells:
        if c.get("status") != "ok" or "summary" not in c:
            continue
        key = f"{c['variant']}@{c['fraction']:g}"
        table.setdefault(key, []).append(c)
    out = {}
    for key, group in sorted(table.items()):
        row = {"variant": group[0]["variant"], "fraction": group[0]["fraction"], "n_seeds": len(group)}
        for part in ("inlier_test", "outlier_test", "pooled"):
            for metric in ("rrmse", "surface_distance", "entropy", "mean_shape_rrmse"):
                vals = [g["summary"][part][metric]["mean"] for g in group if metric in g["summary"].get(part, {})]
                row[f"{part}.{metric}"] = _agg(vals)
        for name in sorted(group[0]["correlations"]):
            for part in ("pooled", "inlier_test", "outlier_test"):
                row[f"r.{name}.{part}"] = _agg([g["correlations"][name].get(part) for g in group])
        out[key] = row
    return out


def write_summary(root, cfg_dict, cells):
    summary = {
        "schema_version": io.SCHEMA_VERSION,
        "config": cfg_dict,
        "cells": sorted(cells, key=lambda c: c["cell"]),
        "grid": grid_table(cells),
        "files": ["experiment_config.json", "image_subspace/image_subspace.json",
                  "image_subspace/image_mean.f32", "image_subspace/image_eigenvectors.f32",
                  "outlier_degrees.json"],
        "surface_method": evaluation.SURFACE_METHOD,
    }
    io.write_json(Path(root) / "summary.json", summary)
    return summary


def run_experiment(cfg):
    """Run the whole grid; returns the summary dict (failed cells are recorded, not raised)."""
    root = Path(cfg.output_root)
    root.mkdir(parents=True, exist_ok=True)
    if not (Path(cfg.dataset_dir) / "manifest.json").exists():
        if cfg.dataset_config is None:
            raise FileNotFoundError(f"no dataset at {cfg.dataset_dir} and no dataset_config to generate one")
        shapegen.generate_dataset(shapegen.DatasetConfig.from_dict(cfg.dataset_config), cfg.dataset_dir,
                                  workers=cfg.workers)
    io.write_json(root / "experiment_config.json", cfg.to_dict())
    dataset = shapegen.Dataset(cfg.dataset_dir)
    prepare_outlier_scoring(dataset, root, cfg.evaluation.get("image_components", 10))
    jobs = [(cfg, v, f, s) for v in cfg.variants for f in cfg.fractions for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            cells = list(ex.map(_run_cell_safe, jobs))
    else:
        cells = [_run_cell_safe(j) for j in jobs]
    return write_summary(root, cfg.to_dict(), cells)


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
