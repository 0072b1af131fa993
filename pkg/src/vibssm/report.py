"""Rebuild consolidated summaries and static plots from persisted run artifacts."""

from pathlib import Path

import numpy as np

from vibssm import evaluation, io


class MissingArtifacts(RuntimeError):
    pass


def _cell_stats(rows, partition):
    sel = [r for r in rows if partition == "pooled" or r["partition"] == partition]
    out = {}
    for col in ("rrmse", "surface_distance", "entropy", "mean_shape_rrmse"):
        vals = [r[col] for r in sel if r[col] is not None]
        if vals:
            out[col] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    out["n"] = len(sel)
    return out


def build_report(run_root, plots=True):
    root = Path(run_root)
    summary_path = root / "summary.json"
    if not summary_path.exists():
        raise MissingArtifacts(f"no runs found under {root}")
    summary = io.read_json(summary_path)
    cells = [c for c in summary.get("cells", []) if c.get("status") == "ok"]
    if not cells:
        raise MissingArtifacts(f"no runs found under {root}")
    listed = list(summary.get("files", [])) + [f for c in cells for f in c.get("files", [])]
    missing = [f for f in listed if not (root / f).exists()]
    if missing:
        raise MissingArtifacts("missing run artifacts:\n  " + "\n  ".join(missing))

    out_dir = root / "report"
    consolidated = {"schema_version": io.SCHEMA_VERSION, "cells": {}, "heat_maps": {}}
    for c in sorted(cells, key=lambda c: c["cell"]):
        rep_dir = root / "cells" / c["cell"] / "report"
        if not (rep_dir / "report.csv").exists():
            continue
        rows = evaluation.load_report_records(rep_dir)
        meta = io.read_json(rep_dir / "report.json")
        fields = {}
        for name, fname in sorted(meta["point_fields"].items()):
            arr, _ = io.read_array(rep_dir / fname)
            fields[name] = arr
        m = {
            "variant": c["variant"],
            "fraction": c["fraction"],
            "seed": c["seed"],
            "stats": {p: _cell_stats(rows, p) for p in ("inlier_test", "outlier_test", "pooled")},
            "correlations": meta["correlations"],
        }
        consolidated["cells"][c["cell"]] = m
        consolidated["heat_maps"][c["cell"]] = {
            name: {"file": str(Path("cells") / c["cell"] / "report" / meta["point_fields"][name]), "length": len(a)}
            for name, a in fields.items()
        }
        if plots:
            _scatter_plots(out_dir / f"{c['cell']}_calibration.png", rows, fields, meta)
    if plots:
        _accuracy_bars(out_dir / "accuracy.png", consolidated["cells"])
    io.write_json(out_dir / "consolidated.json", consolidated)
    return out_dir / "consolidated.json"


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _scatter(ax, x, y, xlabel, ylabel):
    x, y = np.asarray(x, float), np.asarray(y, float)
    ax.scatter(x, y, s=10)
    try:
        r = evaluation.pearson(x, y)
        k, b = np.polyfit(x, y, 1)
        xs = np.linspace(x.min(), x.max(), 2)
        ax.plot(xs, k * xs + b, "r-")
        ax.set_title(f"r = {r:.3f}")
    except (ValueError, np.linalg.LinAlgError):
        ax.set_title("r = n/a")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)


def _scatter_plots(path, rows, fields, meta):
    plt = _plt()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    _scatter(axes[0], [r["outlier_degree"] for r in rows], [r["entropy"] for r in rows], "outlier degree", "entropy")
    _scatter(axes[1], [r["rrmse"] for r in rows], [r["entropy"] for r in rows], "RRMSE", "entropy")
    _scatter(axes[2], fields["point_rrmse_pooled"], fields["point_std_volume_pooled"], "point RRMSE",
             "std volume")
    fig.suptitle(f"{meta['variant']} (fraction {meta['fraction']:g})")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def _accuracy_bars(path, cells):
    plt = _plt()
    path.parent.mkdir(parents=True, exist_ok=True)
    variants = sorted({c["variant"] for c in cells.values()})
    fractions = sorted({c["fraction"] for c in cells.values()}, reverse=True)
    fig, axes = plt.subplots(1, 2, figsize=(11, 3.6), sharey=True)
    width = 0.8 / max(len(variants), 1)
    for ax, part in zip(axes, ("inlier_test", "outlier_test")):
        for i, v in enumerate(variants):
            means, stds = [], []
            for f in fractions:
                vals = [c["stats"][part]["rrmse"]["mean"] for c in cells.values()
                        if c["variant"] == v and c["fraction"] == f and "rrmse" in c["stats"][part]]
                means.append(np.mean(vals) if vals else np.nan)
                stds.append(np.std(vals) if vals else 0.0)
            ax.bar(np.arange(len(fractions)) + i * width, means, width, yerr=stds, label=v)
        ax.set_xticks(np.arange(len(fractions)) + 0.4 - width / 2)
        ax.set_xticklabels([f"{f:.0%}" for f in fractions])
        ax.set_title(part.replace("_", " "))
        ax.set_xlabel("training fraction")
    axes[0].set_ylabel("RRMSE")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
