"""Command-line entry point: ``vibssm <subcommand> ...``.

Exit codes: 0 success, 1 experiment or partial failure, 2 config error, 3 I/O error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from vibssm import evaluation, experiment, io, pdm, shapegen, train
from vibssm.nets import Variant, VariantSpec, load_checkpoint

log = logging.getLogger("vibssm")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _read_config(path):
    try:
        return io.read_json(path)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_CONFIG)
    except json.JSONDecodeError as e:
        raise CliError(f"config is not valid JSON: {e}", EXIT_CONFIG)


def cmd_generate_data(args):
    raw = _read_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = shapegen.DatasetConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise CliError(str(e), EXIT_CONFIG)
    errors = cfg.validate()
    if errors:
        raise CliError("invalid dataset config:\n  " + "\n  ".join(errors), EXIT_CONFIG)
    out = Path(args.out or raw.get("out", "dataset"))
    try:
        shapegen.generate_dataset(cfg, out, workers=args.workers)
    except OSError as e:
        raise CliError(f"could not write dataset: {e}", EXIT_IO)
    manifest = out / "manifest.json"
    print(manifest)
    return EXIT_OK


def _load_dataset(path):
    try:
        return shapegen.Dataset(path)
    except FileNotFoundError as e:
        raise CliError(f"dataset not found: {e}", EXIT_IO)


def cmd_fit_pca(args):
    ds = _load_dataset(args.dataset)
    out = Path(args.out or "pca")
    ids = train.select_subset(ds, args.fraction, args.n_clusters, args.seed or 0)
    sub = pdm.fit_pca(ds.pdms(ids), args.threshold)
    sub.save(out, train_ids=ids, fraction=args.fraction)
    experiment.prepare_outlier_scoring(ds, out, args.image_components)
    print(f"L={sub.L} n_train={len(ids)} -> {out}")
    return EXIT_OK


def cmd_train(args):
    ds = _load_dataset(args.dataset)
    spec = VariantSpec(kind=args.variant, beta=args.beta, lam=args.lam, n_posterior_samples=args.n_samples)
    cfg = train.TrainConfig(learning_rate=args.learning_rate, batch_size=args.batch_size,
                            patience_epochs=args.patience_epochs, fraction=args.fraction,
                            burn_in_epochs=args.burn_in_epochs, seed=args.seed or 0, max_epochs=args.max_epochs,
                            variance_threshold=args.threshold, variant=spec)
    ids = train.select_subset(ds, args.fraction, cfg.n_clusters, cfg.seed)
    sub = pdm.fit_pca(ds.pdms(ids), cfg.variance_threshold)
    out = Path(args.out or f"runs/{cfg.variant.kind.value}_f{args.fraction:g}")
    _, rec = train.train_variant(cfg, ds, sub, ids, ds.ids("val"), out)
    print(f"best epoch {rec.best_epoch} val_mse {rec.best_val_mse:.6g} -> {out}")
    return EXIT_OK


def cmd_evaluate(args):
    ds = _load_dataset(args.dataset)
    run = Path(args.run)
    try:
        model, meta = load_checkpoint(run / "checkpoint")
        pca = pdm.PcaSubspace.load(run / "pca")
    except FileNotFoundError as e:
        raise CliError(f"run artifacts missing: {e}", EXIT_IO)
    img_dir = Path(args.image_subspace) if args.image_subspace else None
    if img_dir is not None:
        img = pdm.ImageSubspace.load(img_dir)
    else:
        img = pdm.fit_image_subspace(ds.images(ds.ids("train")))
    report = evaluation.calibration_report(model, ds, img, n_samples=args.n_samples, seed=args.seed or 0,
                                           mean_shape=pca.mean)
    out = evaluation.save_report(report, Path(args.out or run / "report"))
    print(json.dumps(report.summary, indent=2))
    print(f"-> {out}")
    return EXIT_OK


def cmd_run_experiment(args):
    try:
        cfg = experiment.ExperimentConfig.load(args.config, output_root=args.out, workers=args.workers)
    except experiment.ConfigError as e:
        raise CliError(f"invalid experiment config: {e}", EXIT_CONFIG)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    try:
        summary = experiment.run_experiment(cfg)
    except OSError as e:
        raise CliError(f"I/O failure: {e}", EXIT_IO)
    failed = [c["cell"] for c in summary["cells"] if c["status"] != "ok"]
    print(Path(cfg.output_root) / "summary.json")
    if failed:
        print("failed cells: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_report(args):
    from vibssm import report

    try:
        out = report.build_report(args.run_root, plots=not args.no_plots)
    except report.MissingArtifacts as e:
        raise CliError(str(e), EXIT_FAILED)
    print(out)
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    common.add_argument("--out", default=None, help="output location")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vibssm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("config")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("fit-pca", parents=[common], help="fit PDM PCA and image outlier subspace")
    p.add_argument("dataset")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--n-clusters", type=int, default=5)
    p.add_argument("--image-components", type=int, default=10)
    p.set_defaults(func=cmd_fit_pca)

    d = train.TrainConfig()
    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("dataset")
    p.add_argument("--variant", choices=[v.value for v in Variant], default="VIB")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--patience-epochs", type=int, default=d.patience_epochs)
    p.add_argument("--burn-in-epochs", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--threshold", type=float, default=d.variance_threshold)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--lam", type=float, default=100.0)
    p.add_argument("--n-samples", type=int, default=30)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a trained run")
    p.add_argument("run", help="run directory produced by 'train'")
    p.add_argument("dataset")
    p.add_argument("--image-subspace", default=None, help="directory from 'fit-pca' (default: refit)")
    p.add_argument("--n-samples", type=int, default=30)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-experiment", parents=[common], help="run a variant x fraction x seed grid")
    p.add_argument("config")
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("report", parents=[common], help="rebuild summary and plots from a run root")
    p.add_argument("run_root")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"error: I/O failure: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
