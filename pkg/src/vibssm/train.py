"""Training protocol: burn-in schedule, early stopping on validation PDM MSE, subset sweeps."""

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from vibssm import io, pdm, shapegen
from vibssm.nets import ShapeModel, Variant, VariantSpec, save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (1.0, 0.8, 0.4, 0.2, 0.1)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 6
    patience_epochs: int = 50
    burn_in_base: int = 100
    fraction: float = 1.0
    burn_in_epochs: int | None = None
    seed: int = 0
    max_epochs: int = 2000
    adam_betas: tuple = (0.9, 0.999)
    variance_threshold: float = 0.95
    n_clusters: int = 5
    latent_dim: int | None = None
    variant: VariantSpec = field(default_factory=VariantSpec)

    def __post_init__(self):
        if isinstance(self.variant, dict):
            self.variant = VariantSpec(**self.variant)
        self.adam_betas = tuple(self.adam_betas)
        for name in ("learning_rate", "batch_size", "patience_epochs", "max_epochs", "burn_in_base"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def B(self):
        if self.burn_in_epochs is not None:
            return max(1, int(self.burn_in_epochs))
        return max(1, int(round(self.burn_in_base * self.fraction)))

    def to_dict(self):
        d = asdict(self)
        d["variant"] = self.variant.to_dict()
        d["B"] = self.B
        return d


@dataclass
class RunRecord:
    train_loss: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    burnin_w: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = float("inf")
    stopping_epoch: int = -1
    selection_start: int = 0
    checkpoint: str | None = None
    train_ids: list = field(default_factory=list)
    val_ids: list = field(default_factory=list)
    latent_dim: int = 0
    config: dict = field(default_factory=dict)


def burnin_weight(epoch, B):
    """Stochastic-loss weight: 0 at epoch 0 rising linearly to 1 at epoch ``B``."""
    if B < 1:
        raise ValueError("B must be >= 1")
    return min(max(epoch, 0) / B, 1.0)


class EarlyStopping:
    """Tracks the best validation score from ``start`` onwards; stops after ``patience`` epochs without improvement."""

    def __init__(self, patience, start=0):
        self.patience = patience
        self.start = start
        self.best = float("inf")
        self.best_epoch = -1

    def update(self, epoch, value):
        """Record ``value``; returns ``(improved, stop)``."""
        if epoch < self.start:
            return False, False
        improved = value < self.best
        if improved:
            self.best, self.best_epoch = value, epoch
        stop = epoch - self.best_epoch >= self.patience
        return improved, stop


def _batches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator).tolist()
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single sample
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2].extend(out.pop())
    return out


@torch.no_grad()
def _validation_mse(model, x, y, batch_size=32):
    model.eval()
    preds = [model.predict_mean(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    model.train()
    return float(torch.mean((torch.cat(preds) - y) ** 2))


def train_variant(config, dataset, subspace, train_ids, val_ids, out_dir=None):
    """Train one model variant; returns ``(model, RunRecord)``.

    Only ``train_ids`` and ``val_ids`` are read from ``dataset``.  Validation
    PDM MSE is computed at the latent mean.  For stochastic variants the best
    checkpoint and the patience counter only consider epochs after burn-in.
    """
    spec = config.variant
    if not train_ids or not val_ids:
        raise ValueError("need non-empty train and validation partitions")
    if spec.kind.supervised and subspace is None:
        raise ValueError(f"{spec.kind.value} needs a PCA subspace fitted on the training ids")
    L = subspace.L if subspace is not None else config.latent_dim
    if L is None:
        raise ValueError("latent dimension unknown: pass a subspace or set latent_dim")

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    x_tr = torch.as_tensor(dataset.images(train_ids), dtype=torch.float32)
    y_tr = torch.as_tensor(dataset.pdms(train_ids), dtype=torch.float32)
    x_va = torch.as_tensor(dataset.images(val_ids), dtype=torch.float32)
    y_va = torch.as_tensor(dataset.pdms(val_ids), dtype=torch.float32)
    z_tr = None
    if spec.kind.supervised:
        z_tr = torch.as_tensor(pdm.project(subspace, dataset.pdms(train_ids)), dtype=torch.float32)

    model = ShapeModel(spec, x_tr.shape[1:], L, y_tr.shape[1], subspace=subspace,
                       init_mean=None if subspace is not None else y_tr.mean(0).numpy())
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.adam_betas)
    B = config.B
    start = B if spec.kind.stochastic else 0
    stopper = EarlyStopping(config.patience_epochs, start=start)
    rec = RunRecord(train_ids=list(train_ids), val_ids=list(val_ids), latent_dim=L, config=config.to_dict(),
                    selection_start=start)
    best_state = copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(config.max_epochs):
        w = burnin_weight(epoch, B) if spec.kind.stochastic else 1.0
        total, count = 0.0, 0
        for idx in _batches(len(x_tr), config.batch_size, gen):
            xb, yb = x_tr[idx], y_tr[idx]
            loss = model.loss(xb, yb, z_tr[idx] if z_tr is not None else None, burnin=w)
            if not torch.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch} ({spec.kind.value})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        val = _validation_mse(model, x_va, y_va)
        rec.train_loss.append(total / count)
        rec.val_mse.append(val)
        rec.burnin_w.append(w)
        improved, stop = stopper.update(epoch, val)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        if epoch % 50 == 0:
            log.info("%s epoch %d loss %.4f val_mse %.5f", spec.kind.value, epoch, total / count, val)
        if stop:
            break
    rec.stopping_epoch = epoch
    if stopper.best_epoch < 0:  # max_epochs reached before selection started
        stopper.best_epoch, stopper.best = epoch, rec.val_mse[-1]
        best_state = copy.deepcopy(model.state_dict())
    rec.best_epoch, rec.best_val_mse = stopper.best_epoch, stopper.best
    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        write_run(out_dir, model, rec, subspace)
    return model, rec


def write_run(out_dir, model, rec, subspace=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "config.json", rec.config)
    with open(out / "metrics.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "train_loss", "val_mse", "burnin_w"])
        for e, (tl, vm, w) in enumerate(zip(rec.train_loss, rec.val_mse, rec.burnin_w)):
            wr.writerow([e, repr(tl), repr(vm), repr(w)])
    ckpt = save_checkpoint(out / "checkpoint", model, epoch=rec.best_epoch, val_mse_history=rec.val_mse,
                           best_val_mse=rec.best_val_mse)
    rec.checkpoint = str(ckpt.with_suffix(".pt").relative_to(out))
    if subspace is not None:
        subspace.save(out / "pca", train_ids=rec.train_ids)
    record = asdict(rec)
    io.write_json(out / "run.json", record)


def select_subset(dataset, fraction, n_clusters=5, seed=0):
    train_ids = dataset.ids("train")
    return shapegen.stratified_subset(train_ids, dataset.pdms(train_ids), fraction, n_clusters, seed)


def sweep(config, dataset, fractions=DEFAULT_FRACTIONS, out_root=None):
    """Train one run per training fraction; PCA is refitted on each subset."""
    records = []
    for fraction in fractions:
        ids = select_subset(dataset, fraction, config.n_clusters, config.seed)
        sub = pdm.fit_pca(dataset.pdms(ids), config.variance_threshold)
        cfg = replace(config, fraction=fraction)
        out = None if out_root is None else Path(out_root) / f"{cfg.variant.kind.value}_f{fraction:g}"
        _, rec = train_variant(cfg, dataset, sub, ids, dataset.ids("val"), out)
        records.append(rec)
    return records
