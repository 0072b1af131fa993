import numpy as np
import pytest
import torch

from vibssm import io, pdm, train
from vibssm.nets import EncoderSpec, Variant, VariantSpec
from vibssm.train import EarlyStopping, TrainConfig, burnin_weight


def test_burnin_weight_schedule():
    assert burnin_weight(0, 100) == 0.0
    assert burnin_weight(50, 100) == 0.5
    assert burnin_weight(100, 100) == 1.0
    assert burnin_weight(250, 100) == 1.0
    w = [burnin_weight(e, 10) for e in range(20)]
    assert np.all(np.diff(w) >= 0) and max(np.diff(w)) <= 0.1 + 1e-12
    with pytest.raises(ValueError):
        burnin_weight(3, 0)


@pytest.mark.parametrize("fraction,B", [(1.0, 100), (0.8, 80), (0.4, 40), (0.2, 20), (0.1, 10), (0.001, 1)])
def test_burn_in_proportional_to_fraction(fraction, B):
    assert TrainConfig(fraction=fraction).B == B


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.learning_rate, c.batch_size, c.patience_epochs, c.max_epochs) == (5e-5, 6, 50, 2000)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(variant={"kind": "PPCA"}).variant.kind is Variant.PPCA


@pytest.mark.parametrize("plateau_at", [0, 7, 120])
def test_early_stopping_plateau(plateau_at):
    curve = [10.0 - e if e <= plateau_at else 10.0 - plateau_at for e in range(400)]
    stopper = EarlyStopping(50)
    for e, v in enumerate(curve):
        _, stop = stopper.update(e, v)
        if stop:
            break
    assert e == plateau_at + 50
    assert stopper.best_epoch == plateau_at


def test_early_stopping_ignores_burn_in():
    stopper = EarlyStopping(3, start=5)
    for e in range(5):
        assert stopper.update(e, 0.0) == (False, False)
    assert stopper.update(5, 1.0) == (True, False)
    assert stopper.best_epoch == 5


def test_batches_never_leave_a_single_sample():
    g = torch.Generator().manual_seed(0)
    for n in range(2, 30):
        sizes = [len(b) for b in train._batches(n, 6, g)]
        assert sum(sizes) == n and min(sizes) >= 2


def _cfg(kind, **kw):
    spec = VariantSpec(kind=kind, n_posterior_samples=4, encoder=EncoderSpec(channels=(2, 4, 4, 4, 4), hidden=16),
                       decoder_hidden=(16, 16))
    base = dict(learning_rate=1e-3, max_epochs=6, patience_epochs=50, burn_in_epochs=3, variant=spec)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_pca(tiny_dataset):
    return pdm.fit_pca(tiny_dataset.pdms(tiny_dataset.ids("train")))


@pytest.mark.parametrize("kind", ["PCA_DET", "PPCA", "PPCA_OFFSET"])
def test_pca_decoder_stays_bit_identical(kind, tiny_dataset, tiny_pca):
    ds = tiny_dataset
    model, rec = train.train_variant(_cfg(kind), ds, tiny_pca, ds.ids("train"), ds.ids("val"))
    assert rec.stopping_epoch == 5
    w = model.decoder.weight.numpy()
    b = model.decoder.bias.numpy()
    assert np.array_equal(w, tiny_pca.eigenvectors.astype(np.float32))
    assert np.array_equal(b, tiny_pca.mean.astype(np.float32))
    assert not any(p.data_ptr() == model.decoder.weight.data_ptr() for p in model.parameters())


@pytest.mark.parametrize("kind", list(Variant))
def test_seed_determinism_and_best_checkpoint(kind, tiny_dataset, tiny_pca):
    ds = tiny_dataset
    cfg = _cfg(kind, seed=4)
    m1, r1 = train.train_variant(cfg, ds, tiny_pca, ds.ids("train"), ds.ids("val"))
    _, r2 = train.train_variant(cfg, ds, tiny_pca, ds.ids("train"), ds.ids("val"))
    assert r1.val_mse == r2.val_mse
    assert r1.train_loss == r2.train_loss
    assert len(r1.val_mse) == r1.stopping_epoch + 1
    window = r1.val_mse[r1.selection_start:]
    assert r1.best_val_mse == min(window)
    assert r1.best_epoch == r1.selection_start + int(np.argmin(window))
    # the restored model is the best checkpoint, not the last one
    assert train._validation_mse(m1, torch.as_tensor(ds.images(ds.ids("val")), dtype=torch.float32),
                                 torch.as_tensor(ds.pdms(ds.ids("val")), dtype=torch.float32)) == pytest.approx(
        r1.best_val_mse, rel=1e-5)
    if kind.stochastic:
        assert r1.burnin_w[:4] == [0.0, 1 / 3, 2 / 3, 1.0]
    else:
        assert set(r1.burnin_w) == {1.0}


def test_patience_stops_training(tiny_dataset, tiny_pca):
    ds = tiny_dataset
    _, rec = train.train_variant(_cfg("PCA_DET", patience_epochs=2, max_epochs=300, learning_rate=0.05), ds, tiny_pca,
                                 ds.ids("train"), ds.ids("val"))
    assert rec.stopping_epoch < 299
    assert rec.stopping_epoch - rec.best_epoch == 2


class _Recording:
    """Dataset wrapper that logs every id it is asked for."""

    def __init__(self, ds):
        self._ds, self.seen = ds, set()

    def images(self, ids):
        self.seen.update(ids)
        return self._ds.images(ids)

    def pdms(self, ids):
        self.seen.update(ids)
        return self._ds.pdms(ids)


def test_no_test_partition_access(tiny_dataset, tiny_pca):
    rec_ds = _Recording(tiny_dataset)
    train.train_variant(_cfg("PPCA_OFFSET", max_epochs=2), rec_ds, tiny_pca, tiny_dataset.ids("train"),
                        tiny_dataset.ids("val"))
    assert rec_ds.seen <= set(tiny_dataset.ids("train", "val"))


def test_errors(tiny_dataset, tiny_pca):
    ds = tiny_dataset
    with pytest.raises(ValueError):
        train.train_variant(_cfg("PPCA"), ds, None, ds.ids("train"), ds.ids("val"))
    with pytest.raises(ValueError):
        train.train_variant(_cfg("VIB"), ds, tiny_pca, ds.ids("train"), [])


def test_non_finite_loss_aborts(tiny_dataset, tiny_pca):
    ds = tiny_dataset
    with pytest.raises((train.TrainingAborted, FloatingPointError)):
        train.train_variant(_cfg("PCA_DET", learning_rate=1e30, max_epochs=20), ds, tiny_pca, ds.ids("train"),
                            ds.ids("val"))


def test_run_directory_layout(tmp_path, tiny_dataset, tiny_pca):
    ds = tiny_dataset
    train.train_variant(_cfg("VIB", max_epochs=3), ds, tiny_pca, ds.ids("train"), ds.ids("val"), tmp_path)
    for f in ("config.json", "metrics.csv", "checkpoint.pt", "checkpoint.json", "run.json", "pca/pca.json"):
        assert (tmp_path / f).exists(), f
    header = (tmp_path / "metrics.csv").read_text().splitlines()
    assert header[0] == "epoch,train_loss,val_mse,burnin_w" and len(header) == 4
    cfg = io.read_json(tmp_path / "config.json")
    assert cfg["adam_betas"] == [0.9, 0.999] and cfg["B"] == 3


def test_sweep_refits_pca_on_subset(tmp_path, tiny_dataset):
    cfg = _cfg("PPCA", max_epochs=2, n_clusters=2)
    recs = train.sweep(cfg, tiny_dataset, fractions=(1.0, 0.5), out_root=tmp_path)
    assert [len(r.train_ids) for r in recs] == [16, 8]
    assert [r.config["B"] for r in recs] == [3, 3]
    for r, name in zip(recs, ("PPCA_f1", "PPCA_f0.5")):
        meta = io.read_json(tmp_path / name / "pca" / "pca.json")
        assert meta["train_ids"] == r.train_ids
        sub = pdm.PcaSubspace.load(tmp_path / name / "pca")
        np.testing.assert_allclose(sub.mean, tiny_dataset.pdms(r.train_ids).mean(0), atol=1e-5)


def test_sweep_proportional_burn_in():
    assert [TrainConfig(fraction=f).B for f in train.DEFAULT_FRACTIONS] == [100, 80, 40, 20, 10]


@pytest.mark.slow
def test_overfit_smoke(tiny_dataset):
    ds = tiny_dataset
    ids = ds.ids("train")[:8]
    sub = pdm.fit_pca(ds.pdms(ids))
    cfg = TrainConfig(learning_rate=3e-3, batch_size=4, max_epochs=500, patience_epochs=500, burn_in_epochs=20,
                      variant=VariantSpec(kind="VIB"))
    model, _ = train.train_variant(cfg, ds, sub, ids, ids)
    with torch.no_grad():
        pred = model.predict_mean(torch.as_tensor(ds.images(ids), dtype=torch.float32)).numpy()
    y = ds.pdms(ids)
    rr = np.sqrt(np.mean((pred - y) ** 2, axis=1)).mean()
    mean_rr = np.sqrt(np.mean((y.mean(0) - y) ** 2, axis=1)).mean()
    assert rr < 0.1 * mean_rr
