from dataclasses import replace

import numpy as np
import pytest

from checkerboard import masklab as ml
from checkerboard import network as net
from checkerboard import ops
from checkerboard.data import synthetic_corpus
from checkerboard.errors import ContractError


@pytest.fixture(scope="module")
def supernet():
    return net.ModelWeights.init(ml.supernet_config(n_channels=8, latent_channels=6), seed=4)


@pytest.fixture(scope="module")
def images():
    return list(synthetic_corpus(2, size=64, seed=9))


@pytest.fixture(scope="module")
def evaluator(supernet, images):
    return ml.MaskEvaluator(supernet, images)


def test_table1_reference_counts(supernet, images, evaluator):
    reports = ml.table1_protocol(supernet, images, evaluator)
    assert [r.k_ref for r in reports] == [0, 4, 12, 4, 12, 8]
    assert [r.description for r in reports][0] == "non-reference"


def test_zero_mask_eta_is_exactly_zero(evaluator):
    r = evaluator.report(ops.make_mask("zero", 5))
    assert r.eta == 0.0 and r.bpp == evaluator.r0


def test_eta_arithmetic():
    r = ml.MaskEvalReport("x", 4, bpp=0.3648, r0=0.4332)
    assert r.eta_percent == pytest.approx(15.79, abs=0.01)


def test_small_masks_pad_to_supernet_size(evaluator):
    small = ops.make_mask("checkerboard", 3)
    assert evaluator.rate(small) == evaluator.rate(small.padded(5))


def test_sweep_covers_every_offset(supernet, images, evaluator):
    sweep = ml.single_reference_sweep(supernet, images, evaluator)
    assert len(sweep) == 24 and all(r.k_ref == 1 for r in sweep)
    assert len({r.description for r in sweep}) == 24
    near, far = ml.distance_groups()
    assert sorted(near) == [(-1, 0), (0, -1), (0, 1), (1, 0)]
    assert len(far) == 16 and all(ml.chebyshev_distance(o) == 2 for o in far)
    n, f = ml.mean_eta_by_distance(sweep)
    assert np.isfinite(n) and np.isfinite(f)


def test_reconstruction_does_not_depend_on_mask(supernet, images):
    """Masks only change the entropy model, never x_hat."""
    a = ml.MaskEvaluator(supernet, images).reconstructions()
    b = ml.MaskEvaluator(supernet, images).reconstructions()
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_random_mask_statistics():
    freq = ml.mask_statistics(seed=0, steps=10_000)
    off_centre = np.delete(freq.reshape(-1), 12)
    assert freq[2, 2] == 0.0
    assert np.all(np.abs(off_centre - 0.5) < 0.02)


def test_step_mask_is_pure():
    assert np.array_equal(ml.step_mask(3, 17).bits, ml.step_mask(3, 17).bits)
    assert not all(np.array_equal(ml.step_mask(3, s).bits, ml.step_mask(3, 0).bits) for s in range(1, 5))


def test_supernet_training_requires_random_5x5(images):
    cfg = ml.desk_train_config(steps=1, model=net.ModelConfig(n_channels=4, latent_channels=4))
    with pytest.raises(ContractError):
        ml.train_random_mask_model(cfg, images)


def test_desk_defaults():
    cfg = ml.desk_train_config()
    assert cfg.steps == 20000 and cfg.lr_decay_step == 15000 and cfg.lam == 0.01
    assert cfg.model.context_kind == "random" and cfg.model.context_kernel == 5


def test_short_supernet_training_is_reproducible(images):
    cfg = ml.desk_train_config(steps=3, model=ml.supernet_config(n_channels=4, latent_channels=4))
    cfg = replace(cfg, batch=2)
    w1, h1 = ml.train_random_mask_model(cfg, images, seed=1)
    w2, h2 = ml.train_random_mask_model(cfg, images, seed=1)
    assert w1.digest() == w2.digest() and [m.loss for m in h1] == [m.loss for m in h2]
    w3, _ = ml.train_random_mask_model(cfg, images, seed=2)
    assert w3.digest() != w1.digest()


def test_csv_roundtrip(tmp_path, evaluator):
    reports = [evaluator.report(ops.make_mask(kind, k), name) for name, kind, k in ml.TABLE1_MASKS[:3]]
    path = tmp_path / "t.csv"
    ml.write_csv(reports, path)
    rows = ml.read_csv(path)
    assert [r["description"] for r in rows] == [r.description for r in reports]
    assert [int(r["k_ref"]) for r in rows] == [0, 4, 12]
    for row, rep in zip(rows, reports):
        assert float(row["bpp"]) == pytest.approx(rep.bpp, abs=1e-6)
        assert float(row["eta_percent"]) == pytest.approx(rep.eta_percent, abs=1e-3)
