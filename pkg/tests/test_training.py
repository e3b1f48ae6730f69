import math

import numpy as np
import pytest

from pcgnn.geometry import synth_shape
from pcgnn.layers import block_spec
from pcgnn.models import ModelConfig, build_model, preset
from pcgnn.tensor import MlpSpec
from pcgnn.training import (DivergenceError, Hyper, Metrics, evaluate, robustness_curve,
                            train_classifier)


def toy_set(per_class, seed, n=40):
    """Blob (label 0) versus sphere (label 1)."""
    rng = np.random.default_rng(seed)
    clouds = []
    for label, kind in enumerate(("gaussian-blob", "sphere")):
        for s in rng.integers(0, 2 ** 31, per_class):
            clouds.append(synth_shape(kind, n, int(s), noise=0.02, label=label))
    return clouds


def small_config(classes=2, seed=0):
    b0 = block_spec("geo-extractor", 3, 16, features=("target-pos", "rel-pos", "distance"))
    b1 = block_spec("simple-conv", 16, 32)
    return ModelConfig((b0, b1), MlpSpec((32, 16, classes), activate_last=False), k=8, seed=seed)


def test_metric_examples():
    m = Metrics.from_predictions([0, 1, 2], [0, 1, 2], 3)
    assert m.oa == 1.0 and m.macc == 1.0
    m = Metrics.from_predictions([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert m.oa == 0.5 and m.macc == 0.5
    m = Metrics.from_confusion([[2, 0, 0], [1, 1, 0], [0, 0, 2]])
    assert m.oa == pytest.approx(5 / 6) and m.macc == pytest.approx((1 + 0.5 + 1) / 3)


def test_toy_problem_is_learned():
    train, test = toy_set(24, 0), toy_set(10, 1)
    model, hist = train_classifier(small_config(), (train, test), Hyper(epochs=20, batch_size=8, seed=0))
    assert hist[-1].test_oa >= 0.95
    assert len(hist) == 20 and all(math.isfinite(r.loss) for r in hist)


def test_zero_learning_rate_keeps_parameters():
    train = toy_set(4, 2)
    model = build_model(small_config())
    before = {k: v.copy() for k, v in model.state_dict().items() if not k.endswith(("running_mean", "running_var"))}
    train_classifier(small_config(), train, Hyper(epochs=2, batch_size=4, lr=0.0), model=model)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_identical_seeds_identical_histories():
    train = toy_set(6, 3)
    runs = [train_classifier(small_config(), train, Hyper(epochs=2, batch_size=4, seed=5))[1] for _ in range(2)]
    assert [(r.loss, r.train_oa) for r in runs[0]] == [(r.loss, r.train_oa) for r in runs[1]]


def test_full_batch_loss_monotone_over_first_epochs():
    failures = 0
    for seed in range(5):
        train = toy_set(8, 10 + seed)
        hyper = Hyper(epochs=5, batch_size=len(train), seed=seed, rotate=False)
        _, hist = train_classifier(small_config(seed=seed), train, hyper)
        losses = [r.loss for r in hist]
        failures += any(b > a for a, b in zip(losses, losses[1:]))
    assert failures <= 1


def test_bad_labels_and_divergence():
    bad = toy_set(2, 0)
    with pytest.raises(ValueError):
        train_classifier(preset("all-simple", 2), [
            synth_shape("sphere", 40, 0, label=5), synth_shape("sphere", 40, 1, label=0)], Hyper(epochs=1))
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        train_classifier(small_config(), bad, Hyper(epochs=1, batch_size=2, lr=1e300, optimizer="sgd"))
    assert info.value.epoch >= 1


def test_hyper_validation_and_schedule():
    with pytest.raises(ValueError):
        Hyper(epochs=0)
    with pytest.raises(ValueError):
        Hyper(optimizer="rmsprop")
    with pytest.raises(ValueError):
        Hyper(schedule="step")
    assert Hyper().lr_at(30) == Hyper().lr
    h = Hyper(epochs=11, schedule="cosine")
    assert h.lr_at(1) == pytest.approx(h.lr) and h.lr_at(11) == pytest.approx(h.lr / 100)
    assert all(h.lr_at(e) >= h.lr_at(e + 1) for e in range(1, 11))


def test_input_dropout_augmentation():
    with pytest.raises(ValueError):
        Hyper(drop_max=1.0)
    train = toy_set(6, 6)
    hyper = Hyper(epochs=2, batch_size=4, seed=1, drop_max=0.9)
    runs = [train_classifier(small_config(), train, hyper)[1] for _ in range(2)]
    assert [(r.loss, r.train_oa) for r in runs[0]] == [(r.loss, r.train_oa) for r in runs[1]]
    plain = train_classifier(small_config(), train, Hyper(epochs=2, batch_size=4, seed=1))[1]
    assert [r.loss for r in plain] != [r.loss for r in runs[0]]


def test_evaluate_and_robustness():
    train, test = toy_set(12, 4), toy_set(6, 5, n=64)
    model, _ = train_classifier(small_config(), train, Hyper(epochs=3, batch_size=8))
    base = evaluate(model, test)
    shuffled = [test[i] for i in np.random.default_rng(0).permutation(len(test))]
    assert evaluate(model, shuffled).oa == base.oa
    curve = robustness_curve(model, test, [0.0, 0.5, 0.8], seed=1)
    assert curve[0] == (0.0, base.oa)
    assert curve == robustness_curve(model, test, [0.0, 0.5, 0.8], seed=1)
    with pytest.raises(ValueError):
        robustness_curve(model, test, [0.9], seed=1)
    with pytest.raises(ValueError):
        evaluate(model, [])
