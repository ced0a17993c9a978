import math

import numpy as np
import pytest

from helpers import randomize_head, small_model, stage_data
from oceancast import autodiff as ad
from oceancast.autodiff import GROUPS, ParamStore
from oceancast.errors import ConfigError, DataError, NumericError
from oceancast.metrics import weighted_mae
from oceancast.model import forecast_step
from oceancast.training import (
    StagePlan, adamw_step, fit_increment_scale, load_checkpoint, run_plans, run_stage, save_checkpoint,
    variant_plans,
)


def test_adamw_matches_scalar_recursion():
    store = ParamStore()
    theta0 = np.array([0.5, -1.0, 2.0])
    store.add("decoder.w", theta0, "decoder")
    grads = [np.array([0.1, -0.2, 0.0]), np.array([-0.3, 0.05, 1.0])]
    lr, b1, b2, eps, wd = 1e-2, 0.9, 0.999, 1e-8, 0.1
    for g in grads:
        adamw_step(store, {"decoder.w": g}, lr=lr, betas=(b1, b2), eps=eps, weight_decay=wd)
    for i in range(3):
        th, m, v = float(theta0[i]), 0.0, 0.0
        for t, g in enumerate(grads, 1):
            gi = float(g[i])
            m = b1 * m + (1 - b1) * gi
            v = b2 * v + (1 - b2) * gi * gi
            th = th * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert store["decoder.w"].data[i] == pytest.approx(th, abs=1e-15)
    assert store.params["decoder.w"].step == 2


def test_adamw_first_step_is_sign_sized():
    store = ParamStore()
    store.add("encoder.w", np.zeros(3), "encoder")
    adamw_step(store, {"encoder.w": np.array([1e-3, -5.0, 2.0])}, lr=0.1, weight_decay=0.0)
    assert np.allclose(store["encoder.w"].data, [-0.1, 0.1, -0.1], atol=1e-6)


def test_adamw_skips_frozen_and_rejects_nan():
    store = ParamStore()
    store.add("encoder.w", np.ones(2), "encoder")
    store.add("decoder.w", np.ones(2), "decoder")
    store.set_trainable(["decoder"])
    adamw_step(store, {"encoder.w": np.ones(2), "decoder.w": np.ones(2)}, lr=0.1)
    assert np.array_equal(store["encoder.w"].data, np.ones(2))
    assert store.params["encoder.w"].step == 0
    with pytest.raises(NumericError, match="decoder.w"):
        adamw_step(store, {"encoder.w": np.ones(2), "decoder.w": np.array([np.nan, 0.0])}, lr=0.1)


def test_variant_plans():
    a, = variant_plans("A")
    assert (a.trainable_groups, a.lr, a.batch_size, a.epochs) == (GROUPS, 1e-5, 3, 15)
    b, = variant_plans("B", "large-batch")
    assert (b.trainable_groups, b.lr, b.batch_size, b.epochs) == (("decoder",), 1e-4, 8, 30)
    c1, c2 = variant_plans("C", seed=4)
    assert c1.trainable_groups == ("decoder",) and c1.lr == 1e-4
    assert c2.trainable_groups == GROUPS and c2.lr == 1e-5 and c2.seed == 5
    with pytest.raises(ConfigError):
        variant_plans("D")
    with pytest.raises(ConfigError):
        variant_plans("A", "huge")


@pytest.mark.parametrize("kw", [dict(trainable_groups=()), dict(trainable_groups=("head",)), dict(lr=0.0),
                                dict(epochs=0), dict(batch_size=0)])
def test_stage_plan_validation(kw):
    base = dict(name="s", trainable_groups=("decoder",), lr=1e-3, epochs=1, batch_size=2)
    base.update(kw)
    with pytest.raises(ConfigError):
        StagePlan(**base)


def test_fit_increment_scale():
    _, (tr, _, _) = stage_data()
    diffs = np.diff(tr.data, axis=0)[:, tr.grid.sea_mask]
    assert fit_increment_scale(tr) == pytest.approx(diffs.std())
    with pytest.raises(DataError):
        fit_increment_scale(tr.with_data(tr.data, unit="kelvin"))


@pytest.fixture(scope="module")
def data():
    return stage_data()[0]


def test_decoder_stage_leaves_other_groups_bit_identical(data):
    m = small_model()
    rep = run_stage(m, data, StagePlan("B", ("decoder",), 1e-3, 2, 4))
    assert rep.changed_groups() == {"decoder"}
    assert rep.hashes_before["encoder"] == m.params.group_hash("encoder")


def test_full_stage_changes_every_group(data):
    m = small_model()
    randomize_head(m, np.random.default_rng(0), 0.05)  # otherwise upstream gradients are zero
    rep = run_stage(m, data, StagePlan("A", GROUPS, 1e-3, 1, 4, seed=1), validate=False)
    assert rep.changed_groups() == set(GROUPS)
    assert rep.best_epoch == -1


def test_training_is_deterministic(data):
    hashes = []
    for _ in range(2):
        m = small_model(seed=3)
        run_plans(m, data, variant_plans("C", seed=3, epochs=1, batch_size=4))
        hashes.append(m.params.hashes())
    assert hashes[0] == hashes[1]


def test_reported_loss_excludes_padding(data):
    m = small_model()
    windows = data.train[:3]
    sub = type(data)(windows, data.val, data.weights, data.stats)
    rep = run_stage(m, sub, StagePlan("x", ("decoder",), 1e-3, 1, 5), validate=False)
    inputs = np.stack([w.inputs for w in windows])
    targets = np.stack([w.targets[:1] for w in windows])
    expect = weighted_mae(inputs[:, 1:2], targets, data.weights).item()  # untrained model = persistence
    assert rep.epochs[0].train_loss == pytest.approx(expect, abs=1e-14)


def test_best_validation_snapshot_is_restored(data):
    m = small_model()
    rep = run_stage(m, data, StagePlan("B", ("decoder",), 3e-2, 3, 4))
    best = min(e.val_rmse for e in rep.epochs)
    assert rep.epochs[rep.best_epoch].val_rmse == best


def test_checkpoint_round_trip_is_bitwise(tmp_path, data):
    m = small_model()
    run_stage(m, data, StagePlan("B", ("decoder",), 1e-3, 1, 4))
    save_checkpoint(m, tmp_path / "m.ckpt")
    m2 = load_checkpoint(tmp_path / "m.ckpt")
    assert m2.params.hashes() == m.params.hashes()
    assert m2.config == m.config and np.array_equal(m2.statics, m.statics)
    for n in m.params.names():
        a, b = m.params.params[n], m2.params.params[n]
        assert np.array_equal(a.m, b.m) and a.step == b.step and a.frozen == b.frozen
    w = data.val[0]
    with ad.no_grad():
        p1 = forecast_step(m, w.inputs[:1], w.inputs[1:]).data
        p2 = forecast_step(m2, w.inputs[:1], w.inputs[1:]).data
    assert p1.tobytes() == p2.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"garbage" * 10)
    with pytest.raises(ad.ArchiveError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_non_finite_loss_is_a_numeric_error(data):
    m = small_model()
    bad = type(data)(data.train[:2], data.val, data.weights, data.stats)
    bad.train[0].targets.setflags(write=True)
    saved = bad.train[0].targets.copy()
    bad.train[0].targets[...] = np.nan
    try:
        with pytest.raises(NumericError, match="non-finite loss"):
            run_stage(m, bad, StagePlan("x", ("decoder",), 1e-3, 1, 2))
    finally:
        bad.train[0].targets[...] = saved
