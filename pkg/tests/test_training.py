import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deunet import oracles, verify
from deunet.data import clip_indices, make_clip
from deunet.errors import ConfigurationError, DataError, StateError, TrainingDiverged
from deunet.network import NetConfig
from deunet.params import ModelParams
from deunet.phantom import PhantomSpec, clip_timestamps, generate_phantom
from deunet.tensor import Parameter
from deunet import training
from deunet.training import (Adam, EarlyStopping, TrainConfig, apply_transform, augment, cross_entropy,
                             kfold_split, train)

TINY_NET = NetConfig(tdam_channels=2, offset_depth=1, offset_base_channels=2, depth=1, base_channels=2)
TINY_DATA = PhantomSpec(size=16, n_clips=10, clips_per_subject=2)


@pytest.fixture(scope="module")
def tiny_clips():
    return generate_phantom(TINY_DATA, seed=3)


def tiny_cfg(**kw):
    base = dict(lr=1e-2, batch_size=4, max_epochs=3, patience_epochs=5, folds=5, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- loss

def test_cross_entropy_uniform_logits_is_log4():
    loss, _ = cross_entropy(np.zeros((2, 4, 3, 3)), np.zeros((2, 3, 3), np.int64))
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_confident_correct_near_zero():
    gt = np.array([[0, 1], [2, 3]])
    logits = np.moveaxis(np.eye(4)[gt], -1, 0) * 50.0
    loss, d = cross_entropy(logits, gt)
    assert loss < 1e-20
    assert np.abs(d).max() < 1e-20


def test_cross_entropy_gradient(rng):
    gt = rng.integers(0, 4, (2, 5, 5))

    def f(z):
        loss, d = cross_entropy(z, gt)
        return np.array([loss]), lambda g: (g[0] * d,)

    err = verify.check_gradient(f, [rng.standard_normal((2, 4, 5, 5))], eps=1e-6)
    assert err < 1e-6


def test_cross_entropy_gradient_rows_sum_to_zero(rng):
    _, d = cross_entropy(rng.standard_normal((1, 4, 6, 6)), rng.integers(0, 4, (1, 6, 6)))
    np.testing.assert_allclose(d.sum(axis=1), 0.0, atol=1e-15)


@pytest.mark.parametrize("gt", [np.full((1, 2, 2), 4), np.full((1, 2, 2), -1), np.zeros((1, 3, 2), int)])
def test_cross_entropy_rejects_bad_labels(gt):
    with pytest.raises(DataError):
        cross_entropy(np.zeros((1, 4, 2, 2)), gt)


# ---------------------------------------------------------------- optimizer

def _single(value):
    ps = ModelParams()
    ps.add(Parameter("w", np.array(value, dtype=np.float64)))
    return ps


def _feed(ps, g):
    ps.zero_grad()
    ps["w"].grad[...] = g
    ps.grads_ready = True


@given(st.floats(-3, 3), st.lists(st.floats(-10, 10), min_size=1, max_size=15),
       st.sampled_from([0.0, 1e-4, 0.1]))
def test_adam_matches_scalar_recurrence(theta, grads, wd):
    ps = _single([theta])
    opt = Adam(ps, lr=1e-2, weight_decay=wd)
    expected = oracles.adam_scalar(theta, grads, 1e-2, wd)
    for g, want in zip(grads, expected):
        _feed(ps, g)
        opt.step()
        assert abs(ps["w"].value[0] - want) <= 1e-12 * max(1.0, abs(want))


def test_adam_first_step_size_is_lr():
    ps = _single([1.0, -2.0, 0.5])
    opt = Adam(ps, lr=0.01, weight_decay=0.0)
    _feed(ps, np.array([3.0, -0.2, 1e-3]))
    opt.step()
    np.testing.assert_allclose(ps["w"].value, [0.99, -1.99, 0.49], atol=1e-5)


def test_adam_zero_gradient_only_decays():
    ps = _single([2.0])
    opt = Adam(ps, lr=0.1, weight_decay=0.5)
    _feed(ps, 0.0)
    opt.step()
    assert ps["w"].value[0] == pytest.approx(2.0 * (1 - 0.05))


def test_adam_refuses_to_step_without_gradients():
    ps = _single([1.0])
    with pytest.raises(StateError):
        Adam(ps).step()


# ---------------------------------------------------------------- augmentation

def test_identity_transform(rng):
    f = rng.standard_normal((3, 5, 5)).astype(np.float32)
    m = rng.integers(0, 4, (5, 5)).astype(np.uint8)
    f2, m2 = apply_transform(f, m)
    assert np.array_equal(f, f2) and np.array_equal(m, m2)


@pytest.mark.parametrize("flags", [dict(mirror=True), dict(flip=True)])
def test_flips_are_involutions(rng, flags):
    f = rng.standard_normal((3, 4, 6))
    m = rng.integers(0, 4, (4, 6))
    f2, m2 = apply_transform(*apply_transform(f, m, **flags), **flags)
    assert np.array_equal(f, f2) and np.array_equal(m, m2)


@given(st.integers(0, 2 ** 32 - 1))
def test_augment_keeps_frames_and_mask_aligned(seed):
    # frames carry the mask in every channel, so any shared transform keeps them equal
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 4, (6, 6)).astype(np.uint8)
    f = np.stack([m, m + 10, m + 20]).astype(np.float32)
    f2, m2 = augment(f, m, np.random.default_rng(seed))
    assert np.array_equal(f2[0], m2) and np.array_equal(f2[2] - 20, m2)
    assert np.array_equal(np.bincount(m.ravel(), minlength=4), np.bincount(m2.ravel(), minlength=4))


def test_augment_reaches_all_eight_symmetries():
    f = np.arange(9.0).reshape(1, 3, 3)
    m = np.zeros((3, 3), np.uint8)
    seen = {augment(f, m, np.random.default_rng(s))[0].tobytes() for s in range(200)}
    assert len(seen) == 8


# ---------------------------------------------------------------- splits and stopping

def _fake_clips(n_subjects, per_subject=3):
    class C:
        def __init__(self, s):
            self.subject = s
    return [C(s) for s in range(n_subjects) for _ in range(per_subject)]


@pytest.mark.parametrize("n_subjects,folds", [(10, 5), (7, 5), (5, 5), (9, 3)])
def test_kfold_disjoint_exhaustive_grouped(n_subjects, folds):
    clips = _fake_clips(n_subjects)
    splits = kfold_split(clips, folds, seed=4)
    assert len(splits) == folds
    vals = np.concatenate([v for _, v in splits])
    assert sorted(vals) == list(range(len(clips)))
    for tr, va in splits:
        assert not set(tr) & set(va)
        assert len(tr) + len(va) == len(clips)
        assert not {clips[i].subject for i in tr} & {clips[i].subject for i in va}


def test_kfold_deterministic_and_seeded():
    clips = _fake_clips(10)
    a = kfold_split(clips, 5, seed=0)
    b = kfold_split(clips, 5, seed=0)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    c = kfold_split(clips, 5, seed=1)
    assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a, c))


@pytest.mark.parametrize("n_subjects,folds", [(4, 5), (10, 1)])
def test_kfold_rejects_impossible_splits(n_subjects, folds):
    with pytest.raises(ConfigurationError):
        kfold_split(_fake_clips(n_subjects), folds)


@pytest.mark.parametrize("patience", [0, 1, 3, 7])
def test_early_stopping_fires_after_patience_stale_epochs(patience):
    stop = EarlyStopping(patience)
    scores = [0.5, 0.6] + [0.6] * 20
    for epoch, s in enumerate(scores, 1):
        _, done = stop.update(epoch, s)
        if done:
            break
    # epoch 1 improves; with patience 0 the first update already stops
    assert epoch == (1 if patience == 0 else 2 + patience)
    assert stop.best == (0.5 if patience == 0 else 0.6)


def test_early_stopping_improvement_resets_counter():
    stop = EarlyStopping(2)
    for epoch, s in enumerate([0.1, 0.1, 0.2, 0.2], 1):
        _, done = stop.update(epoch, s)
        assert not done
    assert stop.best_epoch == 3 and stop.stale == 1


@pytest.mark.parametrize("kw", [dict(lr=0), dict(weight_decay=-1), dict(batch_size=0), dict(fold=5),
                                dict(folds=1), dict(patience_epochs=-1), dict(dtype="float16")])
def test_train_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


# ---------------------------------------------------------------- training loop

def test_train_is_deterministic(tiny_clips):
    a = train(tiny_clips, "full", tiny_cfg(), TINY_NET)
    b = train(tiny_clips, "full", tiny_cfg(), TINY_NET)
    assert a.history == b.history
    assert all(np.array_equal(a.best_state[k], b.best_state[k]) for k in a.best_state)


def test_train_changes_weights_and_reports_best(tiny_clips):
    res = train(tiny_clips, "no_tdam", tiny_cfg(), TINY_NET)
    assert len(res.history) == 3
    assert res.best_dice == max(h[2] for h in res.history)
    assert res.history[res.best_epoch - 1][2] == res.best_dice


def test_patience_zero_runs_one_epoch(tiny_clips):
    seen = []
    res = train(tiny_clips, "full", tiny_cfg(patience_epochs=0, max_epochs=10), TINY_NET,
                on_epoch=lambda *a: seen.append(a))
    assert len(res.history) == 1 and len(seen) == 1 and res.best_epoch == 1


def test_train_rejects_wrong_temporal_window(tiny_clips):
    with pytest.raises(ConfigurationError):
        train(tiny_clips, "full", tiny_cfg(), NetConfig(r=2))


def test_train_reports_divergence(tiny_clips, monkeypatch):
    monkeypatch.setattr(training, "cross_entropy", lambda z, g: (float("nan"), np.zeros_like(z)))
    with pytest.raises(TrainingDiverged):
        train(tiny_clips, "full", tiny_cfg(), TINY_NET)


# ---------------------------------------------------------------- data and phantom

def test_clip_indices_boundaries():
    assert list(clip_indices(0, 1, 10)) == [9, 0, 1]
    assert list(clip_indices(9, 2, 10)) == [7, 8, 9, 0, 1]
    assert list(clip_indices(0, 2, 10, "clamp")) == [0, 0, 0, 1, 2]
    with pytest.raises(ConfigurationError):
        clip_indices(0, 1, 10, "mirror")


def test_make_clip_centre_frame():
    cine = np.arange(5)[:, None, None] * np.ones((1, 2, 2))
    assert list(make_clip(cine, 2, 1)[:, 0, 0]) == [1, 2, 3]


@pytest.mark.parametrize("count", [1, 2, 3, 5, 7])
def test_timestamps_include_ed_and_es(count):
    ts = clip_timestamps(10, count)
    assert 0 in ts
    if count > 1:
        assert 5 in ts
    assert len(ts) == len(set(ts)) == min(count, 10)


def test_phantom_labels_and_grouping(tiny_clips):
    assert len(tiny_clips) == 10
    assert sorted({c.subject for c in tiny_clips}) == [0, 1, 2, 3, 4]
    for c in tiny_clips:
        assert c.frames.shape == (3, 16, 16) and c.frames.dtype == np.float32
        assert set(np.unique(c.mask)) == {0, 1, 2, 3}
        assert c.phase == {0: "ED", 5: "ES"}.get(c.timestamp, "other")


def test_phantom_is_seeded():
    a = generate_phantom(TINY_DATA, seed=8)
    b = generate_phantom(TINY_DATA, seed=8)
    c = generate_phantom(TINY_DATA, seed=9)
    assert all(x.equals(y) for x, y in zip(a, b))
    assert not all(x.equals(y) for x, y in zip(a, c))


def test_phantom_neighbour_frames_are_misaligned():
    # drift plus contraction makes the centre frame differ from its neighbours
    clip = generate_phantom(PhantomSpec(size=32, n_clips=1, noise=0.0), seed=0)[0]
    assert np.abs(clip.frames[0] - clip.frames[1]).mean() > 1e-3
