import itertools
import json

import numpy as np
import pytest

from conftest import random_unit
from staterect import trainer as trainer_mod
from staterect.core import l2_normalize
from staterect.errors import ConfigError, NonFiniteLoss, TooFewPoints
from staterect.model import EmbeddingHead, checkpoint_to_text
from staterect.synthdata import GenConfig, generate
from staterect.trainer import (TrainConfig, batches, epoch_order, kmeans, kmeans_init, lr_at,
                               train)
from staterect.wdbr import RectifierConfig


@pytest.fixture(scope="module")
def small_train():
    cfg = GenConfig(n_identities=20, n_test_identities=5, J=4, images_per_pair=3, dim=8,
                    rotated_dims=2, noise_sigma=0.05, offset_range=(0.0, 1.0))
    return generate(cfg, 0)[0]


def quick_cfg(**kw):
    base = dict(K=30, lam=1.0, T=5, batch_size=32, iterations=40, lr=0.01,
                lr_milestones=[25, 35], rectifier=RectifierConfig(b=0.7))
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_lr_steps(self):
        cfg = TrainConfig(lr=0.05, lr_milestones=[500, 700], lr_decay=10)
        assert lr_at(0, cfg) == 0.05
        assert lr_at(499, cfg) == 0.05
        assert lr_at(500, cfg) == pytest.approx(0.005)
        assert lr_at(699, cfg) == pytest.approx(0.005)
        assert lr_at(700, cfg) == pytest.approx(0.0005)

    def test_stratified_batches_cover_every_state(self):
        states = np.repeat([1, 2, 3, 4], 50)
        rng = np.random.default_rng(0)
        gen = batches(states, 32, rng, stratified=True)
        for _ in range(30):
            counts = np.bincount(states[next(gen)], minlength=5)[1:]
            assert counts.min() >= 2

    def test_epoch_is_a_permutation(self):
        states = np.array([1, 1, 1, 2, 2, 3, 3, 3, 3])
        for strat in (True, False):
            order = epoch_order(states, np.random.default_rng(1), strat)
            assert sorted(order.tolist()) == list(range(9))


def brute_force_two_means(X):
    best = None
    n = X.shape[0]
    for mask in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + mask)
        if lab.min() == lab.max():
            continue
        cost = sum(((X[lab == c] - X[lab == c].mean(0)) ** 2).sum() for c in (0, 1))
        if best is None or cost < best[0]:
            best = (cost, lab)
    return best[1]


class TestKMeans:
    def test_single_centroid_is_normalized_mean(self, rng):
        X = random_unit(rng, 30, 4)
        bank = kmeans_init(X, 1, rng)
        np.testing.assert_allclose(bank.mu[0], l2_normalize(X.mean(0)), atol=1e-12)
        assert bank.p.tolist() == [1.0]

    def test_one_centroid_per_point(self, rng):
        X = random_unit(rng, 6, 3)
        bank = kmeans_init(X, 6, rng)
        order = np.lexsort(bank.mu.T)
        np.testing.assert_allclose(bank.mu[order], X[np.lexsort(X.T)], atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_two_blobs_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_unit(rng, 4), random_unit(rng, 4)
        X = l2_normalize(np.vstack([a + 0.1 * rng.standard_normal((6, 4)),
                                    b + 0.1 * rng.standard_normal((6, 4))]))
        lab = brute_force_two_means(X)
        bank = kmeans_init(X, 2, rng)
        for c in (0, 1):
            target = l2_normalize(X[lab == c].mean(0))
            angle = np.arccos(np.clip(np.max(bank.mu @ target), -1, 1))
            assert angle < 0.1

    def test_empty_cluster_reseeded(self):
        # duplicated points make a naive Lloyd step leave a cluster empty
        X = np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [11.0, 0.0], [12.0, 0.0]])
        C, labels = kmeans(X, 3, np.random.default_rng(0))
        assert len(np.unique(labels)) == 3

    def test_too_few_points(self, rng):
        X = np.vstack([random_unit(rng, 3)] * 5)
        with pytest.raises(TooFewPoints):
            kmeans_init(X, 2, rng)


class TestConfig:
    def test_round_trip(self):
        cfg = TrainConfig(K=12, lam=3.0, rectifier=[RectifierConfig(5.0, 0.9), RectifierConfig()])
        text = json.dumps(cfg.to_dict())
        assert '"lambda": 3.0' in text and '"a": "inf"' in text
        assert TrainConfig.from_dict(json.loads(text)) == cfg

    @pytest.mark.parametrize("bad", [{"K": 0}, {"lambda": -1}, {"T": 0},
                                     {"lr_milestones": [5, 5]}, {"colour": "red"}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(bad)

    def test_wrong_number_of_kind_rectifiers(self):
        with pytest.raises(ConfigError):
            TrainConfig(rectifier=[RectifierConfig()]).rectifiers(2)


class TestTrain:
    def test_zero_iterations(self, small_train):
        res = train(small_train, quick_cfg(iterations=0))
        head = EmbeddingHead.identity(small_train.D)
        assert np.array_equal(res.head.W, head.W) and np.array_equal(res.head.b, head.b)
        ref = kmeans_init(head(small_train.features), 30,
                          trainer_mod.rng_stream(0, trainer_mod.STREAM_KMEANS))
        np.testing.assert_array_equal(res.bank.mu, ref.mu)
        assert len(res.history) == 0

    def test_deterministic(self, small_train):
        a = train(small_train, quick_cfg(seed=3))
        b = train(small_train, quick_cfg(seed=3))
        assert checkpoint_to_text(a.head, a.bank, a.buffer) == checkpoint_to_text(b.head, b.bank, b.buffer)
        c = train(small_train, quick_cfg(seed=4))
        assert checkpoint_to_text(a.head, a.bank) != checkpoint_to_text(c.head, c.bank)

    def test_unit_norm_and_history(self, small_train):
        res = train(small_train, quick_cfg())
        np.testing.assert_allclose(np.linalg.norm(res.bank.mu, axis=1), 1.0, atol=1e-9)
        assert len(res.history) == 40
        assert res.history.refresh_iters == [5, 10, 15, 20, 25, 30, 35, 40]
        assert res.history.lr[24] == 0.01 and res.history.lr[25] == pytest.approx(0.001)
        lines = res.history.to_csv().splitlines()
        assert lines[0] == "iter,L_surr,L_drift,lr,active_K,fallbacks" and len(lines) == 41

    def test_refresh_cadence(self, small_train):
        res = train(small_train, quick_cfg(rectifier=RectifierConfig(b=0.5)))
        act = res.history.active_K
        for it in range(1, len(act)):
            if it % 5 != 0:
                assert act[it] == act[it - 1]
        assert min(res.history.refresh_active) < 30

    def test_nullified_classes_receive_nothing(self, small_train):
        res = train(small_train, quick_cfg(rectifier=RectifierConfig(b=0.5)))
        assert sum(res.history.nullified_hits) == 0
        assert sum(res.history.fallbacks) == 0
        # a refresh nullifies exactly the classes whose windowed R exceeded b
        for R, act in zip(res.history.refresh_R, res.history.refresh_active):
            assert act == int(np.count_nonzero(R <= 0.5))

    def test_full_window_variant(self, small_train):
        res = train(small_train, quick_cfg(mpi_window="full"))
        for counts in res.history.refresh_counts:
            assert counts[0].sum() == len(small_train)

    def test_zero_lambda_equals_disabled_drift(self, small_train):
        a = train(small_train, quick_cfg(lam=0.0, enable_wdbr=False))
        b = train(small_train, quick_cfg(lam=5.0, enable_wdbr=False, enable_wfdr=False))
        assert checkpoint_to_text(a.head, a.bank) == checkpoint_to_text(b.head, b.bank)
        assert all(v == 0 for v in b.history.L_drift)

    def test_basic_model_never_rectifies(self, small_train):
        res = train(small_train, quick_cfg(enable_wdbr=False, enable_wfdr=False))
        assert np.all(res.bank.p == 1.0)

    def test_multi_kind(self):
        cfg = GenConfig(n_identities=20, n_test_identities=4, J=(2, 3), images_per_pair=2, dim=6,
                        rotated_dims=2)
        tr, _ = generate(cfg, 1)
        res = train(tr, quick_cfg(rectifier=[RectifierConfig(b=0.8), RectifierConfig(5.0, 0.8)]))
        assert len(res.history.refresh_counts[0]) == 2
        assert res.history.refresh_counts[0][1].shape == (30, 3)

    def test_non_finite_loss(self, small_train, monkeypatch):
        real = trainer_mod.surrogate_loss_and_dX

        def poisoned(bank, X, y):
            loss, dX, dmu = real(bank, X, y)
            return float("nan"), dX, dmu

        monkeypatch.setattr(trainer_mod, "surrogate_loss_and_dX", poisoned)
        with pytest.raises(NonFiniteLoss) as err:
            train(small_train, quick_cfg())
        assert err.value.iteration == 0

    def test_empty_dataset(self, small_train):
        with pytest.raises(ConfigError):
            train(small_train.subset(np.array([], dtype=int)), quick_cfg())
