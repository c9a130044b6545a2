import math

import numpy as np
import pytest

from t1q.autodiff import numeric_gradient
from t1q.checkpoint import CheckpointError
from t1q.segnet import (AdamState, AugmentParams, Fold, PlateauSchedule, Sample, TrainConfig, UNetConfig,
                        adam_step, apply_augment, augment, build_unet, dice_loss, evaluate_loss, load_model,
                        make_folds, one_hot, predict, save_model, train)
from t1q import rng
from t1q.volume import UNLABELED


def softmax(z):
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


class TestDice:
    def test_perfect_prediction(self):
        lab = np.array([[[0, 1], [2, 2]]] * 2, dtype=np.uint8)
        probs, _ = one_hot(lab, 4)
        loss, _ = dice_loss(probs[0], lab)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_hand_case(self):
        # two voxels, class 1 on both, p1 = [0.5, 1.0]
        lab = np.array([[[1, 1]]], dtype=np.uint8)
        probs = np.zeros((2, 1, 1, 2))
        probs[1] = [[[0.5, 1.0]]]
        probs[0] = 1 - probs[1]
        loss, _ = dice_loss(probs, lab)
        eps = 1e-5
        assert loss == pytest.approx(1 - (2 * 1.5 + eps) / (1.5 + 2 + eps), rel=1e-14)

    def test_unlabeled_voxels_ignored(self, gen):
        lab = gen.integers(0, 3, (3, 3, 3)).astype(np.uint8)
        lab[0] = UNLABELED
        p = softmax(gen.normal(size=(3, 3, 3, 3)))
        q = p.copy()
        q[:, 0] = softmax(gen.normal(size=(3, 3, 3)))
        assert dice_loss(p, lab)[0] == dice_loss(q, lab)[0]
        assert np.all(dice_loss(p, lab)[1][:, 0] == 0)

    def test_gradient_matches_fd(self, gen):
        lab = gen.integers(0, 3, (2, 3, 2)).astype(np.uint8)
        lab[0, 0, 0] = UNLABELED
        p = gen.uniform(0.1, 1, (4, 2, 3, 2))
        _, g = dice_loss(p, lab)
        num = numeric_gradient(lambda: dice_loss(p, lab)[0], p)
        np.testing.assert_allclose(g.ravel(), num, rtol=1e-6, atol=1e-10)

    def test_absent_class_excluded(self):
        lab = np.zeros((2, 2, 2), np.uint8)
        probs = np.zeros((3, 2, 2, 2))
        probs[0] = 1.0
        assert dice_loss(probs, lab)[0] == pytest.approx(0.0, abs=1e-12)

    def test_all_unlabeled_raises(self):
        with pytest.raises(ValueError):
            dice_loss(np.ones((2, 2, 2, 2)) / 2, np.full((2, 2, 2), UNLABELED, np.uint8))


def test_adam_hand_values():
    theta = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.2])
    adam_step(theta, {"w": g1}, state, lr=0.1)
    # first step: m_hat = g, v_hat = g^2 -> step lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0]) - 0.1 * g1 / (np.abs(g1) + 1e-8)
    np.testing.assert_allclose(theta["w"], expected, rtol=1e-15)
    adam_step(theta, {"w": g2}, state, lr=0.1)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(theta["w"], expected - step, rtol=1e-14)


def test_adam_weight_decay_adds_l2_term():
    theta = {"w": np.array([2.0])}
    adam_step(theta, {"w": np.array([0.0])}, AdamState(), lr=0.1, weight_decay=0.5)
    assert theta["w"][0] == pytest.approx(2.0 - 0.1, rel=1e-7)


class TestSchedule:
    def test_equal_loss_is_not_improvement(self):
        s = PlateauSchedule(1.0, patience=2, stop_patience=3)
        assert not s.step(1, 0.5)
        assert not s.step(2, 0.5)
        assert not s.step(3, 0.5)
        assert s.drops == [3] and s.lr == 0.9
        assert s.step(4, 0.5)

    def test_improvement_resets_counters(self):
        s = PlateauSchedule(1.0, patience=2, stop_patience=3)
        for e, v in enumerate([1.0, 1.0, 0.9, 1.0, 0.8, 1.0, 1.0], start=1):
            assert not s.step(e, v)
        assert s.best_epoch == 5 and s.drops == [7]


class TestFolds:
    def test_24_subjects_in_8_folds(self):
        ids = [f"s{i:02d}" for i in range(24)]
        folds = make_folds(ids, k=8, seed=1, n_val=2)
        assert len(folds) == 8
        tests = [s for f in folds for s in f.test]
        assert sorted(tests) == ids
        for f in folds:
            assert (len(f.train), len(f.val), len(f.test)) == (19, 2, 3)
            assert not set(f.train) & set(f.val) and not set(f.train) & set(f.test) and not set(f.val) & set(f.test)

    def test_seeded(self):
        ids = list(range(8))
        assert make_folds(ids, 4, seed=2) == make_folds(ids, 4, seed=2)
        assert make_folds(ids, 4, seed=2) != make_folds(ids, 4, seed=3)

    def test_invalid(self):
        with pytest.raises(ValueError):
            make_folds(list(range(10)), k=4)
        with pytest.raises(ValueError):
            make_folds([1, 1, 2, 3], k=2)


class TestAugment:
    def sample(self, gen):
        lab = gen.integers(0, 4, (10, 10, 10)).astype(np.uint8)
        lab[gen.random((10, 10, 10)) < 0.2] = UNLABELED
        return Sample(gen.normal(size=(2, 10, 10, 10)), lab)

    def test_identity_is_crop(self, gen):
        s = self.sample(gen)
        out = apply_augment(s, AugmentParams(crop_origin=(1, 2, 3)), (4, 4, 4))
        np.testing.assert_array_equal(out.image, s.image[:, 1:5, 2:6, 3:7])
        np.testing.assert_array_equal(out.labels, s.labels[1:5, 2:6, 3:7])

    def test_flip(self, gen):
        s = self.sample(gen)
        out = apply_augment(s, AugmentParams(flip=True), (10, 10, 10))
        np.testing.assert_array_equal(out.labels, s.labels[::-1])

    def test_labels_stay_discrete(self, gen):
        s = self.sample(gen)
        params = AugmentParams(scale=1.07, rotation=(5.0, -3.0, 8.0), translation=(1.5, 0, -2))
        out = apply_augment(s, params, (10, 10, 10))
        assert set(np.unique(out.labels)) <= set(np.unique(s.labels)) | {UNLABELED}

    def test_seeded(self, gen):
        s = self.sample(gen)
        a = augment(s, rng.stream(0, "augment", 1), (8, 8, 8))
        b = augment(s, rng.stream(0, "augment", 1), (8, 8, 8))
        assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)


class TestModel:
    def test_predict_and_checkpoint(self, tmp_path, gen):
        model = build_unet(UNetConfig(2, num_classes=3, depth=1, base_channels=2), seed=0)
        x = gen.normal(size=(2, 4, 4, 4))
        probs, labels = predict(model, x)
        assert labels.dtype == np.uint8 and np.array_equal(labels, probs.argmax(axis=0))
        with pytest.raises(ValueError):
            predict(model, x[:1])
        save_model(model, tmp_path / "m.t1q")
        loaded, _ = load_model(tmp_path / "m.t1q")
        assert loaded.checksum() == model.checksum()
        (tmp_path / "bad.t1q").write_bytes((tmp_path / "m.t1q").read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "bad.t1q")

    def test_dims_must_be_divisible(self, gen):
        model = build_unet(UNetConfig(1, num_classes=2, depth=2, base_channels=2), seed=0)
        with pytest.raises(ValueError, match="divisible"):
            predict(model, gen.normal(size=(1, 6, 8, 8)))

    def test_train_keeps_best_parameters(self, small_phantom):
        ph = small_phantom
        sample = Sample(np.stack([ph.mprage.data, ph.fgatir.data]), ph.labels.labels)
        data = {"a": sample, "b": sample}
        model = build_unet(UNetConfig(2, num_classes=5, depth=1, base_channels=2), seed=0)
        rep = train(model, data, Fold(("a",), ("b",), ()), TrainConfig(crop_size=(8, 8, 8), max_epochs=3))
        assert evaluate_loss(model, [sample], (8, 8, 8)) == rep.best_val_loss
        assert len(rep.epochs) == 3 and rep.stop_reason == "MAX_EPOCHS"
        assert all(math.isfinite(r.train_loss) for r in rep.epochs)

    def test_train_validates(self, small_phantom):
        ph = small_phantom
        s = Sample(np.stack([ph.mprage.data]), ph.labels.labels)
        model = build_unet(UNetConfig(1, num_classes=5, depth=1, base_channels=2), seed=0)
        with pytest.raises(ValueError):
            train(model, {"a": s}, Fold(("a",), (), ()))
        with pytest.raises(ValueError):
            train(model, {"a": s, "b": s}, Fold(("a",), ("b",), ()), TrainConfig(crop_size=(32, 32, 32)))
