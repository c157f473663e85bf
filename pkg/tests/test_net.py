"""Network assembly, weighted loss, prediction, mIoU, checkpoints."""

import math

import numpy as np
import pytest

from rotoscale import net, train
from rotoscale.conv import FeatureMap, InputImage
from rotoscale.data import quarter_turn


def toy_config(**overrides):
    defaults = dict(
        depth=2,
        channels=(4, 5),
        n_classes=2,
        bounds=((0.4, 0.8), (0.8, 1.2)),
        r_train=1,
        r_infer=4,
    )
    defaults.update(overrides)
    return net.ModelConfig(**defaults)


class TestScaleWeights:
    def test_rectified_bounds_random(self):
        rng = np.random.default_rng(0)
        for gamma in (2, 3, 5):
            lo, hi = 1.0 / (2.0 * gamma), (gamma + 1.0) / (2.0 * gamma)
            for _ in range(1000 // gamma):
                sw = net.ScaleWeights(rng.uniform(-15, 15, size=gamma))
                eta = sw.rectified()
                assert abs(eta.sum() - 1.0) < 1e-12
                assert (eta > lo).all() and (eta < hi).all()

    def test_single_scale_degenerates_to_one(self):
        # gamma=1 pins eta~ = 1 exactly (the open-bound statement only has
        # interior for gamma >= 2).
        for logit in (-3.0, 0.0, 9.0):
            assert net.ScaleWeights(np.array([logit])).rectified()[0] == 1.0

    def test_uniform_logits(self):
        sw = net.ScaleWeights(np.zeros(4))
        np.testing.assert_allclose(sw.weights(), 0.25, rtol=1e-15)
        np.testing.assert_allclose(sw.rectified(), 0.25, rtol=1e-15)


class TestHeadAndSoftmax:
    def test_zero_head_uniform(self):
        fmap = FeatureMap(np.random.default_rng(1).normal(size=(3, 1, 4, 4)))
        head = net.Head(np.zeros((5, 3)), np.zeros(5))
        probs = net.head_and_softmax(fmap, head)
        np.testing.assert_allclose(probs, 0.2, rtol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        fmap = FeatureMap(rng.normal(size=(3, 1, 4, 4)))
        head = net.Head(rng.normal(size=(4, 3)), rng.normal(size=4))
        shifted = net.Head(head.weights.copy(), head.bias + 7.3)
        np.testing.assert_allclose(
            net.head_and_softmax(fmap, head), net.head_and_softmax(fmap, shifted), atol=1e-12
        )

    def test_binary_logit_values(self):
        probs = net.softmax_probs(np.array([1.0, 0.0]).reshape(2, 1, 1))
        np.testing.assert_allclose(probs[:, 0, 0], [0.7310585786300049, 0.2689414213699951], rtol=1e-15)

    def test_requires_reduced_map(self):
        fmap = FeatureMap(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ValueError):
            net.head_and_softmax(fmap, net.Head(np.zeros((2, 2)), np.zeros(2)))


class TestLoss:
    def test_single_scale_is_cross_entropy(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(3, 4, 4))
        probs = net.softmax_probs(logits)
        targets = rng.integers(0, 3, (4, 4))
        loss = net.multi_scale_loss([probs], targets, net.ScaleWeights(np.zeros(1)))
        true_probs = np.take_along_axis(probs, targets[None], axis=0)[0]
        np.testing.assert_allclose(loss, -np.log(true_probs).mean(), rtol=1e-12)

    def test_uniform_logits_weight_each_scale_equally(self):
        sw = net.ScaleWeights(np.zeros(3))
        np.testing.assert_allclose(sw.rectified(), [1 / 3] * 3, rtol=1e-15)

    def test_perfect_predictions_near_zero(self):
        targets = np.zeros((3, 3), dtype=int)
        probs = np.zeros((2, 3, 3))
        probs[0] = 1.0
        loss = net.multi_scale_loss([probs], targets, net.ScaleWeights(np.zeros(1)))
        assert 0.0 <= loss < 1e-9

    def test_label_out_of_range(self):
        probs = np.full((2, 2, 2), 0.5)
        with pytest.raises(ValueError):
            net.multi_scale_loss([probs], np.full((2, 2), 2), net.ScaleWeights(np.zeros(1)))


class TestPredict:
    def test_degenerate_config_matches_head_of_forward(self):
        config = toy_config(bounds=((0.4, 0.8),), r_infer=1)
        model = net.build_model(config, seed=4)
        image = InputImage(np.random.default_rng(5).uniform(0, 1, (1, 10, 10)))
        pred = net.predict(image, model)
        fmap = net.forward_streams(image, model)[0]
        expected = net.head_and_softmax(fmap, model.head)
        np.testing.assert_array_equal(pred.per_scale_probs[0], expected)
        np.testing.assert_allclose(pred.combined_probs, expected, atol=1e-15)

    def test_zero_image_zero_prehead(self):
        model = net.build_model(toy_config(), seed=6)
        for fmap in net.forward_streams(InputImage(np.zeros((1, 8, 8))), model):
            assert not fmap.values.any()

    def test_combined_probs_normalized(self):
        model = net.build_model(toy_config(n_classes=3), seed=7)
        image = InputImage(np.random.default_rng(8).uniform(0, 1, (1, 12, 12)))
        pred = net.predict(image, model, rotations=4)
        np.testing.assert_allclose(pred.combined_probs.sum(axis=0), 1.0, atol=1e-9)

    @pytest.mark.parametrize("reduction", ["max", "unified"])
    def test_rot90_label_equivariance(self, reduction):
        model = net.build_model(toy_config(depth=3, channels=(4, 5, 5), n_classes=3), seed=9)
        image = np.random.default_rng(10).uniform(0, 1, (1, 24, 24))
        pred = net.predict(InputImage(image), model, rotations=4, reduction=reduction)
        pred_rot = net.predict(
            InputImage(quarter_turn(image)), model, rotations=4, reduction=reduction
        )
        np.testing.assert_array_equal(pred_rot.label_map, quarter_turn(pred.label_map))

    def test_summed_orientations_mode_runs_end_to_end(self):
        config = toy_config(hidden_mode="summed-orientations", n_classes=3)
        model = net.build_model(config, seed=20)
        image = InputImage(np.random.default_rng(21).uniform(0, 1, (1, 10, 10)))
        pred = net.predict(image, model, rotations=4)
        np.testing.assert_allclose(pred.combined_probs.sum(axis=0), 1.0, atol=1e-9)

    def test_stream_isolation(self):
        # Perturbing one group's materialized filters must leave every other
        # group's probabilities bit-identical.
        model = net.build_model(toy_config(n_classes=3), seed=11)
        image = InputImage(np.random.default_rng(12).uniform(0, 1, (1, 10, 10)))
        tensors = net.materialize_model(model, rotations=4)
        base = net.predict(image, model, tensors=tensors)
        perturbed = [list(layer) for layer in tensors]
        for layer in range(model.config.depth):
            bumped = perturbed[layer][1].values.copy()
            bumped += 0.1
            perturbed[layer][1] = net.FilterTensor(bumped, 0.0, np.zeros(4))
        poked = net.predict(image, model, tensors=perturbed)
        np.testing.assert_array_equal(poked.per_scale_probs[0], base.per_scale_probs[0])
        assert np.abs(poked.per_scale_probs[1] - base.per_scale_probs[1]).max() > 0


class TestMeanIou:
    def test_identical_maps(self):
        maps = np.random.default_rng(13).integers(0, 3, (6, 6))
        assert net.mean_iou(maps, maps, 3) == 1.0

    def test_disjoint_binary(self):
        pred = np.zeros((4, 4), dtype=int)
        pred[:, :2] = 1
        truth = 1 - pred
        assert net.mean_iou(pred, truth, 2) == 0.0

    def test_half_vs_top_oracle(self):
        # Oracle: explicit set counting on the 4x4 grid.
        pred = np.zeros((4, 4), dtype=int)
        pred[:, :2] = 1  # left half
        truth = np.zeros((4, 4), dtype=int)
        truth[:2, :] = 1  # top half
        expected = []
        for c in (0, 1):
            inter = np.sum((pred == c) & (truth == c))
            union = np.sum((pred == c) | (truth == c))
            expected.append(inter / union)
        assert expected == [1 / 3, 1 / 3]
        np.testing.assert_allclose(net.mean_iou(pred, truth, 2), np.mean(expected), rtol=1e-15)

    def test_absent_class_excluded(self):
        pred = np.zeros((3, 3), dtype=int)
        truth = np.zeros((3, 3), dtype=int)
        assert net.mean_iou(pred, truth, 5) == 1.0  # only class 0 present

    def test_margin_crop(self):
        pred = np.zeros((6, 6), dtype=int)
        truth = pred.copy()
        truth[0, :] = 1  # disagreement only on the border
        assert net.mean_iou(pred, truth, 2, margin=1) == 1.0
        assert net.mean_iou(pred, truth, 2) < 1.0


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = net.build_model(toy_config(n_classes=3), seed=14)
        data_rng = np.random.default_rng(15)
        batch = [(data_rng.uniform(0, 1, (1, 8, 8)), data_rng.integers(0, 3, (8, 8)))]
        train.fit(batch, model, train.TrainConfig(step_size=0.1, steps=3))
        net.save_checkpoint(model, tmp_path / "ck")
        loaded = net.load_checkpoint(tmp_path / "ck")
        assert loaded.config == model.config
        for got, want in zip(loaded.banks, model.banks):
            assert got.coeffs.tobytes() == want.coeffs.tobytes()
            assert got.groups == want.groups
        assert loaded.head.weights.tobytes() == model.head.weights.tobytes()
        assert loaded.head.bias.tobytes() == model.head.bias.tobytes()
        assert loaded.scale_weights.logits.tobytes() == model.scale_weights.logits.tobytes()


class TestToyTraining:
    def test_loss_decreases_on_two_blob_problem(self):
        # Two-class image: a bright blob on dark background; class = blob mask.
        size = 12
        rows, cols = np.mgrid[0:size, 0:size].astype(float)
        blob = np.exp(-((rows - 4.0) ** 2 + (cols - 7.0) ** 2) / 6.0)
        image = (0.1 + 0.9 * blob / blob.max())[None]
        mask = (blob > 0.3).astype(int)
        model = net.build_model(
            toy_config(channels=(4, 4), bounds=((0.4, 0.8),), r_infer=1), seed=16
        )
        config = train.TrainConfig(step_size=1e-2, steps=50)
        _, trace = train.fit([(image, mask)], model, config)
        violations = sum(1 for a, b in zip(trace, trace[1:]) if b > a)
        assert violations <= 5
        assert trace[-1] < trace[0]
