import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gliomapipe.errors import ConfigError, MissingModalityError, NoTrainingDataError, ShapeError
from gliomapipe.nn import softmax_weighted_ce
from gliomapipe.training import (
    NetworkConfig,
    TrainConfig,
    augment_hflip,
    build_network,
    collect_slices,
    load_network,
    predict_logits,
    segment_study,
    train,
)
from gliomapipe.volume_io import CHANNEL_ORDER, SegmentationVolume, Study, Volume
from helpers import numeric_grad, rel_error

TINY = NetworkConfig(encoder_filters=[2, 4], levels=2)


def tiny_study(seed, dims=(16, 16, 6), pid="T"):
    """Square lesion with a label-1 core and label-4 spot on a noisy background."""
    rng = np.random.default_rng(seed)
    labels = np.zeros(dims, np.uint8)
    labels[4:12, 4:12, 1:5] = 2
    labels[6:10, 6:10, 2:4] = 1
    labels[6:8, 10:12, 2:4] = 4
    means = np.array([[0, 0, 0, 0], [1, 2, -1, -1], [2, 1, 0, 0], [1, 1, 0, 3], [0, 0, 0, 0]], float)
    vols = {m: Volume(means[labels, k] + rng.normal(0, 0.3, dims), (1, 1, 1), m) for k, m in enumerate(CHANNEL_ORDER)}
    return Study(pid, vols, SegmentationVolume(labels), 50.0, 300.0)


class TestArchitecture:
    def test_default_layer_count(self):
        net = build_network()
        assert len(net.conv_layers()) == 23 == net.cfg.expected_conv_layers

    def test_identity_shape(self):
        net = build_network()
        out = net.forward(np.zeros((1, 4, 64, 64), np.float32), training=False)
        assert out.shape == (1, 4, 64, 64)
        assert out.dtype == np.float32

    def test_indivisible_input(self):
        with pytest.raises(ShapeError):
            build_network().forward(np.zeros((1, 4, 60, 60), np.float32))

    def test_pad_and_crop_inference(self):
        net = build_network(TINY)
        x = np.random.default_rng(0).normal(size=(2, 4, 10, 7)).astype(np.float32)
        assert predict_logits(net, x).shape == (2, 4, 10, 7)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            NetworkConfig(encoder_filters=[8, 16], levels=4)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(class_weights=(1, 1, 0, 1))

    def test_whole_network_gradient(self):
        net = build_network(TINY, seed=3, dtype=np.float64)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 4, 8, 8))
        t = rng.integers(0, 4, size=(2, 8, 8))

        def loss_at(inp):
            return softmax_weighted_ce(net.forward(inp, training=True), t)[0]

        _, g = softmax_weighted_ce(net.forward(x, training=True), t)
        net.zero_grad()
        gx = net.backward(g)
        assert rel_error(gx, numeric_grad(loss_at, x)) <= 1e-6

        params, grads = net.parameters()
        for name in ("enc0.conv1.weight", "up1.weight", "head.bias", "bottleneck.bn2.gamma"):
            analytic = grads[name].copy()
            p = params[name]

            def loss_p(v, p=p):
                old = p.copy()
                p[...] = v
                out = loss_at(x)
                p[...] = old
                return out

            assert rel_error(analytic, numeric_grad(loss_p, p.copy())) <= 1e-6, name


class TestLossProperties:
    def test_equal_weights_is_plain_mean(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(3, 4, 5, 5))
        t = rng.integers(0, 4, size=(3, 5, 5))
        loss, _ = softmax_weighted_ce(z, t, (2.5, 2.5, 2.5, 2.5))
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        plain = -np.take_along_axis(logp, t[:, None], axis=1).mean()
        assert abs(loss - plain) <= 1e-6

    @settings(max_examples=40, deadline=None)
    # a grid of eighths keeps 3z + 7 exact, so no transform can create new ties
    @given(hnp.arrays(np.float64, (1, 4, 3, 3), elements=st.integers(-40, 40).map(lambda k: k / 8)))
    def test_argmax_invariant_to_monotone_transform(self, z):
        base = z.argmax(axis=1)
        np.testing.assert_array_equal(np.exp(z).argmax(axis=1), base)
        np.testing.assert_array_equal((3 * z + 7).argmax(axis=1), base)


class TestData:
    def test_hflip(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4, 5, 6))
        y = rng.integers(0, 4, size=(3, 5, 6))
        fx, fy = augment_hflip(x, y, rng, p=1.0)
        np.testing.assert_array_equal(fx, x[..., ::-1])
        np.testing.assert_array_equal(fy, y[..., ::-1])
        same_x, same_y = augment_hflip(x, y, rng, p=0.0)
        np.testing.assert_array_equal(same_x, x)
        np.testing.assert_array_equal(same_y, y)

    def test_lesion_only_slices(self):
        images, classes = collect_slices([tiny_study(0)], lesion_only=True)
        assert len(images) == 4
        assert all(c.any() for c in classes)
        # label 4 is stored as class 3
        assert classes.max() == 3

    def test_no_data(self):
        bare = tiny_study(0)
        with pytest.raises(NoTrainingDataError):
            collect_slices([Study("B", bare.volumes)], lesion_only=True)


class TestTrain:
    def test_determinism_and_checkpoints(self, tmp_path):
        studies = [tiny_study(s) for s in range(2)]
        cfg = TrainConfig(epochs=2, seed=5, lr=1e-2)
        reports = []
        for k in range(2):
            net = build_network(TINY, seed=1)
            reports.append(train(net, studies, cfg, checkpoint_path=tmp_path / f"m{k}.ckpt"))
        assert reports[0].epoch_losses[0] == reports[1].epoch_losses[0]
        assert (tmp_path / "m0.ckpt").read_bytes() == (tmp_path / "m1.ckpt").read_bytes()
        assert (tmp_path / "m0.ckpt.last").exists()

        loaded, meta, adam = load_network(tmp_path / "m0.ckpt")
        assert meta["epoch"] == reports[0].best_epoch
        assert adam is not None and adam.t > 0
        x = studies[0].stacked().transpose(3, 0, 1, 2)
        np.testing.assert_array_equal(predict_logits(loaded, x), predict_logits(net, x))

    def test_loss_decreases(self):
        studies = [tiny_study(s) for s in range(3)]
        net = build_network(TINY, seed=0)
        report = train(net, studies, TrainConfig(epochs=15, lr=1e-2, batch_size=2))
        assert report.epoch_losses[-1] < 0.5 * report.epoch_losses[0]

    def test_validation_losses_recorded(self):
        net = build_network(TINY, seed=0)
        report = train(net, [tiny_study(0)], TrainConfig(epochs=2), validation=[tiny_study(9)])
        assert len(report.val_losses) == 2
        assert all(np.isfinite(report.val_losses))


class TestSegment:
    @pytest.mark.parametrize("cls,label", [(0, 0), (3, 4), (2, 2)])
    def test_forced_head_bias(self, cls, label):
        net = build_network(TINY)
        net.head.params["bias"][...] = 0
        net.head.params["bias"][cls] = 1e6
        study = tiny_study(0, dims=(10, 13, 3))
        seg = segment_study(net, study)
        assert seg.labels.shape == study.dims
        assert np.all(seg.labels == label)

    def test_idempotent(self):
        net = build_network(TINY, seed=2)
        study = tiny_study(1)
        assert segment_study(net, study) == segment_study(net, study)

    def test_missing_modality(self):
        study = tiny_study(0)
        partial = Study("P", {m: study.volumes[m] for m in CHANNEL_ORDER[:3]})
        with pytest.raises(MissingModalityError):
            segment_study(build_network(TINY), partial)
