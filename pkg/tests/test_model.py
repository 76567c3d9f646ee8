"""Depth predictor tests: DepthNet and the free-raster baseline."""

import numpy as np
import pytest

from sfmdepth.autodiff import Tape, tensor_sum
from sfmdepth.errors import ModelConfigError, ShapeError
from sfmdepth.model import (
    DEPTH_FLOOR,
    DepthNet,
    DepthNetConfig,
    PixelLogDepthModel,
    build_model,
)


class TestDepthNetConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ModelConfigError):
            DepthNetConfig(levels=0)
        with pytest.raises(ModelConfigError):
            DepthNetConfig(base_channels=0)


class TestDepthNet:
    def test_parameter_inventory_and_shapes(self):
        net = DepthNet(DepthNetConfig(levels=2, base_channels=4))
        shapes = {name: p.shape for name, p in net.parameters.items()}
        assert shapes == {
            "stem.w": (4, 1, 3, 3),
            "stem.b": (4,),
            "enc1.w": (8, 4, 3, 3),
            "enc1.b": (8,),
            "enc2.w": (16, 8, 3, 3),
            "enc2.b": (16,),
            "dec2.w": (8, 16, 3, 3),
            "dec2.b": (8,),
            "dec1.w": (4, 8, 3, 3),
            "dec1.b": (4,),
            "head.w": (1, 4, 3, 3),
            "head.b": (1,),
        }

    def test_output_shape_and_positivity_on_odd_sizes(self):
        net = DepthNet(DepthNetConfig(levels=3, base_channels=4, seed=1))
        rng = np.random.default_rng(0)
        for h, w in [(16, 16), (13, 9), (21, 32)]:
            image = rng.uniform(0, 1, size=(h, w))
            pred = net.bind(Tape()).predict(image, 0)
            assert pred.shape == (h, w)
            assert pred.values.min() > DEPTH_FLOOR / 2

    def test_same_seed_same_weights(self):
        a = DepthNet(DepthNetConfig(seed=7))
        b = DepthNet(DepthNetConfig(seed=7))
        c = DepthNet(DepthNetConfig(seed=8))
        for name in a.parameters:
            assert np.array_equal(a.parameters[name], b.parameters[name])
        assert any(
            not np.array_equal(a.parameters[n], c.parameters[n]) for n in a.parameters
        )

    def test_prediction_depends_on_the_image(self):
        net = DepthNet(DepthNetConfig(seed=0))
        rng = np.random.default_rng(1)
        img_a = rng.uniform(0, 1, size=(16, 16))
        img_b = rng.uniform(0, 1, size=(16, 16))
        pa = net.bind(Tape()).predict(img_a, 0).values
        pb = net.bind(Tape()).predict(img_b, 0).values
        assert not np.allclose(pa, pb)

    def test_skips_change_the_function(self):
        with_skips = DepthNet(DepthNetConfig(seed=0, use_skips=True))
        without = DepthNet(DepthNetConfig(seed=0, use_skips=False))
        img = np.random.default_rng(2).uniform(0, 1, size=(16, 16))
        assert not np.allclose(
            with_skips.bind(Tape()).predict(img, 0).values,
            without.bind(Tape()).predict(img, 0).values,
        )

    def test_rejects_non_grayscale_input(self):
        net = DepthNet()
        with pytest.raises(ShapeError):
            net.bind(Tape()).predict(np.zeros((3, 16, 16)), 0)

    def test_twin_binding_accumulates_gradients(self):
        """Two predictions on one tape share leaves, so one backward pass
        sums both contributions into the same gradient buffers."""
        net = DepthNet(DepthNetConfig(levels=1, base_channels=2, seed=3))
        rng = np.random.default_rng(3)
        img_a = rng.uniform(0, 1, size=(8, 8))
        img_b = rng.uniform(0, 1, size=(8, 8))

        def grads_for(images):
            tape = Tape()
            bound = net.bind(tape)
            total = None
            for img in images:
                s = tensor_sum(bound.predict(img, 0))
                total = s if total is None else total + s
            tape.backward(total)
            return {n: g.copy() for n, g in net.gradients().items()}

        combined = grads_for([img_a, img_b])
        ga = grads_for([img_a])
        gb = grads_for([img_b])
        for name in combined:
            assert np.allclose(combined[name], ga[name] + gb[name], atol=1e-9)

    def test_gradients_require_binding(self):
        with pytest.raises(ModelConfigError):
            DepthNet().gradients()


class TestPixelModel:
    def test_prediction_is_exp_of_the_raster(self):
        model = PixelLogDepthModel(4, 5, init_log_depth=0.3)
        pred = model.bind(Tape()).predict(np.zeros((4, 5)), 0)
        assert pred.shape == (4, 5)
        assert np.allclose(pred.values, np.exp(0.3))

    def test_image_and_frame_are_ignored(self):
        model = PixelLogDepthModel(4, 4)
        rng = np.random.default_rng(0)
        a = model.bind(Tape()).predict(rng.uniform(0, 1, (4, 4)), 0).values
        b = model.bind(Tape()).predict(rng.uniform(0, 1, (4, 4)), 9).values
        assert np.array_equal(a, b)

    def test_gradient_is_prediction_itself(self):
        # d exp(x) / dx = exp(x): the chain rule through the raster
        model = PixelLogDepthModel(3, 3, init_log_depth=0.5)
        tape = Tape()
        pred = model.bind(tape).predict(np.zeros((3, 3)), 0)
        tape.backward(tensor_sum(pred))
        assert np.allclose(model.gradients()["log_depth"], pred.values)

    def test_bad_size_rejected(self):
        with pytest.raises(ModelConfigError):
            PixelLogDepthModel(0, 4)


class TestBuildModel:
    def test_depthnet_round_trip(self):
        net = DepthNet(DepthNetConfig(levels=2, base_channels=4, use_skips=False, seed=5))
        clone = build_model(net.config_dict())
        assert isinstance(clone, DepthNet)
        assert clone.config == net.config
        for name in net.parameters:
            assert np.array_equal(clone.parameters[name], net.parameters[name])

    def test_pixel_round_trip(self):
        model = PixelLogDepthModel(6, 7, init_log_depth=-0.2)
        clone = build_model(model.config_dict())
        assert isinstance(clone, PixelLogDepthModel)
        assert (clone.height, clone.width) == (6, 7)
        assert np.array_equal(clone.parameters["log_depth"], model.parameters["log_depth"])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ModelConfigError):
            build_model({"kind": "transformer"})
