"""Depth prediction models.

Two interchangeable predictors:

* :class:`DepthNet`, a small convolutional encoder-decoder mapping a
  grayscale frame to a dense positive depth map, and
* :class:`PixelLogDepthModel`, a per-frame free raster of log-depths
  with no image dependence, useful as a direct-optimization baseline
  and for isolating the loss behavior from network effects.

Both hold their parameters as named float64 arrays and are bound to a
tape per training step; binding twice to the same tape reuses the same
leaf tensors, so a two-view step accumulates gradients into one set of
weights (shared-weight twin evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    conv2d,
    crop2d,
    exp,
    reshape,
    softplus,
    upsample_nearest,
)
from .errors import ModelConfigError, ShapeError

DEPTH_FLOOR = 1e-4


@dataclass(frozen=True)
class DepthNetConfig:
    levels: int = 3
    base_channels: int = 8
    use_skips: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ModelConfigError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ModelConfigError(f"base_channels must be >= 1, got {self.base_channels}")


def _init_conv(rng: np.random.Generator, c_out: int, c_in: int) -> np.ndarray:
    # uniform with variance 1/fan_in
    bound = np.sqrt(3.0 / (c_in * 9))
    return rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))


class DepthNet:
    """Convolutional encoder-decoder with additive skip connections.

    The encoder halves the resolution ``levels`` times while doubling the
    channel count; the decoder mirrors it with nearest-neighbor
    upsampling and adds the same-resolution encoder feature back in.
    All activations are softplus, so the network is smooth everywhere
    and finite-difference probes of its gradients are well behaved.
    The head maps features to softplus depth with a small positive floor.
    """

    kind = "depthnet"

    def __init__(self, config: DepthNetConfig | None = None):
        self.config = config or DepthNetConfig()
        rng = np.random.default_rng([self.config.seed, 0xD4E9])
        widths = [self.config.base_channels * (1 << i) for i in range(self.config.levels + 1)]
        self.parameters: dict[str, np.ndarray] = {}
        self.parameters["stem.w"] = _init_conv(rng, widths[0], 1)
        self.parameters["stem.b"] = np.zeros(widths[0])
        for i in range(1, self.config.levels + 1):
            self.parameters[f"enc{i}.w"] = _init_conv(rng, widths[i], widths[i - 1])
            self.parameters[f"enc{i}.b"] = np.zeros(widths[i])
        for i in range(self.config.levels, 0, -1):
            self.parameters[f"dec{i}.w"] = _init_conv(rng, widths[i - 1], widths[i])
            self.parameters[f"dec{i}.b"] = np.zeros(widths[i - 1])
        self.parameters["head.w"] = _init_conv(rng, 1, widths[0])
        self.parameters["head.b"] = np.zeros(1)
        self._bound_tape: Tape | None = None
        self._bound: dict[str, Tensor] | None = None

    def config_dict(self) -> dict:
        return {
            "kind": self.kind,
            "levels": self.config.levels,
            "base_channels": self.config.base_channels,
            "use_skips": self.config.use_skips,
            "seed": self.config.seed,
        }

    def bind(self, tape: Tape) -> "BoundDepthNet":
        if self._bound_tape is not tape:
            self._bound_tape = tape
            self._bound = {name: tape.tensor(vals) for name, vals in self.parameters.items()}
        return BoundDepthNet(self, tape, self._bound)

    def gradients(self) -> dict[str, np.ndarray]:
        """Accumulated leaf gradients from the most recent bound tape."""
        if self._bound is None:
            raise ModelConfigError("model was never bound to a tape")
        return {name: t.grad for name, t in self._bound.items()}


class BoundDepthNet:
    def __init__(self, model: DepthNet, tape: Tape, params: dict[str, Tensor]):
        self.model = model
        self.tape = tape
        self.params = params

    def predict(self, image: np.ndarray, frame_id: int | None = None) -> Tensor:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2:
            raise ShapeError(f"expected a grayscale (H, W) image, got shape {image.shape}")
        h, w = image.shape
        p = self.params
        cfg = self.model.config
        t = softplus(conv2d(self.tape.tensor(image[None]), p["stem.w"], p["stem.b"]))
        feats = [t]
        for i in range(1, cfg.levels + 1):
            t = softplus(conv2d(t, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2))
            feats.append(t)
        for i in range(cfg.levels, 0, -1):
            skip = feats[i - 1]
            t = upsample_nearest(t)
            if t.shape[1:] != skip.shape[1:]:
                t = crop2d(t, skip.shape[1], skip.shape[2])
            t = softplus(conv2d(t, p[f"dec{i}.w"], p[f"dec{i}.b"]))
            if cfg.use_skips:
                t = t + skip
        out = conv2d(t, p["head.w"], p["head.b"])
        return reshape(softplus(out) + DEPTH_FLOOR, (h, w))


class PixelLogDepthModel:
    """A single learnable log-depth raster; ignores the image entirely.

    One parameter per pixel, output exp(parameters) for every frame, so
    a prediction's gradient touches exactly its own pixel.  Optimizing
    it isolates what the objective alone can recover: annotated pixels
    are moved by the sparse term, everything else only ever moves if the
    cross-view consistency term reaches it.
    """

    kind = "pixel"

    def __init__(self, height: int, width: int, init_log_depth: float = 0.0):
        if height < 1 or width < 1:
            raise ModelConfigError(f"bad raster size {height}x{width}")
        self.height = height
        self.width = width
        self.init_log_depth = float(init_log_depth)
        self.parameters: dict[str, np.ndarray] = {
            "log_depth": np.full((height, width), self.init_log_depth)
        }
        self._bound_tape: Tape | None = None
        self._bound: dict[str, Tensor] | None = None

    def config_dict(self) -> dict:
        return {
            "kind": self.kind,
            "height": self.height,
            "width": self.width,
            "init_log_depth": self.init_log_depth,
        }

    def bind(self, tape: Tape) -> "BoundPixelModel":
        if self._bound_tape is not tape:
            self._bound_tape = tape
            self._bound = {name: tape.tensor(vals) for name, vals in self.parameters.items()}
        return BoundPixelModel(self, self._bound)

    def gradients(self) -> dict[str, np.ndarray]:
        if self._bound is None:
            raise ModelConfigError("model was never bound to a tape")
        return {name: t.grad for name, t in self._bound.items()}


class BoundPixelModel:
    def __init__(self, model: PixelLogDepthModel, params: dict[str, Tensor]):
        self.model = model
        self.params = params

    def predict(self, image: np.ndarray, frame_id: int | None = None) -> Tensor:
        return exp(self.params["log_depth"])


Model = DepthNet | PixelLogDepthModel


def build_model(config: dict) -> Model:
    """Instantiate a model from its serialized configuration."""
    kind = config.get("kind")
    if kind == "depthnet":
        return DepthNet(
            DepthNetConfig(
                levels=int(config.get("levels", 3)),
                base_channels=int(config.get("base_channels", 8)),
                use_skips=bool(config.get("use_skips", True)),
                seed=int(config.get("seed", 0)),
            )
        )
    if kind == "pixel":
        return PixelLogDepthModel(
            height=int(config["height"]),
            width=int(config["width"]),
            init_log_depth=float(config.get("init_log_depth", 0.0)),
        )
    raise ModelConfigError(f"unknown model kind {kind!r}")
