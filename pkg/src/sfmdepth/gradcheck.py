"""Finite-difference verification of every differentiable building block.

Each check wraps one op (or a whole training step) as a scalar function
of a flat parameter vector, takes the tape gradient once, then probes a
sample of coordinates with central differences and reports the worst
relative disagreement.  Smooth ops are held to a tight tolerance; the
warp (piecewise smooth, checked under a frozen pixel assignment) and the
full two-view objective get a slightly looser one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .geometry import CameraIntrinsics, Pixel, RigidTransform
from .model import DepthNet, DepthNetConfig
from .losses import pair_loss
from .supervision import SoftMask, SparseDepthMap, TrainingPair

SMOOTH_TOL = 1e-5
WARP_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    probes: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        verdict = "ok" if self.passed else "FAIL"
        return (
            f"{self.name:34s} rel {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.0e}, {self.probes} probes) {verdict}"
        )


def check_gradient(
    name: str,
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    tolerance: float = SMOOTH_TOL,
    n_samples: int = 8,
    eps: float = 1e-6,
    rng: np.random.Generator | None = None,
) -> CheckResult:
    """Compare a function's reported gradient against central differences.

    ``f(x)`` must return (scalar value, gradient array shaped like x).
    Up to ``n_samples`` coordinates are probed.
    """
    rng = rng or np.random.default_rng(0)
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    _, grad = f(x0)
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if x0.size <= n_samples:
        indices = np.arange(x0.size)
    else:
        indices = rng.choice(x0.size, size=n_samples, replace=False)
    worst = 0.0
    for idx in indices:
        step = np.zeros_like(x0)
        step[idx] = eps
        plus, _ = f(x0 + step)
        minus, _ = f(x0 - step)
        fd = (plus - minus) / (2 * eps)
        rel = abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd), 1e-6)
        worst = max(worst, rel)
    return CheckResult(name, worst, tolerance, len(indices))


def _tape_fn(build: Callable[[ad.Tape, ad.Tensor], ad.Tensor], shape) -> Callable:
    """Lift a tape-level builder into an f(flat_x) -> (value, grad) closure."""

    def f(flat_x: np.ndarray) -> tuple[float, np.ndarray]:
        tape = ad.Tape()
        x = tape.tensor(flat_x.reshape(shape).copy())
        out = build(tape, x)
        tape.backward(out)
        return out.item(), x.grad.reshape(-1).copy()

    return f


def _toy_pair(rng: np.random.Generator, size: int = 8) -> TrainingPair:
    """A small synthetic two-view pair with plausible annotations."""
    intr = CameraIntrinsics(
        fx=1.2 * size, fy=1.2 * size, cx=size / 2, cy=size / 2, width=size, height=size
    )
    sparse_j = np.zeros((size, size))
    sparse_k = np.zeros((size, size))
    mask_j = np.zeros((size, size))
    mask_k = np.zeros((size, size))
    n_marks = max(4, size * size // 10)
    for sparse, mask in ((sparse_j, mask_j), (sparse_k, mask_k)):
        flat = rng.choice(size * size, size=n_marks, replace=False)
        sparse.reshape(-1)[flat] = rng.uniform(1.6, 2.4, size=n_marks)
        mask.reshape(-1)[flat] = rng.uniform(0.3, 1.0, size=n_marks)
    pose = RigidTransform.from_axis_angle(
        axis=np.array([0.2, 1.0, 0.1]),
        angle=0.04,
        translation=np.array([0.06, -0.04, 0.02]),
    )
    return TrainingPair(
        frame_id_j=0,
        frame_id_k=1,
        image_j=rng.uniform(0.2, 0.9, size=(size, size)),
        image_k=rng.uniform(0.2, 0.9, size=(size, size)),
        sparse_j=SparseDepthMap(0, sparse_j),
        sparse_k=SparseDepthMap(1, sparse_k),
        mask_j=SoftMask(0, mask_j),
        mask_k=SoftMask(1, mask_k),
        t_k_from_j=pose,
        intrinsics=intr,
    )


def _elementwise_checks(rng: np.random.Generator) -> list[CheckResult]:
    shape = (5, 4)
    mix = rng.standard_normal(shape)
    other = rng.uniform(0.5, 1.5, size=shape)
    positive = rng.uniform(0.5, 2.0, size=shape)
    centered = rng.standard_normal(shape)
    # keep |x| away from 0 so the absolute-value kink is not straddled
    offset = np.where(centered >= 0, centered + 0.3, centered - 0.3)

    cases = [
        ("add", positive, lambda tape, x: ad.weighted_sum(x + tape.tensor(other), mix)),
        ("add_const", positive, lambda tape, x: ad.weighted_sum(x + other, mix)),
        ("sub", positive, lambda tape, x: ad.weighted_sum(x - tape.tensor(other), mix)),
        ("rsub_const", positive, lambda tape, x: ad.weighted_sum(2.5 - x, mix)),
        ("mul", positive, lambda tape, x: ad.weighted_sum(x * tape.tensor(other), mix)),
        ("mul_broadcast", positive, lambda tape, x: ad.weighted_sum(
            x * tape.tensor(np.array(1.7)), mix
        )),
        ("div", positive, lambda tape, x: ad.weighted_sum(x / tape.tensor(other), mix)),
        ("rdiv_const", positive, lambda tape, x: ad.weighted_sum(1.3 / x, mix)),
        ("neg", positive, lambda tape, x: ad.weighted_sum(-x, mix)),
        ("log", positive, lambda tape, x: ad.weighted_sum(ad.log(x), mix)),
        ("exp", centered, lambda tape, x: ad.weighted_sum(ad.exp(x), mix)),
        ("softplus", centered, lambda tape, x: ad.weighted_sum(ad.softplus(x), mix)),
        ("absolute", offset, lambda tape, x: ad.weighted_sum(ad.absolute(x), mix)),
        ("sum", positive, lambda tape, x: ad.tensor_sum(x * tape.tensor(mix))),
        ("weighted_sum", positive, lambda tape, x: ad.weighted_sum(x, mix)),
        ("reshape", positive, lambda tape, x: ad.weighted_sum(
            ad.reshape(x, (4, 5)), mix.reshape(4, 5)
        )),
        ("gather", positive, lambda tape, x: ad.tensor_sum(
            ad.gather(x, np.array([0, 3, 3, 7, 19])) * tape.tensor(np.ones(5))
        )),
    ]
    out = []
    for name, x0, build in cases:
        out.append(check_gradient(name, _tape_fn(build, x0.shape), x0, rng=rng))
    return out


def _structural_checks(rng: np.random.Generator) -> list[CheckResult]:
    results = []

    chw = (3, 6, 5)
    x0 = rng.uniform(0.3, 1.2, size=chw)
    mix_up = rng.standard_normal((3, 12, 10))
    results.append(
        check_gradient(
            "upsample_nearest",
            _tape_fn(lambda tape, x: ad.weighted_sum(ad.upsample_nearest(x), mix_up), chw),
            x0,
            rng=rng,
        )
    )
    mix_crop = rng.standard_normal((3, 4, 3))
    results.append(
        check_gradient(
            "crop2d",
            _tape_fn(lambda tape, x: ad.weighted_sum(ad.crop2d(x, 4, 3), mix_crop), chw),
            x0,
            rng=rng,
        )
    )
    mix_cat = rng.standard_normal((6, 6, 5))
    other = rng.uniform(0.2, 1.0, size=chw)
    results.append(
        check_gradient(
            "concat_channels",
            _tape_fn(
                lambda tape, x: ad.weighted_sum(
                    ad.concat_channels([x, tape.tensor(other)]), mix_cat
                ),
                chw,
            ),
            x0,
            rng=rng,
        )
    )

    w0 = rng.standard_normal((4, 3, 3, 3)) * 0.4
    b0 = rng.standard_normal(4) * 0.2
    for stride in (1, 2):
        h_out = (chw[1] - 1) // stride + 1
        w_out = (chw[2] - 1) // stride + 1
        mix = rng.standard_normal((4, h_out, w_out))

        def conv_in(tape, x, stride=stride, mix=mix):
            return ad.weighted_sum(
                ad.conv2d(x, tape.tensor(w0), tape.tensor(b0), stride=stride), mix
            )

        def conv_w(tape, w, stride=stride, mix=mix):
            return ad.weighted_sum(
                ad.conv2d(tape.tensor(x0), w, tape.tensor(b0), stride=stride), mix
            )

        def conv_b(tape, b, stride=stride, mix=mix):
            return ad.weighted_sum(
                ad.conv2d(tape.tensor(x0), tape.tensor(w0), b, stride=stride), mix
            )

        results.append(
            check_gradient(f"conv2d_s{stride}/input", _tape_fn(conv_in, chw), x0, rng=rng)
        )
        results.append(
            check_gradient(f"conv2d_s{stride}/weight", _tape_fn(conv_w, w0.shape), w0, rng=rng)
        )
        results.append(
            check_gradient(f"conv2d_s{stride}/bias", _tape_fn(conv_b, b0.shape), b0, rng=rng)
        )
    return results


def _annotation_checks(rng: np.random.Generator) -> list[CheckResult]:
    results = []
    pair = _toy_pair(rng)
    size = pair.intrinsics.height
    depth0 = rng.uniform(1.5, 2.5, size=(size, size))
    mix = rng.standard_normal((size, size))

    def scaling(tape, x):
        return ad.weighted_sum(
            ad.depth_scaling_layer(x, pair.sparse_j.raster, pair.mask_j.raster), mix
        )

    results.append(
        check_gradient(
            "depth_scaling_layer", _tape_fn(scaling, depth0.shape), depth0, rng=rng
        )
    )

    # freeze the pixel assignment so the probe stays on one smooth piece
    probe_tape = ad.Tape()
    probe = ad.depth_warping_layer(
        probe_tape.tensor(depth0), pair.t_k_from_j, pair.intrinsics
    )
    assignment = probe.assignment

    def warping(tape, x):
        warped = ad.depth_warping_layer(
            x, pair.t_k_from_j, pair.intrinsics, assignment=assignment
        )
        return ad.weighted_sum(warped.depth, mix)

    results.append(
        check_gradient(
            "depth_warping_layer",
            _tape_fn(warping, depth0.shape),
            depth0,
            tolerance=WARP_TOL,
            n_samples=12,
            rng=rng,
        )
    )
    return results


def _end_to_end_check(rng: np.random.Generator, size: int = 8) -> CheckResult:
    """Probe the full two-view objective through a DepthNet."""
    pair = _toy_pair(rng, size=size)
    model = DepthNet(DepthNetConfig(levels=3, base_channels=8, seed=3))
    names = list(model.parameters)
    shapes = {n: model.parameters[n].shape for n in names}
    sizes = {n: model.parameters[n].size for n in names}
    offsets = {}
    total = 0
    for n in names:
        offsets[n] = total
        total += sizes[n]

    def unpack(flat: np.ndarray) -> None:
        for n in names:
            model.parameters[n] = flat[offsets[n] : offsets[n] + sizes[n]].reshape(
                shapes[n]
            ).copy()

    def run(freeze=None):
        tape = ad.Tape()
        bound = model.bind(tape)
        pred_j = bound.predict(pair.image_j, 0)
        pred_k = bound.predict(pair.image_k, 1)
        result = pair_loss(pred_j, pred_k, pair, 2.0e-4, assignments=freeze)
        tape.backward(result.total)
        flat_grad = np.concatenate(
            [model.gradients()[n].reshape(-1) for n in names]
        )
        return result, flat_grad

    x0 = np.concatenate([model.parameters[n].reshape(-1) for n in names])
    probe_result, _ = run()
    frozen = (probe_result.assignment_jk, probe_result.assignment_kj)

    def f(flat: np.ndarray):
        unpack(flat)
        result, grad = run(freeze=frozen)
        return result.total.item(), grad

    # a few probes inside every parameter tensor, not just the big ones
    indices = []
    for n in names:
        k = min(3, sizes[n])
        indices.extend(offsets[n] + rng.choice(sizes[n], size=k, replace=False))
    indices = np.array(sorted(int(i) for i in indices))

    _, grad = f(x0)
    worst = 0.0
    for idx in indices:
        step = np.zeros_like(x0)
        step[idx] = 1e-6
        plus, _ = f(x0 + step)
        minus, _ = f(x0 - step)
        fd = (plus - minus) / 2e-6
        rel = abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd), 1e-6)
        worst = max(worst, rel)
    return CheckResult("pair_loss/depthnet_8x8", worst, WARP_TOL, len(indices))


def run_all_checks(seed: int = 0) -> list[CheckResult]:
    """Every gradient check in the suite, in a deterministic order."""
    rng = np.random.default_rng([seed, 0x6D2C])
    results = []
    results += _elementwise_checks(rng)
    results += _structural_checks(rng)
    results += _annotation_checks(rng)
    results.append(_end_to_end_check(rng))
    return results
