"""Minimal reverse-mode autodiff over dense float64 rasters.

A :class:`Tape` records every operation in execution order; the backward
pass walks the record once in reverse, accumulating adjoints additively at
fan-out.  The op set is exactly what the training graph needs (elementwise
arithmetic, log/exp/softplus, reductions, 3x3 convolution, nearest
upsampling, channel concat) plus the two depth-specific layers: anchored
scale recovery and z-buffered depth warping.

Tensors are immutable after creation; NaN or Inf anywhere aborts the
computation immediately with a :class:`NumericalError` naming the op.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyAnnotation, NumericalError, ShapeError, WarpOutOfView
from .geometry import CameraIntrinsics, RigidTransform, pixel_direction_grid, round_half_away


def _ensure_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values produced by op '{op}'")


def _raster(obj) -> np.ndarray:
    """Accept a raw raster or any object carrying one in a .raster field."""
    return np.asarray(getattr(obj, "raster", obj), dtype=np.float64)


@dataclass
class _Node:
    output: "Tensor"
    inputs: tuple
    backward_fn: Callable[[np.ndarray], None]
    op: str


class Tensor:
    """A float64 array recorded on a tape, with a gradient buffer."""

    __slots__ = ("values", "grad", "tape", "node_id")

    def __init__(self, values: np.ndarray, tape: "Tape", node_id: int):
        self.values = values
        self.grad = np.zeros_like(values)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"

    # arithmetic sugar; float, int and ndarray operands are constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def item(self) -> float:
        return float(self.values)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


class Tape:
    """Execution record for one forward/backward pass.

    Single-writer: one training step records and backpropagates on one
    tape; independent tapes may run concurrently.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def tensor(self, values, op: str = "leaf") -> Tensor:
        values = np.array(values, dtype=np.float64)
        _ensure_finite(values, op)
        t = Tensor(values, self, len(self._nodes))
        self._nodes.append(_Node(t, (), lambda g: None, op))
        return t

    def _record(
        self,
        values: np.ndarray,
        inputs: tuple,
        backward_fn: Callable[[np.ndarray], None],
        op: str,
    ) -> Tensor:
        _ensure_finite(values, op)
        t = Tensor(values, self, len(self._nodes))
        self._nodes.append(_Node(t, inputs, backward_fn, op))
        return t

    def backward(self, output: Tensor) -> None:
        """Seed the output with adjoint 1 and propagate through the record.

        Each node is visited exactly once, in reverse execution order
        (a valid topological order by construction).
        """
        if output.tape is not self:
            raise ValueError("output tensor does not belong to this tape")
        if output.values.size != 1:
            raise ShapeError(f"backward requires a scalar output, got shape {output.shape}")
        output.grad = np.ones_like(output.values)
        for node in reversed(self._nodes):
            if node.inputs:
                node.backward_fn(node.output.grad)


def _coerce_pair(a, b, op: str):
    """Resolve a binary op's operands into (tensor, other, other_is_tensor).

    Exactly one operand may be a plain float/ndarray constant.  Shapes must
    match elementwise, except that a size-1 operand broadcasts.
    """
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.tape is not b.tape:
            raise ValueError(f"op '{op}' mixes tensors from different tapes")
        if a.shape != b.shape and a.values.size != 1 and b.values.size != 1:
            raise ShapeError(f"op '{op}': incompatible shapes {a.shape} and {b.shape}")
        return a, b, True
    if isinstance(a, Tensor):
        const = np.asarray(b, dtype=np.float64)
        if const.shape != a.shape and const.size != 1 and a.values.size != 1:
            raise ShapeError(f"op '{op}': constant shape {const.shape} does not match {a.shape}")
        return a, const, False
    raise TypeError(f"op '{op}' requires at least one Tensor operand")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # size-1 tensors absorb broadcast gradients by summation
    if t.values.size == 1 and g.shape != t.values.shape:
        t.grad += np.sum(g)
    else:
        t.grad += g


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a, other, is_t = _coerce_pair(a, b, "add")
    vals = a.values + (other.values if is_t else other)

    def backward(g):
        _accumulate(a, g)
        if is_t:
            _accumulate(other, g)

    return a.tape._record(vals, (a, other) if is_t else (a,), backward, "add")


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor):
        a2, other, is_t = _coerce_pair(a, b, "sub")
        vals = a2.values - (other.values if is_t else other)

        def backward(g):
            _accumulate(a2, g)
            if is_t:
                _accumulate(other, -g)

        return a2.tape._record(vals, (a2, other) if is_t else (a2,), backward, "sub")
    # constant minus tensor
    b2, const, _ = _coerce_pair(b, a, "sub")
    vals = const - b2.values

    def backward(g):
        _accumulate(b2, -g)

    return b2.tape._record(vals, (b2,), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a, other, is_t = _coerce_pair(a, b, "mul")
    bv = other.values if is_t else other
    vals = a.values * bv

    def backward(g):
        _accumulate(a, g * bv)
        if is_t:
            _accumulate(other, g * a.values)

    return a.tape._record(vals, (a, other) if is_t else (a,), backward, "mul")


def div(a, b) -> Tensor:
    if isinstance(a, Tensor):
        a2, other, is_t = _coerce_pair(a, b, "div")
        bv = other.values if is_t else other
        vals = a2.values / bv

        def backward(g):
            _accumulate(a2, g / bv)
            if is_t:
                _accumulate(other, -g * a2.values / (bv * bv))

        return a2.tape._record(vals, (a2, other) if is_t else (a2,), backward, "div")
    # constant over tensor
    b2, const, _ = _coerce_pair(b, a, "div")
    vals = const / b2.values

    def backward(g):
        _accumulate(b2, -g * const / (b2.values * b2.values))

    return b2.tape._record(vals, (b2,), backward, "div")


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise NumericalError("op 'log' requires strictly positive inputs")
    vals = np.log(x.values)

    def backward(g):
        x.grad += g / x.values

    return x.tape._record(vals, (x,), backward, "log")


def exp(x: Tensor) -> Tensor:
    vals = np.exp(x.values)

    def backward(g):
        x.grad += g * vals

    return x.tape._record(vals, (x,), backward, "exp")


def softplus(x: Tensor) -> Tensor:
    vals = np.logaddexp(0.0, x.values)
    sigma = 0.5 * (1.0 + np.tanh(0.5 * x.values))

    def backward(g):
        x.grad += g * sigma

    return x.tape._record(vals, (x,), backward, "softplus")


def absolute(x: Tensor) -> Tensor:
    """|x| with the subgradient at 0 defined as 0."""
    vals = np.abs(x.values)
    sign = np.sign(x.values)

    def backward(g):
        x.grad += g * sign

    return x.tape._record(vals, (x,), backward, "abs")


def tensor_sum(x: Tensor) -> Tensor:
    vals = np.array(np.sum(x.values))

    def backward(g):
        x.grad += g

    return x.tape._record(vals, (x,), backward, "sum")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum of x elementwise-weighted by a constant array."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights shape {weights.shape} != {x.shape}")
    vals = np.array(np.sum(x.values * weights))

    def backward(g):
        x.grad += g * weights

    return x.tape._record(vals, (x,), backward, "weighted_sum")


def gather(x: Tensor, flat_indices: np.ndarray) -> Tensor:
    """1D tensor of x's elements at flat indices (row-major order).

    The backward pass scatter-adds, so repeated indices accumulate.
    """
    flat_indices = np.asarray(flat_indices, dtype=np.int64)
    if flat_indices.ndim != 1:
        raise ShapeError(f"gather: indices must be 1D, got shape {flat_indices.shape}")
    if flat_indices.size == 0:
        raise ShapeError("gather: empty index list")
    if flat_indices.min() < 0 or flat_indices.max() >= x.values.size:
        raise ShapeError(
            f"gather: index out of range for tensor of size {x.values.size}"
        )
    vals = x.values.reshape(-1)[flat_indices].copy()

    def backward(g):
        np.add.at(x.grad.reshape(-1), flat_indices, g)

    return x.tape._record(vals, (x,), backward, "gather")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.values.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    orig = x.shape
    vals = x.values.reshape(shape)

    def backward(g):
        x.grad += g.reshape(orig)

    return x.tape._record(vals, (x,), backward, "reshape")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: empty input list")
    hw = parts[0].shape[1:]
    for p in parts:
        if p.values.ndim != 3 or p.shape[1:] != hw:
            raise ShapeError("concat_channels: all inputs must be (C, H, W) with equal H, W")
    vals = np.concatenate([p.values for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += g[lo:hi]

    return parts[0].tape._record(vals, tuple(parts), backward, "concat")


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Crop a (C, H, W) tensor to its top-left (C, h, w) corner."""
    if x.values.ndim != 3:
        raise ShapeError(f"crop2d expects (C, H, W), got {x.shape}")
    if h > x.shape[1] or w > x.shape[2] or h < 1 or w < 1:
        raise ShapeError(f"crop2d: cannot crop {x.shape} to ({h}, {w})")
    vals = x.values[:, :h, :w].copy()

    def backward(g):
        x.grad[:, :h, :w] += g

    return x.tape._record(vals, (x,), backward, "crop2d")


def upsample_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of a (C, H, W) tensor."""
    if x.values.ndim != 3:
        raise ShapeError(f"upsample_nearest expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    vals = np.repeat(np.repeat(x.values, 2, axis=1), 2, axis=2)

    def backward(g):
        x.grad += g.reshape(c, h, 2, w, 2).sum(axis=(2, 4))

    return x.tape._record(vals, (x,), backward, "upsample_nearest")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution with padding 1 over a (C, H, W) tensor.

    stride 1 preserves the spatial size; stride 2 halves it (ceil).
    """
    if x.values.ndim != 3:
        raise ShapeError(f"conv2d expects input (C, H, W), got {x.shape}")
    if weight.values.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects weight (O, C, 3, 3), got {weight.shape}")
    if weight.shape[1] != x.shape[0]:
        raise ShapeError(
            f"conv2d: weight expects {weight.shape[1]} input channels, input has {x.shape[0]}"
        )
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({weight.shape[0]},)")

    c_in, h, w = x.shape
    c_out = weight.shape[0]
    h_out = (h - 1) // stride + 1
    w_out = (w - 1) // stride + 1
    x_pad = np.zeros((c_in, h + 2, w + 2))
    x_pad[:, 1 : h + 1, 1 : w + 1] = x.values

    patches = []
    vals = np.zeros((c_out, h_out, w_out))
    for di in range(3):
        for dj in range(3):
            patch = x_pad[
                :, di : di + stride * (h_out - 1) + 1 : stride, dj : dj + stride * (w_out - 1) + 1 : stride
            ]
            patches.append(patch)
            vals += np.einsum("oc,chw->ohw", weight.values[:, :, di, dj], patch)
    if bias is not None:
        vals += bias.values[:, None, None]

    def backward(g):
        gx_pad = np.zeros_like(x_pad)
        k = 0
        for di in range(3):
            for dj in range(3):
                gx_pad[
                    :,
                    di : di + stride * (h_out - 1) + 1 : stride,
                    dj : dj + stride * (w_out - 1) + 1 : stride,
                ] += np.einsum("oc,ohw->chw", weight.values[:, :, di, dj], g)
                weight.grad[:, :, di, dj] += np.einsum("ohw,chw->oc", g, patches[k])
                k += 1
        x.grad += gx_pad[:, 1 : h + 1, 1 : w + 1]
        if bias is not None:
            bias.grad += g.sum(axis=(1, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return x.tape._record(vals, inputs, backward, "conv2d")


# --- depth-specific layers ---------------------------------------------------


def depth_scaling_layer(depth: Tensor, sparse_depth, soft_mask) -> Tensor:
    """Rescale a predicted dense depth map onto the sparse annotations.

    The scale ``s = sum(w * y_star) / sum(w * y)`` is computed over the
    mask's support and applied multiplicatively, so the output satisfies
    the anchor equation ``sum(w * s * y) = sum(w * y_star)`` exactly.
    Gradients flow through both the scale's denominator and the product.
    """
    anchors = _raster(sparse_depth)
    weights = _raster(soft_mask)
    if anchors.shape != depth.shape or weights.shape != depth.shape:
        raise ShapeError(
            f"depth_scaling_layer: raster shapes {anchors.shape}/{weights.shape} "
            f"do not match prediction {depth.shape}"
        )
    support = weights > 0
    if not support.any():
        raise EmptyAnnotation("depth_scaling_layer: soft mask has empty support")
    numerator = float(np.sum(weights[support] * anchors[support]))
    denominator = weighted_sum(depth, weights)
    if not float(denominator.values) > 0:
        raise NumericalError(
            f"depth_scaling_layer: non-positive weighted depth sum {float(denominator.values)}"
        )
    scale = numerator / denominator
    return scale * depth


@dataclass
class WarpResult:
    """Output of the depth warping layer.

    ``assignment`` stores, per destination pixel, the flat index of the
    winning source pixel (-1 where nothing landed); reusing it via the
    ``assignment=`` argument freezes the scatter for finite-difference
    checks.
    """

    depth: Tensor
    validity: np.ndarray
    assignment: np.ndarray


def depth_warping_layer(
    depth: Tensor,
    pose: RigidTransform,
    intrinsics: CameraIntrinsics,
    assignment: np.ndarray | None = None,
) -> WarpResult:
    """Warp a dense depth map into another camera frame.

    Every source pixel is unprojected, moved by ``pose`` and scattered
    into the nearest destination pixel with min-z (z-buffer) collision
    resolution.  The destination-pixel assignment is treated as locally
    constant: adjoints flow only through the depth values.
    """
    if depth.values.ndim != 2:
        raise ShapeError(f"depth_warping_layer expects (H, W), got {depth.shape}")
    h, w = depth.shape
    if (h, w) != (intrinsics.height, intrinsics.width):
        raise ShapeError(
            f"depth_warping_layer: raster {h}x{w} does not match intrinsics "
            f"{intrinsics.height}x{intrinsics.width}"
        )
    dir_x, dir_y = pixel_direction_grid(intrinsics)
    rot = pose.rotation_matrix()
    t = pose.translation
    z = depth.values
    # dz_target/dz_source per pixel; the whole chain is linear in z
    dzdz = rot[2, 0] * dir_x + rot[2, 1] * dir_y + rot[2, 2]
    xk = z * (rot[0, 0] * dir_x + rot[0, 1] * dir_y + rot[0, 2]) + t[0]
    yk = z * (rot[1, 0] * dir_x + rot[1, 1] * dir_y + rot[1, 2]) + t[1]
    zk = z * dzdz + t[2]

    if assignment is None:
        valid_src = zk > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            uk = intrinsics.fx * xk / zk + intrinsics.cx
            vk = intrinsics.fy * yk / zk + intrinsics.cy
        iu = np.where(valid_src, round_half_away(uk), -1).astype(np.int64)
        iv = np.where(valid_src, round_half_away(vk), -1).astype(np.int64)
        valid_src &= (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
        src_flat = np.flatnonzero(valid_src)
        dest_flat = (iv.ravel() * w + iu.ravel())[src_flat]
        z_cand = zk.ravel()[src_flat]
        # z-buffer: sort by destination, then depth, then source index
        order = np.lexsort((src_flat, z_cand, dest_flat))
        dest_sorted = dest_flat[order]
        src_sorted = src_flat[order]
        first = np.ones(dest_sorted.size, dtype=bool)
        first[1:] = dest_sorted[1:] != dest_sorted[:-1]
        assignment = np.full(h * w, -1, dtype=np.int64)
        assignment[dest_sorted[first]] = src_sorted[first]
    else:
        assignment = np.asarray(assignment, dtype=np.int64).reshape(h * w).copy()

    dest_idx = np.flatnonzero(assignment >= 0)
    if dest_idx.size == 0:
        raise WarpOutOfView("depth_warping_layer: no source pixel lands in the target view")
    src_idx = assignment[dest_idx]
    vals = np.zeros(h * w)
    vals[dest_idx] = zk.ravel()[src_idx]
    vals = vals.reshape(h, w)
    validity = (assignment >= 0).reshape(h, w)
    dzdz_flat = dzdz.ravel()

    def backward(g):
        np.add.at(depth.grad.reshape(-1), src_idx, g.reshape(-1)[dest_idx] * dzdz_flat[src_idx])

    warped = depth.tape._record(vals, (depth,), backward, "depth_warp")
    return WarpResult(depth=warped, validity=validity, assignment=assignment.copy())
