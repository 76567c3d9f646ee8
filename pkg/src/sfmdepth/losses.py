"""Training objectives for two-view self-supervision.

Two ingredients, combined per pair:

* a confidence-weighted scale-invariant log-depth term anchoring each
  prediction to its sparse annotations, and
* a cross-view consistency term comparing each scaled prediction, warped
  into the other camera, against the other scaled prediction.

The consistency term is what propagates supervision into pixels that
carry no annotation of their own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    WarpResult,
    absolute,
    depth_scaling_layer,
    depth_warping_layer,
    gather,
    log,
    tensor_sum,
    weighted_sum,
)
from .errors import EmptyAnnotation, ShapeError, WarpOutOfView
from .supervision import TrainingPair


def _raster(obj) -> np.ndarray:
    return np.asarray(getattr(obj, "raster", obj), dtype=np.float64)


def scale_invariant_loss(pred: Tensor, sparse, mask) -> Tensor:
    """Weighted scale-invariant distance between prediction and annotations.

    With d = log(pred) - log(annotated depth) over the annotated support
    and weights w from the soft mask, the loss is the weighted second
    moment of d minus the square of its weighted mean.  Multiplying the
    prediction by any positive constant leaves the value unchanged.
    """
    sparse_vals = _raster(sparse)
    weights = _raster(mask)
    if sparse_vals.shape != tuple(pred.shape) or weights.shape != tuple(pred.shape):
        raise ShapeError(
            f"annotation shapes {sparse_vals.shape}/{weights.shape} "
            f"do not match prediction {tuple(pred.shape)}"
        )
    support = np.flatnonzero((sparse_vals.reshape(-1) > 0) & (weights.reshape(-1) > 0))
    if support.size == 0:
        raise EmptyAnnotation("no annotated pixels with positive confidence")
    w = weights.reshape(-1)[support]
    d = log(gather(pred, support)) - np.log(sparse_vals.reshape(-1)[support])
    w_total = float(w.sum())
    second_moment = weighted_sum(d * d, w) / w_total
    mean = weighted_sum(d, w) / w_total
    return second_moment - mean * mean


def consistency_loss(warped: WarpResult, target: Tensor) -> Tensor:
    """Mean absolute depth difference over pixels the warp populated."""
    if warped.validity.shape != tuple(target.shape):
        raise ShapeError(
            f"warp validity shape {warped.validity.shape} "
            f"does not match target {tuple(target.shape)}"
        )
    idx = np.flatnonzero(warped.validity.reshape(-1))
    if idx.size == 0:
        raise WarpOutOfView("warped view shares no pixels with the target")
    diff = gather(warped.depth, idx) - gather(target, idx)
    return tensor_sum(absolute(diff)) / float(idx.size)


@dataclass
class PairLossResult:
    """Total loss tensor plus per-term values and warp bookkeeping."""

    total: Tensor
    sparse_j: float
    sparse_k: float
    consistency_jk: float
    consistency_kj: float
    assignment_jk: np.ndarray | None
    assignment_kj: np.ndarray | None

    def value(self) -> float:
        return self.total.item()


def pair_loss(
    pred_j: Tensor,
    pred_k: Tensor,
    pair: TrainingPair,
    consistency_weight: float,
    assignments: tuple[np.ndarray, np.ndarray] | None = None,
) -> PairLossResult:
    """Full two-view objective for one training pair.

    total = sparse_j + sparse_k + w * (consistency_jk + consistency_kj)

    Passing ``assignments`` reuses frozen warp destinations from an
    earlier evaluation, which keeps the objective differentiable at a
    point for finite-difference probes.  With ``consistency_weight`` 0
    the warps are skipped entirely.
    """
    ls_j = scale_invariant_loss(pred_j, pair.sparse_j, pair.mask_j)
    ls_k = scale_invariant_loss(pred_k, pair.sparse_k, pair.mask_k)
    if consistency_weight == 0.0:
        return PairLossResult(
            total=ls_j + ls_k,
            sparse_j=ls_j.item(),
            sparse_k=ls_k.item(),
            consistency_jk=0.0,
            consistency_kj=0.0,
            assignment_jk=None,
            assignment_kj=None,
        )

    scaled_j = depth_scaling_layer(pred_j, pair.sparse_j, pair.mask_j)
    scaled_k = depth_scaling_layer(pred_k, pair.sparse_k, pair.mask_k)
    a_jk, a_kj = assignments if assignments is not None else (None, None)
    warp_jk = depth_warping_layer(scaled_j, pair.t_k_from_j, pair.intrinsics, assignment=a_jk)
    warp_kj = depth_warping_layer(
        scaled_k, pair.t_k_from_j.inverse(), pair.intrinsics, assignment=a_kj
    )
    lc_jk = consistency_loss(warp_jk, scaled_k)
    lc_kj = consistency_loss(warp_kj, scaled_j)
    total = ls_j + ls_k + consistency_weight * (lc_jk + lc_kj)
    return PairLossResult(
        total=total,
        sparse_j=ls_j.item(),
        sparse_k=ls_k.item(),
        consistency_jk=lc_jk.item(),
        consistency_kj=lc_kj.item(),
        assignment_jk=warp_jk.assignment,
        assignment_kj=warp_kj.assignment,
    )
