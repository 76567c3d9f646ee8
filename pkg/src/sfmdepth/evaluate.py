"""Registration-based evaluation of predicted depth maps.

Predictions live in an arbitrary scale, so every metric first aligns
them to the reference: either a closed-form similarity fit on known
per-pixel correspondences, or ICP refinement when correspondences are
unknown.  Reported errors are residuals after that alignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dataset_io import Dataset
from .errors import DegenerateAlignment, EmptyCloud, InvalidDepth, ShapeError
from .geometry import CameraIntrinsics, unproject_grid


@dataclass
class Similarity:
    """x -> scale * R @ x + t"""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def depth_to_cloud(
    depth: np.ndarray, intrinsics: CameraIntrinsics, validity: np.ndarray | None = None
) -> np.ndarray:
    """Unproject a depth raster into an Nx3 camera-frame cloud.

    Pixels with nonpositive depth (and, optionally, pixels outside the
    validity mask) are dropped.  Raises :class:`EmptyCloud` when nothing
    survives.
    """
    depth = np.asarray(depth, dtype=np.float64)
    keep = depth > 0
    if validity is not None:
        if validity.shape != depth.shape:
            raise ShapeError(
                f"validity shape {validity.shape} does not match depth {depth.shape}"
            )
        keep &= validity.astype(bool)
    if not keep.any():
        raise EmptyCloud("no valid pixels to unproject")
    cloud = unproject_grid(intrinsics, depth)
    return cloud[keep]


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Similarity:
    """Least-squares similarity aligning corresponding point sets.

    Minimizes sum |dst_i - (c R src_i + t)|^2 over rotation R, scale c,
    translation t.  Needs at least three non-degenerate correspondences.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeError(f"expected matching Nx3 clouds, got {src.shape} and {dst.shape}")
    n = len(src)
    if n < 3:
        raise DegenerateAlignment(f"similarity fit needs >= 3 correspondences, got {n}")
    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    x = src - mu_src
    y = dst - mu_dst
    var_src = float((x * x).sum()) / n
    if var_src <= 0:
        raise DegenerateAlignment("source points are coincident")
    cov = y.T @ x / n
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt
    if with_scale:
        scale = float(np.trace(np.diag(d) @ s)) / var_src
        if scale <= 0:
            raise DegenerateAlignment("similarity fit collapsed to nonpositive scale")
    else:
        scale = 1.0
    translation = mu_dst - scale * rotation @ mu_src
    return Similarity(scale, rotation, translation)


def residual_rms(src: np.ndarray, dst: np.ndarray, transform: Similarity) -> float:
    moved = transform.apply(src)
    return float(np.sqrt(np.mean(np.sum((moved - dst) ** 2, axis=1))))


@dataclass
class IcpResult:
    transform: Similarity
    rms_history: list[float] = field(default_factory=list)

    @property
    def rms(self) -> float:
        return self.rms_history[-1]


def icp_refine(
    src: np.ndarray,
    dst: np.ndarray,
    init: Similarity | None = None,
    iterations: int = 30,
    tol: float = 1e-9,
) -> IcpResult:
    """Iterative closest point with a similarity model.

    Alternates nearest-neighbor matching against ``dst`` with the
    closed-form similarity fit on the matches.  The recorded RMS (over
    current matches) never increases between iterations.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) == 0 or len(dst) == 0:
        raise EmptyCloud("ICP requires two non-empty clouds")
    transform = init or Similarity(1.0, np.eye(3), np.zeros(3))
    tree = cKDTree(dst)
    history: list[float] = []
    for _ in range(iterations):
        moved = transform.apply(src)
        dist, nn = tree.query(moved)
        matched = dst[nn]
        transform = umeyama_alignment(src, matched)
        rms = residual_rms(src, matched, transform)
        history.append(rms)
        if len(history) >= 2 and history[-2] - history[-1] < tol:
            break
    return IcpResult(transform, history)


def scale_corrected_error(
    pred: np.ndarray, reference: np.ndarray, validity: np.ndarray | None = None
) -> float:
    """Mean absolute relative depth error after a median scale correction.

    The prediction is multiplied by the median of reference/pred over
    the valid pixels, then |scaled - reference| / reference is averaged.
    """
    pred = np.asarray(pred, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if pred.shape != reference.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape} vs reference {reference.shape}")
    keep = (pred > 0) & (reference > 0)
    if validity is not None:
        keep &= validity.astype(bool)
    if not keep.any():
        raise InvalidDepth("no overlapping valid pixels to compare")
    p = pred[keep]
    r = reference[keep]
    scale = float(np.median(r / p))
    return float(np.mean(np.abs(scale * p - r) / r))


def aligned_cloud_rms(
    pred_depth: np.ndarray, gt_depth: np.ndarray, intrinsics: CameraIntrinsics
) -> tuple[float, Similarity]:
    """Similarity-aligned 3D residual RMS between two depth rasters.

    Both rasters are unprojected over their common valid pixels, which
    gives known correspondences, and the closed-form similarity fit is
    applied before measuring the residual.
    """
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if pred_depth.shape != gt_depth.shape:
        raise ShapeError(
            f"shape mismatch: pred {pred_depth.shape} vs reference {gt_depth.shape}"
        )
    keep = (pred_depth > 0) & (gt_depth > 0)
    if not keep.any():
        raise EmptyCloud("no overlapping valid pixels to unproject")
    pred_cloud = unproject_grid(intrinsics, pred_depth)[keep]
    gt_cloud = unproject_grid(intrinsics, gt_depth)[keep]
    transform = umeyama_alignment(pred_cloud, gt_cloud)
    return residual_rms(pred_cloud, gt_cloud, transform), transform


@dataclass
class FrameReport:
    frame_id: int
    aligned_rms: float
    scale_corrected: float
    valid_fraction: float

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "aligned_rms": self.aligned_rms,
            "scale_corrected": self.scale_corrected,
            "valid_fraction": self.valid_fraction,
        }


@dataclass
class EvalReport:
    frames: list[FrameReport]
    mean_aligned_rms: float
    mean_scale_corrected: float

    def to_dict(self) -> dict:
        return {
            "frames": [f.to_dict() for f in self.frames],
            "mean_aligned_rms": self.mean_aligned_rms,
            "mean_scale_corrected": self.mean_scale_corrected,
        }


def evaluate_predictions(
    predictions: dict[int, np.ndarray], dataset: Dataset, frame_ids: list[int] | None = None
) -> EvalReport:
    """Compare predicted depth rasters against a dataset's references."""
    ids = frame_ids if frame_ids is not None else sorted(predictions)
    if not ids:
        raise EmptyCloud("no frames to evaluate")
    frames = []
    for fid in ids:
        record = dataset.frame(fid)
        if record.gt_depth is None:
            raise InvalidDepth(f"frame {fid} carries no reference depth")
        pred = predictions[fid]
        rms, _ = aligned_cloud_rms(pred, record.gt_depth, dataset.intrinsics)
        sce = scale_corrected_error(pred, record.gt_depth)
        valid = float(np.mean((pred > 0) & (record.gt_depth > 0)))
        frames.append(FrameReport(fid, rms, sce, valid))
    return EvalReport(
        frames=frames,
        mean_aligned_rms=float(np.mean([f.aligned_rms for f in frames])),
        mean_scale_corrected=float(np.mean([f.scale_corrected for f in frames])),
    )
