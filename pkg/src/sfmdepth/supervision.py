"""Per-frame training annotations from sparse reconstructions.

Each frame gets a sparse depth raster (triangulated depth written at the
rounded projection of every point whose track includes the frame, zero
elsewhere) and a matching confidence raster normalized to [0, 1].  Frames
are then combined into two-view training pairs carrying the relative pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyAnnotation,
    InsufficientObservations,
    ParseError,
    ReferentialIntegrityError,
)
from .geometry import CameraIntrinsics, RigidTransform, relative_pose, round_half_away
from .scenes import Observation, SparsePoint, SparsePointSet, Trajectory


@dataclass
class SparseDepthMap:
    """Raster with triangulated depths at projected point locations."""

    frame_id: int
    raster: np.ndarray


@dataclass
class SoftMask:
    """Raster of confidence weights in [0, 1], sharing the sparse depth
    map's support."""

    frame_id: int
    raster: np.ndarray


@dataclass
class ScatterSummary:
    """Bookkeeping from one frame's annotation build."""

    written: int = 0
    skipped_behind: int = 0
    skipped_out_of_bounds: int = 0
    collisions: int = 0


@dataclass
class TrainingPair:
    """Everything one two-view training step consumes."""

    frame_id_j: int
    frame_id_k: int
    image_j: np.ndarray
    image_k: np.ndarray
    sparse_j: SparseDepthMap
    sparse_k: SparseDepthMap
    mask_j: SoftMask
    mask_k: SoftMask
    t_k_from_j: RigidTransform
    intrinsics: CameraIntrinsics


def compute_confidence(observations: list[Observation]) -> float:
    """Confidence weight of one tracked point.

    Product of the track length and the accumulated 2D displacement of
    consecutive projections in pixels, so longer and better-conditioned
    tracks earn larger weights on both axes.  Stationary projections
    (zero parallax) yield weight 0.
    """
    if len(observations) < 2:
        raise InsufficientObservations(
            f"need >= 2 observations to assess a track, got {len(observations)}"
        )
    obs = sorted(observations, key=lambda o: o.frame_id)
    parallax = 0.0
    for prev, cur in zip(obs[:-1], obs[1:]):
        parallax += float(
            np.hypot(cur.pixel.u - prev.pixel.u, cur.pixel.v - prev.pixel.v)
        )
    return len(obs) * parallax


def _scatter_frame(
    points: SparsePointSet,
    frame_id: int,
    frame_pose: RigidTransform,
    intrinsics: CameraIntrinsics,
) -> tuple[np.ndarray, np.ndarray, ScatterSummary]:
    """Z-buffered scatter of a frame's observing points.

    Returns (depth raster, weight raster, summary).  On pixel collisions
    the nearer point wins both rasters.
    """
    h, w = intrinsics.height, intrinsics.width
    depth = np.zeros((h, w))
    weight = np.zeros((h, w))
    summary = ScatterSummary()
    for point in points.observed_by_frame(frame_id):
        cam = frame_pose.apply(point.xyz)
        if cam[2] <= 0:
            summary.skipped_behind += 1
            continue
        u = intrinsics.fx * cam[0] / cam[2] + intrinsics.cx
        v = intrinsics.fy * cam[1] / cam[2] + intrinsics.cy
        iu = int(round_half_away(u))
        iv = int(round_half_away(v))
        if not (0 <= iu < w and 0 <= iv < h):
            summary.skipped_out_of_bounds += 1
            continue
        if depth[iv, iu] > 0:
            summary.collisions += 1
            if cam[2] >= depth[iv, iu]:
                continue
        else:
            summary.written += 1
        depth[iv, iu] = cam[2]
        weight[iv, iu] = point.weight
    return depth, weight, summary


def build_sparse_depth_map(
    points: SparsePointSet,
    frame_id: int,
    frame_pose: RigidTransform,
    intrinsics: CameraIntrinsics,
) -> tuple[SparseDepthMap, ScatterSummary]:
    """Sparse depth raster for one frame; unobserved pixels stay 0."""
    depth, _, summary = _scatter_frame(points, frame_id, frame_pose, intrinsics)
    return SparseDepthMap(frame_id, depth), summary


def build_soft_mask(
    points: SparsePointSet,
    frame_id: int,
    frame_pose: RigidTransform,
    intrinsics: CameraIntrinsics,
) -> SoftMask:
    """Confidence raster for one frame, max-normalized to [0, 1].

    Raises :class:`EmptyAnnotation` when no point annotates the frame (or
    all annotating points carry zero confidence); such frames are dropped
    from training.
    """
    _, weight, _ = _scatter_frame(points, frame_id, frame_pose, intrinsics)
    peak = weight.max()
    if peak <= 0:
        raise EmptyAnnotation(f"frame {frame_id} has no nonzero confidence annotations")
    return SoftMask(frame_id, weight / peak)


@dataclass
class FrameAnnotations:
    """One frame's image plus its sparse supervision rasters.

    ``mask`` is None when the frame has no usable annotations; such frames
    are excluded from pairing.
    """

    frame_id: int
    image: np.ndarray
    sparse: SparseDepthMap
    mask: SoftMask | None


def annotate_frames(
    points: SparsePointSet,
    trajectory: Trajectory,
    images: dict[int, np.ndarray],
) -> list[FrameAnnotations]:
    out = []
    for tf in trajectory.frames:
        sparse, _ = build_sparse_depth_map(points, tf.frame_id, tf.pose, trajectory.intrinsics)
        try:
            mask = build_soft_mask(points, tf.frame_id, tf.pose, trajectory.intrinsics)
        except EmptyAnnotation:
            mask = None
        out.append(FrameAnnotations(tf.frame_id, images[tf.frame_id], sparse, mask))
    return out


@dataclass
class PairingConfig:
    max_gap: int | None = 3  # None pairs every annotated frame with every other


def assemble_pairs(
    trajectory: Trajectory,
    annotations: list[FrameAnnotations],
    pairing: PairingConfig | None = None,
    subsequences: list[list[int]] | None = None,
) -> list[TrainingPair]:
    """All unordered annotated-frame pairs within the gap window.

    The gap is measured in trajectory positions.  Frames without
    annotations never appear in a pair.  When subsequence groupings are
    given, pairs never straddle groups.
    """
    pairing = pairing or PairingConfig()
    by_id = {a.frame_id: a for a in annotations}
    positions = {tf.frame_id: i for i, tf in enumerate(trajectory.frames)}
    groups = subsequences if subsequences is not None else [trajectory.frame_ids()]
    pairs: list[TrainingPair] = []
    for group in groups:
        usable = [fid for fid in group if fid in by_id and by_id[fid].mask is not None]
        for a_i in range(len(usable)):
            for b_i in range(a_i + 1, len(usable)):
                fj, fk = usable[a_i], usable[b_i]
                gap = abs(positions[fk] - positions[fj])
                if pairing.max_gap is not None and gap > pairing.max_gap:
                    continue
                aj, ak = by_id[fj], by_id[fk]
                pairs.append(
                    TrainingPair(
                        frame_id_j=fj,
                        frame_id_k=fk,
                        image_j=aj.image,
                        image_k=ak.image,
                        sparse_j=aj.sparse,
                        sparse_k=ak.sparse,
                        mask_j=aj.mask,
                        mask_k=ak.mask,
                        t_k_from_j=relative_pose(trajectory.pose_of(fj), trajectory.pose_of(fk)),
                        intrinsics=trajectory.intrinsics,
                    )
                )
    return pairs


def with_uniform_masks(pairs: list[TrainingPair]) -> list[TrainingPair]:
    """Replace every soft mask by the uniform indicator of its support.

    Used to measure what the confidence weighting buys: outlier and inlier
    annotations become indistinguishable to the losses.
    """
    out = []
    for p in pairs:
        mj = SoftMask(p.mask_j.frame_id, (p.mask_j.raster > 0).astype(np.float64))
        mk = SoftMask(p.mask_k.frame_id, (p.mask_k.raster > 0).astype(np.float64))
        out.append(
            TrainingPair(
                p.frame_id_j,
                p.frame_id_k,
                p.image_j,
                p.image_k,
                p.sparse_j,
                p.sparse_k,
                mj,
                mk,
                p.t_k_from_j,
                p.intrinsics,
            )
        )
    return out


def import_sparse_reconstruction(path) -> tuple[Trajectory, SparsePointSet]:
    """Load a trajectory and point set from a dataset manifest on disk.

    Validates referential integrity (every observation must name a frame
    present in the trajectory) and the point-set invariants.
    """
    from .dataset_io import load_manifest  # deferred: dataset_io imports our types

    manifest = load_manifest(path)
    trajectory = manifest.trajectory()
    points = manifest.point_set()
    known = set(trajectory.frame_ids())
    for point in points.points:
        if len(point.observations) < 2:
            raise ParseError(
                f"point {point.point_id} has {len(point.observations)} observation(s); "
                "triangulation requires two"
            )
        if point.weight < 0:
            raise ParseError(f"point {point.point_id} has negative confidence {point.weight}")
        for obs in point.observations:
            if obs.frame_id not in known:
                raise ReferentialIntegrityError(
                    f"point {point.point_id} observed in unknown frame {obs.frame_id}"
                )
    return trajectory, points
