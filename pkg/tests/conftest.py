"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from sfmdepth.geometry import CameraIntrinsics, RigidTransform
from sfmdepth.scenes import (
    SfmSimConfig,
    default_intrinsics,
    make_scene,
    make_trajectory,
    render_ground_truth,
    simulate_sfm,
)
from sfmdepth.dataset_io import Dataset, FrameRecord, quantize_depth, quantize_image
from sfmdepth.supervision import SoftMask, SparseDepthMap, TrainingPair


def make_toy_pair(seed: int = 0, size: int = 8, n_marks: int | None = None) -> TrainingPair:
    """Small two-view pair with random annotations on both frames."""
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(
        fx=1.2 * size, fy=1.2 * size, cx=size / 2, cy=size / 2, width=size, height=size
    )
    n_marks = n_marks or max(4, size * size // 8)
    rasters = []
    for _ in range(2):
        sparse = np.zeros((size, size))
        mask = np.zeros((size, size))
        flat = rng.choice(size * size, size=n_marks, replace=False)
        sparse.reshape(-1)[flat] = rng.uniform(1.6, 2.4, size=n_marks)
        mask.reshape(-1)[flat] = rng.uniform(0.3, 1.0, size=n_marks)
        rasters.append((sparse, mask))
    pose = RigidTransform.from_axis_angle(
        axis=np.array([0.1, 1.0, 0.2]),
        angle=0.05,
        translation=np.array([0.05, -0.03, 0.02]),
    )
    return TrainingPair(
        frame_id_j=0,
        frame_id_k=1,
        image_j=rng.uniform(0.2, 0.9, size=(size, size)),
        image_k=rng.uniform(0.2, 0.9, size=(size, size)),
        sparse_j=SparseDepthMap(0, rasters[0][0]),
        sparse_k=SparseDepthMap(1, rasters[1][0]),
        mask_j=SoftMask(0, rasters[0][1]),
        mask_k=SoftMask(1, rasters[1][1]),
        t_k_from_j=pose,
        intrinsics=intr,
    )


def build_tiny_dataset(
    seed: int = 5, size: int = 24, frames: int = 4, points: int = 80, **sim_kwargs
) -> Dataset:
    """In-memory synthetic dataset, small enough for fast io and CLI tests."""
    scene = make_scene("heightfield", seed=seed)
    intr = default_intrinsics(size)
    traj = make_trajectory(scene, intr, frames, seed=seed)
    records = []
    for tf in traj.frames:
        depth, intensity = render_ground_truth(scene, tf.pose, intr)
        records.append(
            FrameRecord(tf.frame_id, tf.pose, quantize_image(intensity), quantize_depth(depth))
        )
    sim = SfmSimConfig(num_points=points, seed=seed, **sim_kwargs)
    point_set = simulate_sfm(scene, traj, sim)
    return Dataset(
        intrinsics=intr,
        frames=records,
        points=point_set,
        subsequences=[traj.frame_ids()],
        meta={"scene": "heightfield", "seed": seed},
    )


@pytest.fixture(scope="session")
def tiny_dataset() -> Dataset:
    return build_tiny_dataset()


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_dataset) -> str:
    from sfmdepth.dataset_io import write_dataset

    root = tmp_path_factory.mktemp("dataset")
    write_dataset(tiny_dataset, root)
    return str(root)
