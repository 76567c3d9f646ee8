"""Registration-based evaluation: alignment fits, ICP, error metrics."""

import numpy as np
import pytest

from sfmdepth.errors import (
    DegenerateAlignment,
    EmptyCloud,
    InvalidDepth,
    ShapeError,
)
from sfmdepth.evaluate import (
    Similarity,
    aligned_cloud_rms,
    depth_to_cloud,
    evaluate_predictions,
    icp_refine,
    residual_rms,
    scale_corrected_error,
    umeyama_alignment,
)
from sfmdepth.geometry import CameraIntrinsics, RigidTransform, unproject_grid

INTR = CameraIntrinsics(fx=30.0, fy=30.0, cx=8.0, cy=8.0, width=16, height=16)


def random_cloud(rng, n=40):
    return rng.uniform(-2, 2, size=(n, 3))


def random_similarity(rng, scale=None):
    t = RigidTransform.from_axis_angle(
        rng.standard_normal(3), rng.uniform(-2.5, 2.5), rng.uniform(-3, 3, 3)
    )
    s = scale if scale is not None else rng.uniform(0.3, 3.0)
    return Similarity(s, t.rotation_matrix(), t.translation)


class TestUmeyama:
    def test_recovers_a_known_similarity(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            src = random_cloud(rng)
            truth = random_similarity(rng)
            fit = umeyama_alignment(src, truth.apply(src))
            assert np.isclose(fit.scale, truth.scale, atol=1e-9)
            assert np.allclose(fit.rotation, truth.rotation, atol=1e-9)
            assert np.allclose(fit.translation, truth.translation, atol=1e-8)

    def test_without_scale_freezes_scale_at_one(self):
        rng = np.random.default_rng(1)
        src = random_cloud(rng)
        truth = random_similarity(rng, scale=1.0)
        fit = umeyama_alignment(src, truth.apply(src), with_scale=False)
        assert fit.scale == 1.0
        assert np.allclose(fit.rotation, truth.rotation, atol=1e-9)

    def test_handles_reflection_free_fit_under_noise(self):
        rng = np.random.default_rng(2)
        src = random_cloud(rng, n=100)
        truth = random_similarity(rng)
        dst = truth.apply(src) + 0.01 * rng.standard_normal((100, 3))
        fit = umeyama_alignment(src, dst)
        assert np.isclose(np.linalg.det(fit.rotation), 1.0, atol=1e-9)
        assert residual_rms(src, dst, fit) < 0.02

    def test_too_few_points_rejected(self):
        with pytest.raises(DegenerateAlignment):
            umeyama_alignment(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_coincident_points_rejected(self):
        src = np.ones((5, 3))
        with pytest.raises(DegenerateAlignment):
            umeyama_alignment(src, src + 1.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            umeyama_alignment(np.zeros((4, 3)), np.zeros((5, 3)))

    def test_residual_rms_hand_value(self):
        src = np.zeros((4, 3))
        dst = np.zeros((4, 3))
        dst[:, 0] = [1.0, 1.0, -1.0, -1.0]
        ident = Similarity(1.0, np.eye(3), np.zeros(3))
        assert residual_rms(src, dst, ident) == pytest.approx(1.0)


class TestIcp:
    def test_recovers_alignment_without_correspondences(self):
        rng = np.random.default_rng(3)
        src = random_cloud(rng, n=200)
        truth = Similarity(
            1.3,
            RigidTransform.from_axis_angle([0, 0, 1.0], 0.1).rotation_matrix(),
            np.array([0.05, -0.04, 0.08]),
        )
        result = icp_refine(src, truth.apply(src))
        assert result.rms < 1e-6
        assert np.isclose(result.transform.scale, truth.scale, atol=1e-4)

    def test_recorded_rms_never_increases(self):
        rng = np.random.default_rng(4)
        src = random_cloud(rng, n=150)
        dst = random_cloud(rng, n=150)
        result = icp_refine(src, dst, iterations=15)
        diffs = np.diff(result.rms_history)
        assert (diffs <= 1e-12).all()

    def test_empty_cloud_rejected(self):
        with pytest.raises(EmptyCloud):
            icp_refine(np.zeros((0, 3)), np.ones((5, 3)))


class TestDepthToCloud:
    def test_drops_invalid_pixels(self):
        depth = np.full((16, 16), 2.0)
        depth[0, :] = 0.0
        cloud = depth_to_cloud(depth, INTR)
        assert cloud.shape == (15 * 16, 3)
        assert np.allclose(cloud[:, 2], 2.0)

    def test_validity_mask_respected(self):
        depth = np.full((16, 16), 2.0)
        validity = np.zeros((16, 16), dtype=bool)
        validity[3, 4] = True
        cloud = depth_to_cloud(depth, INTR, validity)
        assert cloud.shape == (1, 3)

    def test_matches_unproject_grid(self):
        rng = np.random.default_rng(5)
        depth = rng.uniform(1.0, 3.0, size=(16, 16))
        cloud = depth_to_cloud(depth, INTR)
        assert np.array_equal(cloud, unproject_grid(INTR, depth).reshape(-1, 3))

    def test_all_invalid_rejected(self):
        with pytest.raises(EmptyCloud):
            depth_to_cloud(np.zeros((4, 4)), INTR)

    def test_validity_shape_mismatch(self):
        with pytest.raises(ShapeError):
            depth_to_cloud(np.ones((16, 16)), INTR, np.ones((4, 4), dtype=bool))


class TestScaleCorrectedError:
    def test_zero_for_scaled_copies(self):
        rng = np.random.default_rng(6)
        ref = rng.uniform(1.0, 3.0, size=(8, 8))
        assert scale_corrected_error(0.37 * ref, ref) < 1e-12

    def test_hand_computed_value(self):
        # median(ref/pred) = 1, so the raw relative errors average directly
        pred = np.array([[1.0, 1.0, 2.0]])
        ref = np.array([[1.0, 1.0, 1.0]])
        assert scale_corrected_error(pred, ref) == pytest.approx(1.0 / 3.0)

    def test_invalid_pixels_excluded(self):
        pred = np.array([[1.0, 0.0], [1.0, 5.0]])
        ref = np.array([[2.0, 2.0], [2.0, 0.0]])
        # only the two pixels valid on both sides participate
        assert scale_corrected_error(pred, ref) == pytest.approx(0.0)

    def test_no_overlap_rejected(self):
        with pytest.raises(InvalidDepth):
            scale_corrected_error(np.zeros((2, 2)), np.ones((2, 2)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            scale_corrected_error(np.ones((2, 2)), np.ones((3, 3)))


class TestAlignedCloudRms:
    def test_scaled_depth_aligns_to_zero_residual(self):
        rng = np.random.default_rng(7)
        gt = rng.uniform(1.5, 2.5, size=(16, 16))
        rms, transform = aligned_cloud_rms(4.0 * gt, gt, INTR)
        assert rms < 1e-9
        assert np.isclose(transform.scale, 0.25, atol=1e-9)

    def test_positive_residual_for_distorted_depth(self):
        rng = np.random.default_rng(8)
        gt = rng.uniform(1.5, 2.5, size=(16, 16))
        warped = gt + 0.2 * np.sin(np.arange(256).reshape(16, 16))
        rms, _ = aligned_cloud_rms(warped, gt, INTR)
        assert rms > 0.01

    def test_common_support_only(self):
        gt = np.full((16, 16), 2.0)
        gt[:2] = 0.0
        pred = np.full((16, 16), 3.0)
        pred[:, :2] = 0.0
        rms, _ = aligned_cloud_rms(pred, gt, INTR)
        assert rms < 1e-9


class TestEvaluatePredictions:
    def test_report_on_perfect_predictions(self, tiny_dataset):
        preds = {f.frame_id: f.gt_depth.copy() for f in tiny_dataset.frames}
        report = evaluate_predictions(preds, tiny_dataset)
        assert [fr.frame_id for fr in report.frames] == tiny_dataset.frame_ids()
        assert report.mean_aligned_rms < 1e-9
        assert report.mean_scale_corrected < 1e-12
        for fr in report.frames:
            assert fr.valid_fraction > 0.9

    def test_mean_is_the_average_of_frames(self, tiny_dataset):
        rng = np.random.default_rng(9)
        preds = {
            f.frame_id: f.gt_depth * rng.uniform(0.9, 1.1, f.gt_depth.shape)
            for f in tiny_dataset.frames
        }
        report = evaluate_predictions(preds, tiny_dataset)
        assert report.mean_aligned_rms == pytest.approx(
            np.mean([fr.aligned_rms for fr in report.frames])
        )
        payload = report.to_dict()
        assert len(payload["frames"]) == len(report.frames)

    def test_frame_subset(self, tiny_dataset):
        fid = tiny_dataset.frame_ids()[0]
        preds = {fid: tiny_dataset.frame(fid).gt_depth.copy()}
        report = evaluate_predictions(preds, tiny_dataset, [fid])
        assert len(report.frames) == 1

    def test_no_frames_rejected(self, tiny_dataset):
        with pytest.raises(EmptyCloud):
            evaluate_predictions({}, tiny_dataset)

    def test_missing_reference_rejected(self, tiny_dataset):
        fid = tiny_dataset.frame_ids()[0]
        record = tiny_dataset.frame(fid)
        stash = record.gt_depth
        record.gt_depth = None
        try:
            with pytest.raises(InvalidDepth):
                evaluate_predictions({fid: np.ones_like(stash)}, tiny_dataset, [fid])
        finally:
            record.gt_depth = stash
