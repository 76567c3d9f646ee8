"""Synthetic scenes with exact ground truth, plus a sparse-reconstruction
simulator.

Two surface families are built in: a textured height-field viewed
frontally (analytic oracles) and a bent tube viewed down its bore
(occlusion and depth range).  Rendering traces one ray per pixel with the
ray parameter equal to camera-frame depth, so depth maps are exact to
solver precision.  The simulator stands in for an offline multi-view
reconstruction: it samples well-textured surface points, assigns each a
contiguous track of observing frames, and perturbs the triangulated
positions with noise and gross outliers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InsufficientParallax, SceneCoverageError
from .geometry import (
    CameraIntrinsics,
    Pixel,
    RigidTransform,
    pixel_direction_grid,
    project_array,
)

_RAY_MISS = -1.0


@dataclass
class Observation:
    """One 2D sighting of a tracked point."""

    frame_id: int
    pixel: Pixel


@dataclass
class SparsePoint:
    point_id: int
    xyz: np.ndarray
    weight: float
    observations: list[Observation]

    def frame_ids(self) -> list[int]:
        return [o.frame_id for o in self.observations]

    def observed_in(self, frame_id: int) -> bool:
        return any(o.frame_id == frame_id for o in self.observations)


@dataclass
class SparsePointSet:
    """Simulated sparse reconstruction: 3D points with per-frame tracks.

    A frame participates in triangulating a point exactly when it appears
    in that point's observation list.
    """

    points: list[SparsePoint]

    def __len__(self) -> int:
        return len(self.points)

    def observed_by_frame(self, frame_id: int) -> list[SparsePoint]:
        return [p for p in self.points if p.observed_in(frame_id)]


@dataclass
class TrajectoryFrame:
    frame_id: int
    pose: RigidTransform  # world -> camera


@dataclass
class Trajectory:
    """An ordered camera subsequence sharing one set of intrinsics."""

    intrinsics: CameraIntrinsics
    frames: list[TrajectoryFrame]

    def __len__(self) -> int:
        return len(self.frames)

    def frame_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames]

    def pose_of(self, frame_id: int) -> RigidTransform:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f.pose
        raise KeyError(f"frame {frame_id} not in trajectory")


def _smooth_field(rng: np.random.Generator, n_waves: int, freq_lo: float, freq_hi: float):
    """Deterministic smooth scalar field as a sum of random cosines."""
    freqs = rng.uniform(freq_lo, freq_hi, size=(n_waves, 2))
    signs = rng.choice([-1.0, 1.0], size=(n_waves, 2))
    freqs *= signs
    phases = rng.uniform(0, 2 * math.pi, size=n_waves)
    amps = rng.uniform(0.5, 1.0, size=n_waves)
    amps /= amps.sum()

    def evaluate(x, y):
        out = np.zeros_like(np.asarray(x, dtype=np.float64))
        for (fx_, fy_), ph, a in zip(freqs, phases, amps):
            out = out + a * np.cos(fx_ * x + fy_ * y + ph)
        return out

    return evaluate


class HeightFieldScene:
    """Relief surface z = depth0 + relief(x, y) viewed frontally.

    ``amplitude=0`` degenerates to a fronto-parallel plane at ``depth0``,
    which is the analytic oracle configuration.
    """

    def __init__(
        self,
        seed: int = 0,
        depth0: float = 2.0,
        amplitude: float = 0.25,
        extent: float = 2.5,
        relief_waves: int = 4,
        texture_waves: int = 6,
    ):
        self.depth0 = depth0
        self.amplitude = amplitude
        self.extent = extent
        rng = np.random.default_rng([int(seed), 0x5CEE])
        self._relief = _smooth_field(rng, relief_waves, 0.6, 1.6)
        self._texture = _smooth_field(rng, texture_waves, 2.0, 6.0)

    @property
    def diameter(self) -> float:
        # bounding sphere of the textured region
        return math.hypot(2 * self.extent * math.sqrt(2.0), 2 * self.amplitude)

    def surface_z(self, x, y):
        return self.depth0 + self.amplitude * self._relief(x, y)

    def texture(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return 0.55 + 0.45 * self._texture(points[..., 0], points[..., 1])

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        xy = rng.uniform(-self.extent, self.extent, size=(n, 2))
        z = self.surface_z(xy[:, 0], xy[:, 1])
        return np.column_stack([xy, z])

    def ray_depth(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first surface hit, or -1 on a miss.

        Directions need not be normalized; the returned parameter is in
        units of the direction vector.  Solved by bracketed bisection on
        g(t) = ray_z(t) - surface_z(ray_xy(t)); valid whenever the ray
        crosses the relief slab from above exactly once (gentle relief).
        """
        o = np.atleast_2d(origins).astype(np.float64)
        d = np.atleast_2d(dirs).astype(np.float64)
        margin = 1e-6 + 0.05 * max(self.amplitude, 1e-3)
        z_near = self.depth0 - self.amplitude - margin
        z_far = self.depth0 + self.amplitude + margin
        dz = d[:, 2]
        ok = dz > 1e-9
        t_lo = np.where(ok, (z_near - o[:, 2]) / np.where(ok, dz, 1.0), 0.0)
        t_hi = np.where(ok, (z_far - o[:, 2]) / np.where(ok, dz, 1.0), 0.0)
        t_lo = np.maximum(t_lo, 0.0)

        def g(t):
            p = o + t[:, None] * d
            return p[:, 2] - self.surface_z(p[:, 0], p[:, 1])

        ok &= (g(t_lo) < 0) & (g(t_hi) > 0)
        lo, hi = t_lo.copy(), t_hi.copy()
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            below = g(mid) < 0
            lo = np.where(ok & below, mid, lo)
            hi = np.where(ok & ~below, mid, hi)
        t = 0.5 * (lo + hi)
        return np.where(ok, t, _RAY_MISS)


class TubeScene:
    """Bent tube viewed along its bore, camera inside.

    The wall is the implicit surface |p_xy - center(p_z)| = radius; the
    bore axis runs along +z with a quadratic sideways bend so nearly every
    forward ray eventually meets the wall.
    """

    def __init__(
        self,
        seed: int = 0,
        radius: float = 0.5,
        length: float = 6.0,
        bend: float = 0.9,
        texture_waves: int = 6,
    ):
        self.radius = radius
        self.length = length
        self.bend = bend
        rng = np.random.default_rng([int(seed), 0x70BE])
        self._texture = _smooth_field(rng, texture_waves, 2.5, 7.0)
        self._bend_dir = rng.uniform(0, 2 * math.pi)

    @property
    def diameter(self) -> float:
        return math.hypot(self.length, self.bend + 2 * self.radius)

    def center_at(self, z):
        z = np.asarray(z, dtype=np.float64)
        s = np.clip(z / self.length, 0.0, 1.2)
        off = self.bend * s * s
        return off * math.cos(self._bend_dir), off * math.sin(self._bend_dir)

    def _implicit(self, p: np.ndarray) -> np.ndarray:
        cx, cy = self.center_at(p[:, 2])
        return (p[:, 0] - cx) ** 2 + (p[:, 1] - cy) ** 2 - self.radius**2

    def texture(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        # parameterize by axial position and wall angle
        cx, cy = self.center_at(points[:, 2])
        ang = np.arctan2(points[:, 1] - cy, points[:, 0] - cx)
        return 0.55 + 0.45 * self._texture(points[:, 2] * 2.0, ang * self.radius * 4.0)

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.uniform(0.3, self.length, size=n)
        ang = rng.uniform(0, 2 * math.pi, size=n)
        cx, cy = self.center_at(z)
        x = cx + self.radius * np.cos(ang)
        y = cy + self.radius * np.sin(ang)
        return np.column_stack([x, y, z])

    def ray_depth(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """March along each ray until the implicit function changes sign,
        then bisect.  Rays still inside the tube after max_t report a miss.
        """
        o = np.atleast_2d(origins).astype(np.float64)
        d = np.atleast_2d(dirs).astype(np.float64)
        n = o.shape[0]
        max_t = 1.6 * self.length / max(1e-9, np.median(np.linalg.norm(d, axis=1)))
        step = self.radius / 12.0
        t_prev = np.full(n, 1e-6)
        f_prev = self._implicit(o + t_prev[:, None] * d)
        hit_lo = np.full(n, _RAY_MISS)
        hit_hi = np.full(n, _RAY_MISS)
        active = f_prev < 0
        t = t_prev.copy()
        while np.any(active) and t.min() < max_t:
            t = t + step
            f = self._implicit(o + t[:, None] * d)
            crossed = active & (f >= 0)
            hit_lo[crossed] = t_prev[crossed]
            hit_hi[crossed] = t[crossed]
            active &= ~crossed & (t < max_t)
            t_prev, f_prev = t, f
        found = hit_lo > _RAY_MISS
        lo = np.where(found, hit_lo, 0.0)
        hi = np.where(found, hit_hi, 1.0)
        for _ in range(70):
            mid = 0.5 * (lo + hi)
            inside = self._implicit(o + mid[:, None] * d) < 0
            lo = np.where(found & inside, mid, lo)
            hi = np.where(found & ~inside, mid, hi)
        tsol = 0.5 * (lo + hi)
        return np.where(found, tsol, _RAY_MISS)


Scene = HeightFieldScene | TubeScene


def make_scene(family: str, seed: int = 0, **kwargs) -> Scene:
    if family == "heightfield":
        return HeightFieldScene(seed=seed, **kwargs)
    if family == "tube":
        return TubeScene(seed=seed, **kwargs)
    raise ValueError(f"unknown scene family '{family}'")


def default_intrinsics(size: int) -> CameraIntrinsics:
    """Square image with a moderate field of view and centered principal
    point (integer center, so the optical axis hits a pixel exactly)."""
    return CameraIntrinsics(
        fx=1.1 * size, fy=1.1 * size, cx=size // 2, cy=size // 2, width=size, height=size
    )


def _camera_pose(position: np.ndarray, rotation_c2w: np.ndarray) -> RigidTransform:
    """World->camera transform of a camera at ``position`` whose
    camera-to-world rotation is ``rotation_c2w``."""
    r_w2c = rotation_c2w.T
    return RigidTransform.from_matrix(r_w2c, -(r_w2c @ position))


def _rotation_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    cr, sr = math.cos(rx), math.sin(rx)
    cp, sp = math.cos(ry), math.sin(ry)
    cy_, sy_ = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy_, -sy_, 0], [sy_, cy_, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def make_trajectory(
    scene: Scene,
    intrinsics: CameraIntrinsics,
    n_frames: int,
    seed: int = 0,
    lateral: float = 0.45,
    rock_deg: float = 4.0,
) -> Trajectory:
    """Smooth sweep with high inter-frame overlap and steady parallax.

    Height-field: a figure-of-eight drift above the relief with gentle
    rocking.  Tube: advance along the bore following the bend.
    """
    rng = np.random.default_rng([int(seed), 0x7124])
    ph = rng.uniform(0, 2 * math.pi, size=3)
    frames = []
    for i in range(n_frames):
        # open sweep over at most one loop; short trajectories cover a
        # fraction of it, so every frame pair keeps a nonzero baseline
        s = i / max(n_frames, 8)
        if isinstance(scene, TubeScene):
            zc = s * 0.35 * scene.length
            cx, cy = scene.center_at(zc)
            pos = np.array([float(cx), float(cy), zc])
            # look along the local bore direction
            cx2, cy2 = scene.center_at(zc + 0.4)
            fwd = np.array([float(cx2 - cx), float(cy2 - cy), 0.4])
            fwd /= np.linalg.norm(fwd)
            up = np.array([0.0, 1.0, 0.0])
            right = np.cross(up, fwd)
            right /= np.linalg.norm(right)
            up = np.cross(fwd, right)
            r_c2w = np.column_stack([right, up, fwd])
            jitter = _rotation_xyz(
                0.01 * math.sin(5 * s * math.pi + ph[0]), 0.01 * math.sin(4 * s * math.pi + ph[1]), 0.0
            )
            frames.append(TrajectoryFrame(i, _camera_pose(pos, r_c2w @ jitter)))
        else:
            theta = 2 * math.pi * s
            pos = np.array(
                [
                    lateral * math.sin(theta),
                    0.6 * lateral * math.sin(2 * theta),
                    0.06 * math.sin(3 * theta),
                ]
            )
            rock = math.radians(rock_deg)
            r_c2w = _rotation_xyz(
                rock * math.sin(theta), rock * math.cos(theta), 0.25 * rock * math.sin(2 * theta)
            )
            frames.append(TrajectoryFrame(i, _camera_pose(pos, r_c2w)))
    return Trajectory(intrinsics=intrinsics, frames=frames)


def render_ground_truth(
    scene: Scene,
    frame_pose: RigidTransform,
    intrinsics: CameraIntrinsics,
    max_invalid_fraction: float = 0.01,
    light_falloff_ref: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Trace one ray per pixel; return (depth, intensity) rasters.

    Depth is the camera-frame z of the first surface hit (0 marks a miss);
    intensity is surface texture shaded by inverse-square falloff of a
    light co-located with the camera.  More than ``max_invalid_fraction``
    misses raises :class:`SceneCoverageError`.
    """
    h, w = intrinsics.height, intrinsics.width
    dir_x, dir_y = pixel_direction_grid(intrinsics)
    dirs_cam = np.stack([dir_x.ravel(), dir_y.ravel(), np.ones(h * w)], axis=1)
    cam_to_world = frame_pose.inverse()
    r_c2w = cam_to_world.rotation_matrix()
    origin = cam_to_world.translation
    dirs_world = dirs_cam @ r_c2w.T
    origins = np.broadcast_to(origin, (h * w, 3))
    t = scene.ray_depth(origins, dirs_world)
    hit = t > 0
    n_miss = int(np.count_nonzero(~hit))
    if n_miss > max_invalid_fraction * h * w:
        raise SceneCoverageError(
            f"{n_miss}/{h * w} rays miss the surface (> {max_invalid_fraction:.0%})"
        )
    depth = np.where(hit, t, 0.0).reshape(h, w)
    points = origins + t[:, None] * dirs_world
    tex = np.zeros(h * w)
    tex[hit] = scene.texture(points[hit])
    ref = light_falloff_ref if light_falloff_ref is not None else _falloff_reference(scene)
    # co-located light: irradiance falls off with the square of range
    dist2 = np.maximum(t, 1e-9) ** 2 * np.sum(dirs_cam**2, axis=1)
    shade = ref**2 / np.maximum(dist2, 1e-12)
    intensity = np.clip(tex * np.where(hit, shade, 0.0), 0.0, 1.0).reshape(h, w)
    return depth, intensity


def _falloff_reference(scene: Scene) -> float:
    if isinstance(scene, TubeScene):
        return 1.1 * scene.radius
    return 0.75 * scene.depth0


@dataclass
class SfmSimConfig:
    """Knobs of the sparse-reconstruction simulator.

    Noise and outlier displacement scale with the scene diameter so
    configs transfer between scene sizes.
    """

    num_points: int = 200
    min_points: int = 10
    sigma_frac: float = 0.005
    outlier_frac: float = 0.05
    outlier_min_frac: float = 0.12
    candidate_factor: int = 6
    min_track: int = 2
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.outlier_frac < 1):
            raise ValueError(f"outlier_frac must be in [0, 1), got {self.outlier_frac}")
        if self.sigma_frac < 0:
            raise ValueError(f"sigma_frac must be >= 0, got {self.sigma_frac}")
        if self.min_track < 2:
            raise ValueError("tracks need at least two frames")


def _visible_frames(
    scene: Scene, trajectory: Trajectory, points: np.ndarray
) -> list[list[int]]:
    """Per candidate point, the trajectory positions that see it.

    A frame sees a point when the projection lands in bounds with positive
    depth and no nearer surface occludes it along the same ray.
    """
    k = trajectory.intrinsics
    n = points.shape[0]
    visible: list[list[int]] = [[] for _ in range(n)]
    for pos, tf in enumerate(trajectory.frames):
        cam_pts = tf.pose.apply_array(points)
        uv, z = project_array(k, cam_pts)
        inb = (
            (z > 1e-6)
            & (uv[:, 0] >= 0)
            & (uv[:, 0] <= k.width - 1)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] <= k.height - 1)
        )
        idx = np.flatnonzero(inb)
        if idx.size == 0:
            continue
        cam_to_world = tf.pose.inverse()
        origin = cam_to_world.translation
        dirs_cam = np.column_stack(
            [(uv[idx, 0] - k.cx) / k.fx, (uv[idx, 1] - k.cy) / k.fy, np.ones(idx.size)]
        )
        dirs_world = dirs_cam @ cam_to_world.rotation_matrix().T
        t_hit = scene.ray_depth(np.broadcast_to(origin, (idx.size, 3)), dirs_world)
        tol = 1e-5 * max(1.0, scene.diameter)
        unoccluded = (t_hit > 0) & (t_hit >= z[idx] - tol)
        for j in idx[unoccluded]:
            visible[j].append(pos)
    return visible


def simulate_sfm(scene: Scene, trajectory: Trajectory, config: SfmSimConfig) -> SparsePointSet:
    """Simulate a sparse multi-view reconstruction of the scene.

    Candidate points are drawn on the surface and ranked by texture
    response (a feature-detector stand-in).  Each kept point receives a
    contiguous track of observing frames; inliers get long tracks,
    injected outliers get the shortest possible track (two adjacent
    frames) so their confidence weight stays low.  Outlier positions are
    pushed far beyond the surface along their first observing frame's
    sight line, the way mismatched correspondences triangulate.
    Observations are the exact projections of the true surface point;
    only the stored 3D position is perturbed.
    """
    if len(trajectory) < 2:
        raise InsufficientParallax("trajectory must contain at least two frames")
    rng = np.random.default_rng([int(config.seed), 0x5F3])
    candidates = scene.sample_surface(rng, config.num_points * config.candidate_factor)
    tex = scene.texture(candidates)
    order = np.argsort(-tex, kind="stable")
    candidates = candidates[order]
    visible = _visible_frames(scene, trajectory, candidates)
    eligible = [i for i in range(candidates.shape[0]) if len(visible[i]) >= 2]
    if len(eligible) < config.min_points:
        raise InsufficientParallax(
            f"only {len(eligible)} candidate points visible in >= 2 frames "
            f"(need {config.min_points})"
        )
    keep = eligible[: config.num_points]

    n_keep = len(keep)
    n_outliers = int(round(config.outlier_frac * n_keep))
    outlier_idx = set(
        rng.choice(n_keep, size=n_outliers, replace=False).tolist() if n_outliers else []
    )
    sigma = config.sigma_frac * scene.diameter

    from .supervision import compute_confidence  # deferred: supervision imports our types

    frame_ids = trajectory.frame_ids()
    points: list[SparsePoint] = []
    for new_id, cand_i in enumerate(keep):
        vis = visible[cand_i]
        n_vis = len(vis)
        if new_id in outlier_idx:
            start = int(rng.integers(0, n_vis - 1))
            track = vis[start : start + 2]
        else:
            lo = max(config.min_track, (n_vis + 1) // 2)
            length = int(rng.integers(lo, n_vis + 1)) if n_vis > lo else n_vis
            start = int(rng.integers(0, n_vis - length + 1))
            track = vis[start : start + length]
        xyz_true = candidates[cand_i]
        observations = []
        for pos in track:
            tf = trajectory.frames[pos]
            cam = tf.pose.apply(xyz_true)
            observations.append(
                Observation(
                    frame_ids[pos],
                    Pixel(
                        trajectory.intrinsics.fx * cam[0] / cam[2] + trajectory.intrinsics.cx,
                        trajectory.intrinsics.fy * cam[1] / cam[2] + trajectory.intrinsics.cy,
                    ),
                )
            )
        xyz = xyz_true.copy()
        if sigma > 0:
            xyz = xyz + rng.normal(0.0, sigma, size=3)
        if new_id in outlier_idx:
            # A mismatched correspondence triangulates with near-parallel
            # rays, so the spurious intersection lands several times deeper
            # along the sight line of the first observing frame.
            center = trajectory.frames[track[0]].pose.inverse().apply(np.zeros(3))
            ray = xyz - center
            reach = float(np.linalg.norm(ray))
            floor = max(10.0 * sigma, config.outlier_min_frac * scene.diameter)
            factor = rng.uniform(3.0, 6.0)
            factor = max(factor, 1.0 + floor / max(reach, 1e-12))
            xyz = center + factor * ray
        point = SparsePoint(new_id, xyz, 0.0, observations)
        point.weight = compute_confidence(point.observations)
        points.append(point)
    return SparsePointSet(points)
