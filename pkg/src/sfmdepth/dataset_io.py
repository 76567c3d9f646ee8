"""On-disk dataset layout and raster/cloud file formats.

A dataset is a directory with a ``manifest.json`` at its root naming the
camera, the per-frame poses and raster files, the sparse points with
their tracks, and optional subsequence groupings:

    root/
      manifest.json
      images/frame_00000.pgm   8-bit grayscale video frames
      depth/frame_00000.pfm    float32 ground-truth depth, 0 = invalid

Rasters use portable formats: binary PGM (P5, maxval 255) for images and
grayscale PFM (``Pf``) for depth.  Values live in memory as float64;
images sit on the 1/255 grid and depths on the float32 grid, so a write
followed by a read reproduces the array bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyCloud,
    ManifestError,
    ParseError,
    ReferentialIntegrityError,
    ShapeError,
    VersionError,
)
from .geometry import CameraIntrinsics, Pixel, RigidTransform
from .scenes import (
    Observation,
    SparsePoint,
    SparsePointSet,
    Trajectory,
    TrajectoryFrame,
)

FORMAT_TAG = "sfmdepth-dataset"
FORMAT_VERSION = 1


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise ParseError(message)


# ---------------------------------------------------------------- rasters


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Snap an intensity raster to the 8-bit grid it will occupy on disk."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def quantize_depth(depth: np.ndarray) -> np.ndarray:
    """Snap a depth raster to the float32 grid it will occupy on disk."""
    return np.asarray(depth, dtype=np.float32).astype(np.float64)


def _read_header_token(stream) -> bytes:
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    token = b""
    while True:
        ch = stream.read(1)
        if ch == b"":
            raise ParseError("truncated raster header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = stream.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def write_pfm(path, values: np.ndarray) -> None:
    """Write a 2D float raster as grayscale PFM (little-endian)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError(f"PFM writer expects a 2D raster, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise ParseError("refusing to write non-finite values to PFM")
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        # PFM stores rows bottom to top
        f.write(np.ascontiguousarray(values[::-1].astype("<f4")).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM raster into a float64 array (rows top to bottom)."""
    with open(path, "rb") as f:
        magic = _read_header_token(f)
        if magic == b"PF":
            raise ParseError(f"{path}: color PFM is not supported, expected grayscale 'Pf'")
        if magic != b"Pf":
            raise ParseError(f"{path}: bad PFM magic {magic!r}")
        try:
            w = int(_read_header_token(f))
            h = int(_read_header_token(f))
            scale = float(_read_header_token(f))
        except ValueError as exc:
            raise ParseError(f"{path}: malformed PFM header: {exc}") from exc
        if w <= 0 or h <= 0:
            raise ParseError(f"{path}: bad PFM dimensions {w}x{h}")
        if scale == 0.0:
            raise ParseError(f"{path}: PFM scale must be nonzero")
        raw = f.read(4 * w * h)
    if len(raw) != 4 * w * h:
        raise ParseError(f"{path}: truncated PFM payload ({len(raw)} of {4 * w * h} bytes)")
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    values = values[::-1].astype(np.float64)
    if not np.isfinite(values).all():
        raise ParseError(f"{path}: PFM payload contains non-finite values")
    return values


def write_pgm(path, image: np.ndarray) -> None:
    """Write an intensity raster in [0, 1] as binary 8-bit PGM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"PGM writer expects a 2D raster, got shape {image.shape}")
    levels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"P5\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"255\n")
        f.write(levels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into a float64 raster on the 1/255 grid."""
    with open(path, "rb") as f:
        magic = _read_header_token(f)
        if magic != b"P5":
            raise ParseError(f"{path}: bad PGM magic {magic!r}, expected binary 'P5'")
        try:
            w = int(_read_header_token(f))
            h = int(_read_header_token(f))
            maxval = int(_read_header_token(f))
        except ValueError as exc:
            raise ParseError(f"{path}: malformed PGM header: {exc}") from exc
        if w <= 0 or h <= 0:
            raise ParseError(f"{path}: bad PGM dimensions {w}x{h}")
        if maxval != 255:
            raise ParseError(f"{path}: only 8-bit PGM (maxval 255) is supported, got {maxval}")
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise ParseError(f"{path}: truncated PGM payload ({len(raw)} of {w * h} bytes)")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# ------------------------------------------------------------ point clouds


def write_ply(path, points: np.ndarray, intensity: np.ndarray | None = None) -> None:
    """Write an Nx3 point cloud as ASCII PLY, optionally with intensity."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"point cloud must be Nx3, got shape {points.shape}")
    if len(points) == 0:
        raise EmptyCloud("refusing to write an empty point cloud")
    if intensity is not None:
        intensity = np.asarray(intensity, dtype=np.float64)
        if intensity.shape != (len(points),):
            raise ShapeError(
                f"intensity must be length {len(points)}, got shape {intensity.shape}"
            )
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}"]
    lines += [f"property float {axis}" for axis in "xyz"]
    if intensity is not None:
        lines.append("property float intensity")
    lines.append("end_header")
    for i, p in enumerate(points):
        row = f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
        if intensity is not None:
            row += f" {float(intensity[i])!r}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path) -> np.ndarray:
    """Read the vertex positions back out of an ASCII PLY file."""
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0].strip() != "ply":
        raise ParseError(f"{path}: not a PLY file")
    try:
        end = text.index("end_header")
    except ValueError:
        raise ParseError(f"{path}: PLY header never ends") from None
    count = None
    for line in text[1:end]:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
    if count is None:
        raise ParseError(f"{path}: PLY header declares no vertices")
    body = text[end + 1 : end + 1 + count]
    if len(body) != count:
        raise ParseError(f"{path}: expected {count} vertex rows, found {len(body)}")
    return np.array([[float(tok) for tok in row.split()[:3]] for row in body])


# ---------------------------------------------------------------- dataset


@dataclass
class FrameRecord:
    """One video frame with its pose and rasters."""

    frame_id: int
    pose: RigidTransform
    image: np.ndarray
    gt_depth: np.ndarray | None = None


@dataclass
class Dataset:
    """A fully loaded dataset: camera, frames, sparse points, groupings."""

    intrinsics: CameraIntrinsics
    frames: list[FrameRecord]
    points: SparsePointSet
    subsequences: list[list[int]]
    meta: dict = field(default_factory=dict)

    def frame_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames]

    def frame(self, frame_id: int) -> FrameRecord:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(f"no frame {frame_id} in dataset")

    def trajectory(self) -> Trajectory:
        return Trajectory(
            self.intrinsics,
            [TrajectoryFrame(f.frame_id, f.pose) for f in self.frames],
        )

    def images_by_id(self) -> dict[int, np.ndarray]:
        return {f.frame_id: f.image for f in self.frames}


@dataclass
class ManifestFrame:
    frame_id: int
    pose: RigidTransform
    image_path: Path
    depth_path: Path | None


@dataclass
class Manifest:
    """Parsed manifest.json: everything except the raster payloads."""

    version: int
    intrinsics: CameraIntrinsics
    frames: list[ManifestFrame]
    points: list[SparsePoint]
    subsequences: list[list[int]]
    meta: dict
    base: Path

    def trajectory(self) -> Trajectory:
        return Trajectory(
            self.intrinsics,
            [TrajectoryFrame(f.frame_id, f.pose) for f in self.frames],
        )

    def point_set(self) -> SparsePointSet:
        return SparsePointSet(self.points)


def _parse_intrinsics(raw) -> CameraIntrinsics:
    _expect(isinstance(raw, dict), "manifest intrinsics must be an object")
    keys = ("fx", "fy", "cx", "cy", "width", "height")
    for key in keys:
        _expect(key in raw, f"manifest intrinsics missing '{key}'")
    try:
        return CameraIntrinsics(
            fx=float(raw["fx"]),
            fy=float(raw["fy"]),
            cx=float(raw["cx"]),
            cy=float(raw["cy"]),
            width=int(raw["width"]),
            height=int(raw["height"]),
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"invalid intrinsics: {exc}") from exc


def _parse_pose(raw, context: str) -> RigidTransform:
    _expect(isinstance(raw, dict), f"{context}: pose must be an object")
    rot = raw.get("rotation")
    tr = raw.get("translation")
    _expect(isinstance(rot, list) and len(rot) == 4, f"{context}: rotation must be [w, x, y, z]")
    _expect(isinstance(tr, list) and len(tr) == 3, f"{context}: translation must be [x, y, z]")
    try:
        return RigidTransform(
            rotation=np.array([float(c) for c in rot]),
            translation=np.array([float(c) for c in tr]),
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{context}: invalid pose: {exc}") from exc


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest.json (rasters are not loaded).

    ``path`` may be the dataset root directory or the manifest file.
    """
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.is_file():
        raise ManifestError(f"no manifest found at {manifest_path}")
    base = manifest_path.parent
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}: invalid JSON: {exc}") from exc
    _expect(isinstance(raw, dict), "manifest root must be an object")
    if raw.get("format") != FORMAT_TAG:
        raise ParseError(f"{manifest_path}: unrecognized format tag {raw.get('format')!r}")
    version = raw.get("version")
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{manifest_path}: unsupported dataset version {version!r}, "
            f"this reader understands version {FORMAT_VERSION}"
        )
    intrinsics = _parse_intrinsics(raw.get("intrinsics"))

    frames_raw = raw.get("frames")
    _expect(isinstance(frames_raw, list) and frames_raw, "manifest must list at least one frame")
    frames: list[ManifestFrame] = []
    seen_ids: set[int] = set()
    for entry in frames_raw:
        _expect(isinstance(entry, dict), "each frame entry must be an object")
        _expect("frame_id" in entry, "frame entry missing 'frame_id'")
        fid = entry["frame_id"]
        _expect(isinstance(fid, int), f"frame_id must be an integer, got {fid!r}")
        _expect(fid not in seen_ids, f"duplicate frame_id {fid}")
        seen_ids.add(fid)
        pose = _parse_pose(entry, f"frame {fid}")
        _expect(
            isinstance(entry.get("image"), str),
            f"frame {fid}: missing image path",
        )
        depth_rel = entry.get("depth")
        _expect(
            depth_rel is None or isinstance(depth_rel, str),
            f"frame {fid}: depth path must be a string or null",
        )
        frames.append(
            ManifestFrame(
                frame_id=fid,
                pose=pose,
                image_path=base / entry["image"],
                depth_path=None if depth_rel is None else base / depth_rel,
            )
        )

    points_raw = raw.get("points", [])
    _expect(isinstance(points_raw, list), "manifest points must be a list")
    points: list[SparsePoint] = []
    seen_pids: set[int] = set()
    for entry in points_raw:
        _expect(isinstance(entry, dict), "each point entry must be an object")
        pid = entry.get("point_id")
        _expect(isinstance(pid, int), f"point_id must be an integer, got {pid!r}")
        _expect(pid not in seen_pids, f"duplicate point_id {pid}")
        seen_pids.add(pid)
        xyz = entry.get("xyz")
        _expect(isinstance(xyz, list) and len(xyz) == 3, f"point {pid}: xyz must be [x, y, z]")
        weight = entry.get("weight")
        _expect(
            isinstance(weight, (int, float)) and not isinstance(weight, bool),
            f"point {pid}: weight must be a number",
        )
        obs_raw = entry.get("observations")
        _expect(isinstance(obs_raw, list), f"point {pid}: observations must be a list")
        observations = []
        for ob in obs_raw:
            _expect(isinstance(ob, dict), f"point {pid}: each observation must be an object")
            ofid = ob.get("frame_id")
            _expect(isinstance(ofid, int), f"point {pid}: observation frame_id must be an integer")
            _expect(
                isinstance(ob.get("u"), (int, float)) and isinstance(ob.get("v"), (int, float)),
                f"point {pid}: observation needs numeric u and v",
            )
            observations.append(Observation(ofid, Pixel(float(ob["u"]), float(ob["v"]))))
        points.append(
            SparsePoint(
                point_id=pid,
                xyz=np.array([float(c) for c in xyz]),
                weight=float(weight),
                observations=observations,
            )
        )

    subsequences_raw = raw.get("subsequences")
    if subsequences_raw is None:
        subsequences = [[f.frame_id for f in frames]]
    else:
        _expect(isinstance(subsequences_raw, list), "subsequences must be a list of lists")
        subsequences = []
        claimed: set[int] = set()
        for group in subsequences_raw:
            _expect(
                isinstance(group, list) and all(isinstance(fid, int) for fid in group),
                "each subsequence must be a list of frame ids",
            )
            for fid in group:
                if fid not in seen_ids:
                    raise ReferentialIntegrityError(
                        f"subsequence references unknown frame {fid}"
                    )
                _expect(fid not in claimed, f"frame {fid} appears in two subsequences")
                claimed.add(fid)
            subsequences.append(list(group))

    meta = raw.get("meta", {})
    _expect(isinstance(meta, dict), "manifest meta must be an object")

    # cross-reference tracks against the trajectory
    for point in points:
        for ob in point.observations:
            if ob.frame_id not in seen_ids:
                raise ReferentialIntegrityError(
                    f"point {point.point_id} observed in unknown frame {ob.frame_id}"
                )

    return Manifest(
        version=version,
        intrinsics=intrinsics,
        frames=frames,
        points=points,
        subsequences=subsequences,
        meta=meta,
        base=base,
    )


def write_dataset(dataset: Dataset, root) -> Path:
    """Write a dataset directory; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    h, w = dataset.intrinsics.height, dataset.intrinsics.width

    frames_json = []
    for frame in dataset.frames:
        if frame.image.shape != (h, w):
            raise ShapeError(
                f"frame {frame.frame_id}: image shape {frame.image.shape} "
                f"does not match intrinsics {h}x{w}"
            )
        image_rel = f"images/frame_{frame.frame_id:05d}.pgm"
        write_pgm(root / image_rel, frame.image)
        depth_rel = None
        if frame.gt_depth is not None:
            if frame.gt_depth.shape != (h, w):
                raise ShapeError(
                    f"frame {frame.frame_id}: depth shape {frame.gt_depth.shape} "
                    f"does not match intrinsics {h}x{w}"
                )
            depth_rel = f"depth/frame_{frame.frame_id:05d}.pfm"
            write_pfm(root / depth_rel, frame.gt_depth)
        frames_json.append(
            {
                "frame_id": frame.frame_id,
                "rotation": [float(c) for c in frame.pose.rotation],
                "translation": [float(c) for c in frame.pose.translation],
                "image": image_rel,
                "depth": depth_rel,
            }
        )

    points_json = []
    for point in dataset.points.points:
        points_json.append(
            {
                "point_id": point.point_id,
                "xyz": [float(c) for c in point.xyz],
                "weight": float(point.weight),
                "observations": [
                    {"frame_id": ob.frame_id, "u": float(ob.pixel.u), "v": float(ob.pixel.v)}
                    for ob in point.observations
                ],
            }
        )

    manifest = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "intrinsics": {
            "fx": dataset.intrinsics.fx,
            "fy": dataset.intrinsics.fy,
            "cx": dataset.intrinsics.cx,
            "cy": dataset.intrinsics.cy,
            "width": dataset.intrinsics.width,
            "height": dataset.intrinsics.height,
        },
        "frames": frames_json,
        "points": points_json,
        "subsequences": dataset.subsequences,
        "meta": dataset.meta,
    }
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def read_dataset(root) -> Dataset:
    """Load a dataset directory back into memory.

    Raises :class:`ManifestError` when the manifest or a raster it names
    is missing, :class:`VersionError` on a version this reader does not
    understand, and :class:`ParseError` on schema violations.
    """
    manifest = load_manifest(root)
    frames = []
    for mf in manifest.frames:
        if not mf.image_path.is_file():
            raise ManifestError(f"manifest names missing image {mf.image_path}")
        image = read_pgm(mf.image_path)
        gt_depth = None
        if mf.depth_path is not None:
            if not mf.depth_path.is_file():
                raise ManifestError(f"manifest names missing depth raster {mf.depth_path}")
            gt_depth = read_pfm(mf.depth_path)
        frames.append(FrameRecord(mf.frame_id, mf.pose, image, gt_depth))
    return Dataset(
        intrinsics=manifest.intrinsics,
        frames=frames,
        points=manifest.point_set(),
        subsequences=manifest.subsequences,
        meta=manifest.meta,
    )
