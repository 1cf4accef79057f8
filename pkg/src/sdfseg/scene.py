"""Scene ingestion: COLMAP text exports, images, masks, normalization.

The loader consumes the three COLMAP text files (cameras.txt,
images.txt, points3D.txt), the referenced images, and optional coarse
masks matched by filename stem.  The scene is then normalized by a
similarity transform so the foreground-attributed sparse points fit the
unit sphere with a 0.9 margin; everything downstream (fields, rendering,
checkpoints) lives in that normalized frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from . import pngio
from .errors import DimensionError, ParseError, UnsupportedModelError
from .rays import Ray, RayBundle, bundle_to_ray, make_bundle

NORM_MARGIN = 0.9        # normalized foreground radius
OUTLIER_TRIM = 0.02      # maskless path: drop this fraction of far points
MIN_MASK_POINTS = 10     # fall back to trimming below this filter yield
MASK_DILATE_PX = 2


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class CameraPose:
    """World-to-camera rigid transform: p_cam = rotation @ p_world + translation."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        self.rotation = r
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass
class NormTransform:
    """Similarity map into the normalized frame: p' = scale * (p + translation)."""
    scale: float
    translation: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(pts, dtype=np.float64) + self.translation)

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale - self.translation

    def apply_pose(self, pose: CameraPose) -> CameraPose:
        # p_cam = R p + t  =>  (scaled) p_cam' = R p' + s (t - R T)
        t = self.scale * (pose.translation - pose.rotation @ self.translation)
        return CameraPose(pose.rotation.copy(), t)


@dataclass
class View:
    image: np.ndarray                    # H x W x 3 in [0,1]
    intrinsics: CameraIntrinsics
    pose: CameraPose                     # normalized frame
    coarse_mask: np.ndarray | None = None
    name: str = ""
    _dilated: np.ndarray | None = field(default=None, repr=False)

    def dilated_mask(self) -> np.ndarray | None:
        """Coarse mask grown by a couple of pixels (cached)."""
        if self.coarse_mask is None:
            return None
        if self._dilated is None:
            self._dilated = binary_dilation(
                self.coarse_mask.astype(bool), iterations=MASK_DILATE_PX)
        return self._dilated


@dataclass
class SceneBundle:
    """The training corpus: posed views, sparse points, normalization."""
    views: list[View]
    sparse_points: np.ndarray            # (N, 3) normalized frame
    norm_transform: NormTransform
    horizon_color: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.views:
            raise ValueError("views must be non-empty")
        if self.horizon_color is None:
            self.horizon_color = estimate_horizon_color(self.views)

    def pixel_ray(self, view_index: int, px: float, py: float) -> Ray:
        """Ray through pixel center (px+0.5, py+0.5) in the normalized frame."""
        view = self.views[view_index]
        intr = view.intrinsics
        if not (0 <= px < intr.width) or not (0 <= py < intr.height):
            raise IndexError(
                f"pixel ({px}, {py}) outside {intr.width}x{intr.height} image")
        bundle = self.view_rays(view_index, np.array([px]), np.array([py]))
        return bundle_to_ray(bundle, 0)

    def view_rays(self, view_index: int, px: np.ndarray, py: np.ndarray) -> RayBundle:
        """Batched pixel rays (no bounds checking; callers pass valid pixels)."""
        view = self.views[view_index]
        intr = view.intrinsics
        pose = view.pose
        d_cam = np.stack([
            (np.asarray(px, dtype=np.float64) + 0.5 - intr.cx) / intr.fx,
            (np.asarray(py, dtype=np.float64) + 0.5 - intr.cy) / intr.fy,
            np.ones(len(px)),
        ], axis=1)
        d_world = d_cam @ pose.rotation   # == R.T @ d per ray
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        origins = np.broadcast_to(pose.center, d_world.shape)
        return make_bundle(origins, d_world)

    def project(self, view_index: int, pts: np.ndarray):
        """Project normalized-frame points into a view.

        Returns (px, py, in_front) with pixel coordinates (unrounded) and
        a mask of points in front of the camera.
        """
        view = self.views[view_index]
        pose, intr = view.pose, view.intrinsics
        p_cam = pts @ pose.rotation.T + pose.translation
        z = p_cam[:, 2]
        in_front = z > 1e-9
        zz = np.where(in_front, z, 1.0)
        px = intr.fx * p_cam[:, 0] / zz + intr.cx
        py = intr.fy * p_cam[:, 1] / zz + intr.cy
        return px, py, in_front


def estimate_horizon_color(views: list[View]) -> np.ndarray:
    """Median border-pixel color over all views (rays leaving the scene)."""
    border = []
    for v in views:
        im = v.image
        border.append(im[0].reshape(-1, 3))
        border.append(im[-1].reshape(-1, 3))
        border.append(im[:, 0].reshape(-1, 3))
        border.append(im[:, -1].reshape(-1, 3))
    return np.median(np.concatenate(border, axis=0), axis=0)


# ---------------------------------------------------------------------------
# COLMAP text parsing


def _quat_to_rot(qw, qx, qy, qz) -> np.ndarray:
    n = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    qw, qx, qy, qz = qw / n, qx / n, qy / n, qz / n
    return np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
        [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
        [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)],
    ])


def _rot_to_quat(r: np.ndarray) -> tuple[float, float, float, float]:
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(r[i, i] - r[j, j] - r[k, k] + 1.0) * 2
        q = [0.0, 0.0, 0.0]
        q[i] = 0.25 * s
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
        qw = (r[k, j] - r[j, k]) / s
        qx, qy, qz = q
    return qw, qx, qy, qz


def _content_lines(path: Path):
    """Yield (line_number, stripped_text) skipping comments and blanks."""
    with open(path, "r", encoding="utf-8") as f:
        for ln, raw in enumerate(f, start=1):
            text = raw.strip()
            if text and not text.startswith("#"):
                yield ln, text


def read_cameras_text(path) -> dict[int, CameraIntrinsics]:
    path = Path(path)
    cameras = {}
    for ln, text in _content_lines(path):
        parts = text.split()
        try:
            cam_id = int(parts[0])
            model = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (ValueError, IndexError) as e:
            raise ParseError(f"{path.name}:{ln}: malformed camera line ({e})") from e
        if model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError(f"{path.name}:{ln}: SIMPLE_PINHOLE needs 3 params")
            f, cx, cy = params
            intr = CameraIntrinsics(f, f, cx, cy, width, height)
        elif model == "PINHOLE":
            if len(params) != 4:
                raise ParseError(f"{path.name}:{ln}: PINHOLE needs 4 params")
            fx, fy, cx, cy = params
            intr = CameraIntrinsics(fx, fy, cx, cy, width, height)
        else:
            raise UnsupportedModelError(
                f"{path.name}:{ln}: camera model {model!r} is not supported "
                f"(only PINHOLE and SIMPLE_PINHOLE)")
        cameras[cam_id] = intr
    if not cameras:
        raise ParseError(f"{path.name}: no cameras defined")
    return cameras


def read_images_text(path) -> list[tuple[int, CameraPose, int, str]]:
    """Registered views as (image_id, pose, camera_id, name) tuples.

    Each view occupies two lines (pose line, then a 2D-point line that
    may be empty); comments are skipped, blank lines only count as the
    point line.
    """
    path = Path(path)
    entries = []
    expect_pose = True
    with open(path, "r", encoding="utf-8") as f:
        lines = list(enumerate(f, start=1))
    for ln, raw in lines:
        text = raw.strip()
        if text.startswith("#"):
            continue
        if not expect_pose:
            expect_pose = True  # the 2D-point line; content unused
            continue
        if not text:
            continue
        parts = text.split()
        if len(parts) < 10:
            raise ParseError(f"{path.name}:{ln}: expected 10 fields in image line")
        try:
            image_id = int(parts[0])
            qw, qx, qy, qz = (float(p) for p in parts[1:5])
            tx, ty, tz = (float(p) for p in parts[5:8])
            camera_id = int(parts[8])
        except ValueError as e:
            raise ParseError(f"{path.name}:{ln}: malformed image line ({e})") from e
        name = parts[9]
        pose = CameraPose(_quat_to_rot(qw, qx, qy, qz), np.array([tx, ty, tz]))
        entries.append((image_id, pose, camera_id, name))
        expect_pose = False
    if not entries:
        raise ParseError(f"{path.name}: no registered views")
    return entries


def read_points3d_text(path) -> np.ndarray:
    path = Path(path)
    pts = []
    for ln, text in _content_lines(path):
        parts = text.split()
        try:
            pts.append([float(parts[1]), float(parts[2]), float(parts[3])])
        except (ValueError, IndexError) as e:
            raise ParseError(f"{path.name}:{ln}: malformed 3D point line ({e})") from e
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def write_colmap_text(out_dir, intrinsics_by_id: dict[int, CameraIntrinsics],
                      images: list[tuple[int, CameraPose, int, str]],
                      points: np.ndarray):
    """Write the three COLMAP text files (full float precision)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "cameras.txt", "w") as f:
        f.write("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for cam_id, c in sorted(intrinsics_by_id.items()):
            f.write(f"{cam_id} PINHOLE {c.width} {c.height} "
                    f"{float(c.fx)!r} {float(c.fy)!r} {float(c.cx)!r} {float(c.cy)!r}\n")
    with open(out_dir / "images.txt", "w") as f:
        f.write("# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        for image_id, pose, camera_id, name in images:
            quat = [float(q) for q in _rot_to_quat(pose.rotation)]
            t = [float(x) for x in pose.translation]
            f.write(f"{image_id} {quat[0]!r} {quat[1]!r} {quat[2]!r} {quat[3]!r} "
                    f"{t[0]!r} {t[1]!r} {t[2]!r} {camera_id} {name}\n")
            f.write("\n")
    with open(out_dir / "points3D.txt", "w") as f:
        f.write("# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[]\n")
        for i, p in enumerate(points):
            f.write(f"{i + 1} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
                    f"128 128 128 0.5\n")


# ---------------------------------------------------------------------------
# normalization


def _bounding_sphere(pts: np.ndarray) -> tuple[np.ndarray, float]:
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    radius = float(np.linalg.norm(pts - center, axis=1).max())
    return center, radius


def compute_norm_transform(points: np.ndarray,
                           mask_hits: np.ndarray | None = None) -> NormTransform:
    """Foreground-fitting similarity transform.

    `mask_hits` counts, per sparse point, the views whose coarse mask it
    projects into; points seen in >= 2 masked views define the
    foreground.  Without masks the 2% of points farthest from the
    centroid are discarded first.
    """
    if len(points) == 0:
        raise ValueError("cannot normalize a scene without sparse points")
    selected = None
    if mask_hits is not None:
        fg = points[mask_hits >= 2]
        if len(fg) >= MIN_MASK_POINTS:
            selected = fg
    if selected is None:
        centroid = points.mean(axis=0)
        dist = np.linalg.norm(points - centroid, axis=1)
        keep = dist <= np.quantile(dist, 1.0 - OUTLIER_TRIM)
        selected = points[keep]
    center, radius = _bounding_sphere(selected)
    if radius <= 0:
        radius = 1.0
    return NormTransform(scale=NORM_MARGIN / radius, translation=-center)


def _project_world(pose: CameraPose, intr: CameraIntrinsics, pts: np.ndarray):
    p_cam = pts @ pose.rotation.T + pose.translation
    z = p_cam[:, 2]
    ok = z > 1e-9
    zz = np.where(ok, z, 1.0)
    px = intr.fx * p_cam[:, 0] / zz + intr.cx
    py = intr.fy * p_cam[:, 1] / zz + intr.cy
    return px, py, ok


def _mask_hit_counts(points: np.ndarray, views_raw) -> np.ndarray:
    hits = np.zeros(len(points), dtype=np.int64)
    for pose, intr, mask in views_raw:
        if mask is None:
            continue
        px, py, ok = _project_world(pose, intr, points)
        ix = np.floor(px).astype(np.int64)
        iy = np.floor(py).astype(np.int64)
        inside = ok & (ix >= 0) & (ix < intr.width) & (iy >= 0) & (iy < intr.height)
        idx = np.where(inside)[0]
        hit = mask[iy[idx], ix[idx]] > 0
        hits[idx[hit]] += 1
    return hits


# ---------------------------------------------------------------------------
# loader


def load_colmap(dir_path, image_dir, mask_dir=None) -> SceneBundle:
    """Build a normalized SceneBundle from a COLMAP text export.

    Masks, when a directory is given, are matched to images by filename
    stem; views without a matching file simply carry no coarse mask.
    """
    dir_path = Path(dir_path)
    image_dir = Path(image_dir)
    cameras = read_cameras_text(dir_path / "cameras.txt")
    images = read_images_text(dir_path / "images.txt")
    points_world = read_points3d_text(dir_path / "points3D.txt")

    masks_by_stem: dict[str, Path] = {}
    if mask_dir is not None:
        mask_dir = Path(mask_dir)
        if mask_dir.is_dir():
            for p in sorted(mask_dir.iterdir()):
                masks_by_stem[p.stem] = p

    raw_views = []
    images = sorted(images, key=lambda e: e[3])
    for image_id, pose, camera_id, name in images:
        if camera_id not in cameras:
            raise ParseError(f"images.txt: view {name!r} references unknown "
                             f"camera id {camera_id}")
        intr = cameras[camera_id]
        img_path = image_dir / name
        if not img_path.exists():
            raise ParseError(f"images.txt: referenced image {name!r} not found "
                             f"under {image_dir}")
        img = pngio.read_rgb(img_path)
        if img.shape[:2] != (intr.height, intr.width):
            raise DimensionError(
                f"image {name!r} is {img.shape[1]}x{img.shape[0]} but camera "
                f"{camera_id} expects {intr.width}x{intr.height}")
        mask = None
        stem = Path(name).stem
        if stem in masks_by_stem:
            mask = pngio.read_mask(masks_by_stem[stem])
            if mask.shape != (intr.height, intr.width):
                raise DimensionError(
                    f"mask for {name!r} is {mask.shape[1]}x{mask.shape[0]} but "
                    f"camera {camera_id} expects {intr.width}x{intr.height}")
        raw_views.append((pose, intr, img, mask, name))

    have_masks = any(v[3] is not None for v in raw_views)
    mask_hits = None
    if have_masks and len(points_world):
        mask_hits = _mask_hit_counts(points_world,
                                     [(v[0], v[1], v[3]) for v in raw_views])
    transform = compute_norm_transform(points_world, mask_hits)

    views = [View(image=img, intrinsics=intr, pose=transform.apply_pose(pose),
                  coarse_mask=mask, name=name)
             for pose, intr, img, mask, name in raw_views]
    return SceneBundle(views=views, sparse_points=transform.apply(points_world),
                       norm_transform=transform)
