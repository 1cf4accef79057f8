"""Synthetic test scenes with exact ground truth.

A textured primitive (sphere or box) floats above a finite textured
card; cameras sit on an arc of a ring, all looking at the primitive.
Everything is ray-cast analytically, so masks are exact per-pixel
intersection tests and the background-only images are the oracle for
background completion.  The card size, camera arc, and field of view
are chosen so every ground-truth background pixel stays inside the
background field's box and far cap; rays that miss both the primitive
and the card see a constant horizon color.

All generation is deterministic for a fixed descriptor + seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import pngio
from .errors import GeometryError
from .scene import (CameraIntrinsics, CameraPose, SceneBundle, View,
                    _mask_hit_counts, compute_norm_transform, write_colmap_text)


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic-scene descriptor (JSON keys match field names)."""
    primitive: str = "sphere"     # "sphere" | "box"
    radius: float = 0.5
    views: int = 12
    ring_radius: float = 3.0
    image_size: int = 128
    seed: int = 0
    # layout knobs with scene-scaled defaults; rarely overridden
    arc_deg: float = 140.0
    ring_height: float | None = None     # default ring_radius / 3
    fov_deg: float = 30.0
    card_extent: float | None = None     # default 1.3 * radius
    card_z: float | None = None          # default -1.6 * radius
    n_surface_points: int = 1500
    n_card_points: int = 1200

    def __post_init__(self):
        if self.primitive not in ("sphere", "box"):
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if self.views < 1:
            raise GeometryError("at least one view is required")
        if self.radius <= 0 or self.ring_radius <= 0:
            raise GeometryError("radius and ring_radius must be positive")

    @property
    def height(self) -> float:
        return self.ring_height if self.ring_height is not None else self.ring_radius / 3.0

    @property
    def card_half(self) -> float:
        return self.card_extent if self.card_extent is not None else 1.3 * self.radius

    @property
    def card_plane_z(self) -> float:
        return self.card_z if self.card_z is not None else -1.6 * self.radius

    @property
    def bounding_radius(self) -> float:
        return self.radius * (np.sqrt(3.0) if self.primitive == "box" else 1.0)

    @staticmethod
    def from_json(path) -> "SynthSpec":
        with open(path) as f:
            data = json.load(f)
        return SynthSpec(**data)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)


@dataclass
class SynthGroundTruth:
    masks: list[np.ndarray]          # exact binary masks, H x W {0,1}
    background: list[np.ndarray]     # card-only renders, H x W x 3
    horizon_color: np.ndarray


# ---------------------------------------------------------------------------
# textures (smooth, view-independent, easy for small MLPs to fit)


def primitive_albedo(pts: np.ndarray, radius: float) -> np.ndarray:
    u = pts / radius
    r = 0.62 + 0.30 * np.sin(3.0 * u[:, 0] + 0.5)
    g = 0.34 + 0.22 * np.sin(2.5 * u[:, 1] + 1.7)
    b = 0.28 + 0.18 * np.sin(2.2 * u[:, 2] + 3.1)
    return np.clip(np.stack([r, g, b], axis=1), 0.0, 1.0)


def card_texture(xy: np.ndarray, radius: float) -> np.ndarray:
    s = xy[:, 0] / radius
    t = xy[:, 1] / radius
    r = 0.24 + 0.14 * np.sin(1.3 * s + 0.3) + 0.08 * np.sin(2.7 * t)
    g = 0.46 + 0.20 * np.sin(1.1 * t + 1.2) + 0.07 * np.sin(2.3 * s + 0.8)
    b = 0.58 + 0.20 * np.sin(0.9 * (s + t) + 2.0)
    return np.clip(np.stack([r, g, b], axis=1), 0.0, 1.0)


def _horizon_color(spec: SynthSpec) -> np.ndarray:
    """Matches the per-channel median card color, so the loader's
    border-median horizon estimate lands on the true constant."""
    g = np.linspace(-spec.card_half, spec.card_half, 64)
    xx, yy = np.meshgrid(g, g)
    tex = card_texture(np.stack([xx.ravel(), yy.ravel()], axis=1), spec.radius)
    return np.median(tex, axis=0)


# ---------------------------------------------------------------------------
# analytic intersections (world frame)


def _hit_sphere(origins, dirs, radius):
    b = np.einsum("ij,ij->i", origins, dirs)
    c = np.einsum("ij,ij->i", origins, origins) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    t = -b - np.sqrt(np.maximum(disc, 0.0))
    hit &= t > 1e-9
    return np.where(hit, t, np.inf)


def _hit_box(origins, dirs, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (-half - origins) * inv
        tb = (half - origins) * inv
    lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb)).max(axis=1)
    hi = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb)).min(axis=1)
    hit = (hi > lo) & (hi > 1e-9)
    t = np.where(lo > 1e-9, lo, hi)
    return np.where(hit, t, np.inf)


def _hit_primitive(spec: SynthSpec, origins, dirs):
    if spec.primitive == "sphere":
        return _hit_sphere(origins, dirs, spec.radius)
    return _hit_box(origins, dirs, spec.radius)


def _hit_card(spec: SynthSpec, origins, dirs):
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (spec.card_plane_z - origins[:, 2]) / dz
    t = np.where(np.abs(dz) > 1e-12, t, np.inf)
    px = origins[:, 0] + t * dirs[:, 0]
    py = origins[:, 1] + t * dirs[:, 1]
    ok = (t > 1e-9) & (np.abs(px) <= spec.card_half) & (np.abs(py) <= spec.card_half)
    return np.where(ok, t, np.inf)


# ---------------------------------------------------------------------------
# cameras


def _look_at_pose(position: np.ndarray, target: np.ndarray) -> CameraPose:
    """COLMAP-convention pose (x right, y down, z forward) looking at target."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        raise GeometryError("camera looks straight along the up axis")
    x_c = np.cross(fwd, up)
    x_c /= np.linalg.norm(x_c)
    y_c = np.cross(fwd, x_c)
    rot = np.stack([x_c, y_c, fwd], axis=0)
    return CameraPose(rot, -rot @ position)


def _make_cameras(spec: SynthSpec) -> tuple[list[CameraPose], CameraIntrinsics]:
    w = spec.image_size
    f = w / (2.0 * np.tan(np.radians(spec.fov_deg) / 2.0))
    intr = CameraIntrinsics(f, f, w / 2.0, w / 2.0, w, w)
    dist = np.hypot(spec.ring_radius, spec.height)
    if dist <= spec.bounding_radius * 1.05:
        raise GeometryError(
            f"camera ring (distance {dist:.3f}) intersects the foreground "
            f"primitive (bounding radius {spec.bounding_radius:.3f})")
    half_arc = np.radians(spec.arc_deg) / 2.0
    center = np.pi / 2.0
    if spec.views == 1:
        angles = np.array([center])
    else:
        angles = center + np.linspace(-half_arc, half_arc, spec.views)
    poses = []
    for th in angles:
        pos = np.array([spec.ring_radius * np.cos(th),
                        spec.ring_radius * np.sin(th), spec.height])
        poses.append(_look_at_pose(pos, np.zeros(3)))
    return poses, intr


def _pixel_dirs_world(pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    xs = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    ys = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)], axis=1)
    d_world = d_cam @ pose.rotation
    return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# generation


def _render_view(spec, pose, intr, horizon, with_primitive=True):
    dirs = _pixel_dirs_world(pose, intr)
    origins = np.broadcast_to(pose.center, dirs.shape)
    t_card = _hit_card(spec, origins, dirs)
    t_prim = _hit_primitive(spec, origins, dirs) if with_primitive else np.full(len(dirs), np.inf)
    img = np.tile(horizon, (len(dirs), 1))
    card_vis = np.isfinite(t_card) & (t_card < t_prim)
    if card_vis.any():
        hits = origins[card_vis] + t_card[card_vis, None] * dirs[card_vis]
        img[card_vis] = card_texture(hits[:, :2], spec.radius)
    prim_vis = np.isfinite(t_prim) & (t_prim <= t_card)
    if prim_vis.any():
        hits = origins[prim_vis] + t_prim[prim_vis, None] * dirs[prim_vis]
        img[prim_vis] = primitive_albedo(hits, spec.radius)
    h, w = intr.height, intr.width
    return img.reshape(h, w, 3), prim_vis.reshape(h, w).astype(np.uint8)


def _surface_points(spec: SynthSpec, rng) -> np.ndarray:
    n = spec.n_surface_points
    if spec.primitive == "sphere":
        i = np.arange(n) + 0.5
        phi = np.pi * (3.0 - np.sqrt(5.0)) * i
        z = 1.0 - 2.0 * i / n
        r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
        pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1) * spec.radius
    else:
        pts = rng.uniform(-1.0, 1.0, size=(n, 3))
        axis = rng.integers(0, 3, size=n)
        sign = rng.choice([-1.0, 1.0], size=n)
        pts[np.arange(n), axis] = sign
        pts *= spec.radius
    return pts + rng.normal(0.0, 1e-4 * spec.radius, size=pts.shape)


def _card_points(spec: SynthSpec, rng) -> np.ndarray:
    """Feature points on the near strip of the card (never seen inside a
    coarse mask, so they cannot pollute the foreground fit)."""
    n = spec.n_card_points
    x = rng.uniform(-spec.card_half, spec.card_half, size=n)
    y = rng.uniform(0.45 * spec.card_half, spec.card_half, size=n)
    z = np.full(n, spec.card_plane_z)
    return np.stack([x, y, z], axis=1)


def generate(spec: SynthSpec) -> tuple[SceneBundle, SynthGroundTruth]:
    """Render the scene; returns the normalized bundle (coarse masks
    attached) plus exact ground truth."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    poses, intr = _make_cameras(spec)
    horizon = _horizon_color(spec)

    images, masks, backgrounds = [], [], []
    for pose in poses:
        img, mask = _render_view(spec, pose, intr, horizon)
        bg_img, _ = _render_view(spec, pose, intr, horizon, with_primitive=False)
        images.append(img)
        masks.append(mask)
        backgrounds.append(bg_img)

    pts_world = np.concatenate([_surface_points(spec, rng), _card_points(spec, rng)])
    raw = [(pose, intr, mask) for pose, mask in zip(poses, masks)]
    hits = _mask_hit_counts(pts_world, raw)
    # card points straying into a mask would corrupt the foreground fit
    card_part = np.zeros(len(pts_world), dtype=bool)
    card_part[spec.n_surface_points:] = True
    keep = ~(card_part & (hits > 0))
    pts_world = pts_world[keep]
    hits = hits[keep]

    transform = compute_norm_transform(pts_world, hits)
    views = [View(image=img, intrinsics=intr, pose=transform.apply_pose(pose),
                  coarse_mask=mask, name=f"view_{i:03d}.png")
             for i, (img, mask, pose) in enumerate(zip(images, masks, poses))]
    bundle = SceneBundle(views=views, sparse_points=transform.apply(pts_world),
                         norm_transform=transform)
    return bundle, SynthGroundTruth(masks=masks, background=backgrounds,
                                    horizon_color=horizon)


def synth_scene(spec: SynthSpec) -> tuple[SceneBundle, SynthGroundTruth]:
    """Alias with the pipeline-facing name."""
    return generate(spec)


# ---------------------------------------------------------------------------
# on-disk layout consumed by the CLI


def save_scene(out_dir, spec: SynthSpec, bundle: SceneBundle, gt: SynthGroundTruth):
    """Write a loadable scene directory: COLMAP text + images + masks + GT."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # poses/points go out in the original world frame
    inv = bundle.norm_transform
    cameras = {1: bundle.views[0].intrinsics}
    images = []
    world_poses = []
    for i, v in enumerate(bundle.views, start=1):
        rot = v.pose.rotation
        trans = v.pose.translation / inv.scale + rot @ inv.translation
        world_poses.append(CameraPose(rot.copy(), trans))
        images.append((i, world_poses[-1], 1, v.name))
    write_colmap_text(out_dir, cameras, images, inv.invert(bundle.sparse_points))
    for v, mask, bg in zip(bundle.views, gt.masks, gt.background):
        pngio.write_rgb(out_dir / "images" / v.name, v.image)
        pngio.write_gray(out_dir / "masks" / v.name, v.coarse_mask.astype(np.float64))
        pngio.write_gray(out_dir / "gt_masks" / v.name, mask.astype(np.float64))
        pngio.write_rgb(out_dir / "gt_background" / v.name, bg)


def load_scene_dir(scene_dir, with_masks: bool = True) -> SceneBundle:
    """Load a scene directory produced by save_scene (or hand-assembled
    in the same layout)."""
    from .scene import load_colmap

    scene_dir = Path(scene_dir)
    mask_dir = scene_dir / "masks"
    return load_colmap(scene_dir, scene_dir / "images",
                       mask_dir if with_masks and mask_dir.is_dir() else None)
