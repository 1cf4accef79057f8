"""Post-training extraction: masks, decomposed images, surface mesh.

Per view, every pixel is rendered through the trained fields; the
foreground's accumulated weight is the soft segmentation value, the
background render (with the cropped-foreground override active) is the
completed background, and the compositing identity

    composite = foreground_premultiplied + (1 - alpha) * background

holds per pixel by construction.  The zero-level set of the foreground
SDF is meshed with marching cubes over the unit sphere's bounding box
and mapped back to world units.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure

from . import pngio
from .fields import FieldSet, sdf_only
from .renderer import OccupancyGrid, render_view
from .scene import NormTransform, SceneBundle
from .trainer import Checkpoint


@dataclass
class SegmentationOutput:
    pixel_alpha: np.ndarray       # H x W in [0,1]
    binary_mask: np.ndarray       # H x W {0,1}
    foreground_rgba: np.ndarray   # H x W x 4, premultiplied RGB + alpha
    background_rgb: np.ndarray    # H x W x 3, completed background
    composite_rgb: np.ndarray     # H x W x 3, full render (derived)
    depth: np.ndarray | None = None

    def save(self, out_dir, stem: str):
        out_dir = Path(out_dir)
        pngio.write_gray(out_dir / "masks" / f"{stem}.png", self.pixel_alpha)
        pngio.write_rgba(out_dir / "foreground" / f"{stem}.png", self.foreground_rgba)
        pngio.write_rgb(out_dir / "background" / f"{stem}.png", self.background_rgb)
        pngio.write_rgb(out_dir / "composite" / f"{stem}.png", self.composite_rgb)


@dataclass
class SurfaceMesh:
    vertices: np.ndarray   # (n, 3) world units
    faces: np.ndarray      # (m, 3) vertex indices

    def surface_area(self) -> float:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())

    def edge_face_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for tri in self.faces:
            for e in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(e), max(e))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        return all(c == 2 for c in self.edge_face_counts().values())

    def save_obj(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            f.write(f"# {len(self.vertices)} vertices, {len(self.faces)} faces\n")
            for v in self.vertices:
                f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for tri in self.faces:
                f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def threshold_mask(pixel_alpha: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary mask via >= comparison (alpha exactly at threshold counts in)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly inside (0, 1)")
    return (np.asarray(pixel_alpha) >= threshold).astype(np.uint8)


def _resolve(checkpoint, grids=None):
    if isinstance(checkpoint, Checkpoint):
        fields = checkpoint.fieldset()
        occ_fg, occ_bg = checkpoint.occupancy_grids()
        return fields, occ_fg, occ_bg, checkpoint.config
    fields = checkpoint
    occ_fg, occ_bg = grids if grids else (None, None)
    return fields, occ_fg, occ_bg, None


def segment_view(checkpoint, scene: SceneBundle, view_index: int, *,
                 threshold: float = 0.5, grids=None, n_fg: int | None = None,
                 n_bg: int | None = None, want_depth: bool = False,
                 use_occupancy: bool = True) -> SegmentationOutput:
    """Render one view into its segmentation products.

    `checkpoint` is a trained Checkpoint (or a FieldSet plus explicit
    `grids`).  The background image is the background-field render with
    the foreground region forced transparent, so occluded background
    comes from what the other views taught the field.
    """
    if not 0 <= view_index < len(scene.views):
        raise IndexError(f"view index {view_index} out of range "
                         f"(scene has {len(scene.views)} views)")
    fields, occ_fg, occ_bg, config = _resolve(checkpoint, grids)
    if not use_occupancy:
        occ_fg = occ_bg = None
    kw = {}
    if config is not None:
        kw = {"n_fg": config.n_fg, "n_bg": config.n_bg}
    if n_fg is not None:
        kw["n_fg"] = n_fg
    if n_bg is not None:
        kw["n_bg"] = n_bg
    out = render_view(fields, scene, view_index, occ_fg=occ_fg, occ_bg=occ_bg,
                      want_depth=want_depth, **kw)
    alpha = np.clip(out["alpha"], 0.0, 1.0)
    fg_rgba = np.concatenate([np.clip(out["fg_color"], 0.0, 1.0),
                              alpha[:, :, None]], axis=2)
    return SegmentationOutput(
        pixel_alpha=alpha,
        binary_mask=threshold_mask(alpha, threshold),
        foreground_rgba=fg_rgba,
        background_rgb=np.clip(out["bg_color"], 0.0, 1.0),
        composite_rgb=np.clip(out["color"], 0.0, 1.0),
        depth=out.get("depth"))


def extract_mesh(checkpoint, resolution: int = 256, *,
                 norm_transform: NormTransform | None = None,
                 chunk: int = 262144) -> SurfaceMesh:
    """March the foreground SDF's zero-level set over [-1,1]^3.

    Vertices come back in world units via the inverse scene transform
    (the one stored in the checkpoint unless overridden).
    """
    if resolution < 8:
        raise ValueError("mesh resolution must be at least 8")
    fields, _, _, _ = _resolve(checkpoint)
    if norm_transform is None and isinstance(checkpoint, Checkpoint) \
            and checkpoint.scene_transform is not None:
        st = checkpoint.scene_transform
        norm_transform = NormTransform(scale=st["scale"],
                                       translation=np.asarray(st["translation"]))
    g = resolution
    axis = np.linspace(-1.0, 1.0, g)
    spacing = axis[1] - axis[0]
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    sdf = np.empty(len(pts))
    for lo in range(0, len(pts), chunk):
        sdf[lo:lo + chunk] = sdf_only(fields, "fg", pts[lo:lo + chunk], clamp=True)
    volume = sdf.reshape(g, g, g)
    if volume.min() > 0.0 or volume.max() < 0.0:
        raise ValueError("no surface found: the SDF has no zero crossing "
                         "inside the unit box")
    verts, faces, _, _ = measure.marching_cubes(volume, level=0.0,
                                                spacing=(spacing,) * 3)
    verts = verts + np.array([-1.0, -1.0, -1.0])
    # drop degenerate slivers the lattice occasionally produces
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    faces = faces[area > 1e-12]
    if norm_transform is not None:
        verts = norm_transform.invert(verts)
    return SurfaceMesh(vertices=verts, faces=np.asarray(faces, dtype=np.int64))
