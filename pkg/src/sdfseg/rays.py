"""Rays and their marching segments through the two field domains.

All quantities live in the normalized scene frame: the foreground fits
the unit sphere, the background field fills the [-2,2]^3 box.  Each ray
carries two marching segments: the unit-sphere chord for the foreground
field (absent when the ray misses the sphere) and a box-clipped, capped
segment for the background field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import BG_BOX

T_EPS = 1e-4          # marching never starts exactly at the camera
BG_FAR_CLAMP = 8.0    # absolute cap on the background far bound


@dataclass
class Ray:
    """One camera ray with per-field marching bounds."""
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    fg_bounds: tuple[float, float] | None = None
    bg_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit norm, got {norm}")
        if not self.t_near < self.t_far:
            raise ValueError(f"need t_near < t_far, got [{self.t_near}, {self.t_far}]")


@dataclass
class RayBundle:
    """Vectorized rays for batched rendering."""
    origins: np.ndarray      # (m, 3)
    directions: np.ndarray   # (m, 3) unit
    fg_t0: np.ndarray        # (m,)
    fg_t1: np.ndarray
    fg_hit: np.ndarray       # (m,) bool
    bg_t0: np.ndarray
    bg_t1: np.ndarray
    bg_valid: np.ndarray     # (m,) bool

    def __len__(self):
        return self.origins.shape[0]


def unit_sphere_bounds(origins: np.ndarray, dirs: np.ndarray):
    """Entry/exit distances of rays against the unit sphere.

    Returns (t0, t1, hit); t0 is clamped to a small positive epsilon for
    origins inside the sphere, and rays whose exit lies behind the
    origin count as misses.
    """
    b = np.einsum("ij,ij->i", origins, dirs)
    c = np.einsum("ij,ij->i", origins, origins) - 1.0
    disc = b * b - c
    hit = disc > 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    hit &= t1 > T_EPS
    t0 = np.maximum(t0, T_EPS)
    return t0, t1, hit


def box_bounds(origins: np.ndarray, dirs: np.ndarray, half: float = BG_BOX):
    """Slab intersection with the centered axis-aligned box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (-half - origins) * inv
        tb = (half - origins) * inv
    lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb)).max(axis=1)
    hi = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb)).min(axis=1)
    valid = (hi > np.maximum(lo, T_EPS))
    return np.maximum(lo, T_EPS), hi, valid


def background_far_cap(origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Far bound: twice the distance to the unit-sphere far intersection
    (or to one unit past closest approach for misses), clamped to 8."""
    b = np.einsum("ij,ij->i", origins, dirs)
    c = np.einsum("ij,ij->i", origins, origins) - 1.0
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0.0))
    far = np.where(disc > 0.0, -b + sq, np.maximum(-b, 0.0) + 1.0)
    return np.minimum(2.0 * far, BG_FAR_CLAMP)


def make_bundle(origins: np.ndarray, dirs: np.ndarray) -> RayBundle:
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    fg_t0, fg_t1, fg_hit = unit_sphere_bounds(origins, dirs)
    bg_t0, bg_hi, bg_valid = box_bounds(origins, dirs)
    cap = background_far_cap(origins, dirs)
    bg_t1 = np.minimum(bg_hi, cap)
    bg_valid &= bg_t1 > bg_t0
    return RayBundle(origins, dirs, fg_t0, fg_t1, fg_hit, bg_t0, bg_t1, bg_valid)


def bundle_to_ray(bundle: RayBundle, i: int) -> Ray:
    """Materialize one bundle entry as a Ray object."""
    fg = (float(bundle.fg_t0[i]), float(bundle.fg_t1[i])) if bundle.fg_hit[i] else None
    bg = (float(bundle.bg_t0[i]), float(bundle.bg_t1[i])) if bundle.bg_valid[i] else None
    spans = ([bg] if bg else []) + ([fg] if fg else [])
    if spans:
        t_near = min(s[0] for s in spans)
        t_far = max(s[1] for s in spans)
    else:
        t_near, t_far = T_EPS, BG_FAR_CLAMP
    return Ray(bundle.origins[i].copy(), bundle.directions[i].copy(),
               t_near, t_far, fg_bounds=fg, bg_bounds=bg)
