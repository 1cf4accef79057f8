"""The two neural scene fields and their shared machinery.

The foreground field models the object inside the unit sphere; the
background field models everything else inside a [-2,2]^3 box.  Each is
an SDF network (hash encoding + position -> signed distance + a geometry
feature vector) feeding an RGB network (position, normal, view
direction, sdf, features -> color, plus an alpha channel on the
foreground).  Normals come from a 6-point central-difference stencil of
the SDF, so only first-order differentiation is ever needed.

A single scalar beta parameterizes the sharpness b = exp(10*beta) that
converts SDF values into rendering opacities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from . import autodiff as ad
from .autodiff import Node, ParamStore, Tape
from .errors import DomainError
from .hashgrid import HashGrid, HashGridConfig, encode_node

FG_BOX = 1.0   # foreground domain: unit sphere's bounding box [-1,1]^3
BG_BOX = 2.0   # background domain: [-2,2]^3
FG_GEO_DIM = 12
BG_GEO_DIM = 7
HIDDEN = 64
SOFTPLUS_SHARPNESS = 100.0
BG_OVERRIDE_SDF = 1.0  # value forced inside the cropped foreground region
BETA_CAP = 0.7  # keeps b = exp(10*beta) <= ~1100; guards against runaway sharpening
# Scene normalization guarantees the object fits radius 0.9, so the
# foreground SDF is floored by the unit-slope ramp ||p|| - FG_GUARD_RADIUS.
# Without the floor the opacity ratio's translation invariance in the
# deep-negative regime lets the whole field drift below zero (no
# zero-level set, fog-like opacities, sharpness stuck low).
FG_GUARD_RADIUS = 0.96


@dataclass(frozen=True)
class FieldConfig:
    fg_grid: HashGridConfig = field(default_factory=HashGridConfig)
    bg_grid: HashGridConfig = field(default_factory=HashGridConfig)
    init_radius: float = 0.5
    # the background starts as a large inward blob: its interior covers the
    # box (minus corners), so occupancy sampling never starves the field
    # before it has carved out real surfaces
    bg_init_radius: float = 2.1
    beta_init: float = 0.3
    normal_eps: float = 1e-3
    seed: int = 0


@dataclass
class FieldOutput:
    """Everything a field reports at one query point."""
    sdf: float
    geo_feature: np.ndarray
    color: np.ndarray
    normal: np.ndarray
    alpha_head: float | None = None


def _fibonacci_directions(n: int) -> np.ndarray:
    """n quasi-uniform unit vectors (spherical Fibonacci lattice)."""
    i = np.arange(n) + 0.5
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


class FieldSet:
    """Parameter store + hash grids for both fields and the sharpness scalar."""

    def __init__(self, config: FieldConfig | None = None):
        self.config = config or FieldConfig()
        cfg = self.config
        self.params = ParamStore()
        rng = np.random.Generator(np.random.PCG64(cfg.seed))

        self.fg_grid = HashGrid(cfg.fg_grid, seed=cfg.seed)
        self.bg_grid = HashGrid(cfg.bg_grid, seed=cfg.seed + 1)
        self.params.add("fg.tables", self.fg_grid.tables)
        self.params.add("bg.tables", self.bg_grid.tables)

        self._init_sdf_mlp("fg", 3 + self.fg_grid.out_dim, FG_GEO_DIM, rng,
                           cfg.init_radius)
        self._init_sdf_mlp("bg", 3 + self.bg_grid.out_dim, BG_GEO_DIM, rng,
                           cfg.bg_init_radius)
        self._init_rgb_mlp("fg", 3 + 3 + 3 + 1 + FG_GEO_DIM, 4, rng)
        self._init_rgb_mlp("bg", 3 + 3 + 3 + 1 + BG_GEO_DIM, 3, rng)
        self.params.add("beta", np.asarray(cfg.beta_init, dtype=np.float64))

    def _init_sdf_mlp(self, prefix: str, in_dim: int, geo_dim: int, rng, r: float):
        """Geometric initialization: the zero-level set starts as a sphere.

        Hidden units come in +/- pairs of quasi-uniform directions u_j, so
        sum_j softplus(u_j . p) ~ 32 * E|u.p| * ... = 16 ||p||; with output
        weight 1/16 and bias -r the net evaluates to ~ ||p|| - r.  Hash
        features enter through near-zero columns and tiny tables, leaving
        the sphere intact at initialization.
        """
        dirs = _fibonacci_directions(HIDDEN // 2)
        w1 = rng.normal(0.0, 0.01, size=(in_dim, HIDDEN))
        w1[:3, 0::2] = dirs.T
        w1[:3, 1::2] = -dirs.T
        w1[3:, :] *= 0.1  # hash-feature columns start almost silent
        b1 = np.zeros(HIDDEN)
        w2 = rng.normal(0.0, 0.1 / np.sqrt(HIDDEN), size=(HIDDEN, 1 + geo_dim))
        w2[:, 0] = 1.0 / 16.0 + rng.normal(0.0, 1e-3, size=HIDDEN)
        b2 = np.zeros(1 + geo_dim)
        b2[0] = -r
        self.params.add(f"{prefix}.sdf.w1", w1)
        self.params.add(f"{prefix}.sdf.b1", b1)
        self.params.add(f"{prefix}.sdf.w2", w2)
        self.params.add(f"{prefix}.sdf.b2", b2)

    def _init_rgb_mlp(self, prefix: str, in_dim: int, out_dim: int, rng):
        shapes = [(in_dim, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, out_dim)]
        for i, (m, n) in enumerate(shapes, start=1):
            scale = np.sqrt(2.0 / m) if i < len(shapes) else 0.1
            self.params.add(f"{prefix}.rgb.w{i}", rng.normal(0.0, scale, size=(m, n)))
            self.params.add(f"{prefix}.rgb.b{i}", np.zeros(n))

    def grid(self, kind: str) -> HashGrid:
        return self.fg_grid if kind == "fg" else self.bg_grid

    def box_half(self, kind: str) -> float:
        return FG_BOX if kind == "fg" else BG_BOX

    def geo_dim(self, kind: str) -> int:
        return FG_GEO_DIM if kind == "fg" else BG_GEO_DIM

    def param_leaves(self, tape: Tape) -> dict[str, Node]:
        return {name: tape.leaf(arr, name) for name, arr in self.params.items()}

    def parameter_count(self) -> int:
        return self.params.total_size()


def sharpness(fields: FieldSet) -> float:
    """Current opacity sharpness b = exp(10 * beta) > 0."""
    return float(np.exp(10.0 * fields.params["beta"]))


def sharpness_node(tape: Tape, beta_leaf: Node) -> Node:
    return ad.exp(tape, ad.scale(tape, beta_leaf, 10.0))


def _check_box(pts: np.ndarray, half: float, tol: float = 1e-9):
    if np.abs(pts).max() > half + tol:
        bad = pts[np.any(np.abs(pts) > half + tol, axis=1)][0]
        raise DomainError(f"point {bad} outside the [-{half},{half}]^3 field domain")


def _stencil_points(pts: np.ndarray, eps: float, half: float) -> np.ndarray:
    """[main; +x; -x; +y; -y; +z; -z] offsets, clamped into the domain box."""
    n = pts.shape[0]
    out = np.empty((7 * n, 3))
    out[:n] = pts
    for axis in range(3):
        plus = pts.copy()
        plus[:, axis] += eps
        minus = pts.copy()
        minus[:, axis] -= eps
        out[(1 + 2 * axis) * n:(2 + 2 * axis) * n] = plus
        out[(2 + 2 * axis) * n:(3 + 2 * axis) * n] = minus
    np.clip(out, -half, half, out=out)
    return out


def sdf_with_features(tape: Tape, fields: FieldSet, kind: str, pts_all: np.ndarray,
                      leaves: dict[str, Node], n_main: int) -> tuple[Node, Node]:
    """SDF head on a stencil-expanded batch; features only for main rows."""
    grid = fields.grid(kind)
    half = fields.box_half(kind)
    p01 = (pts_all + half) / (2.0 * half)
    enc = encode_node(tape, grid, leaves[f"{kind}.tables"], p01)
    x = ad.concat_cols(tape, [tape.constant(pts_all), enc])
    h = ad.softplus(tape, ad.affine(tape, x, leaves[f"{kind}.sdf.w1"],
                                    leaves[f"{kind}.sdf.b1"]), SOFTPLUS_SHARPNESS)
    out = ad.affine(tape, h, leaves[f"{kind}.sdf.w2"], leaves[f"{kind}.sdf.b2"])
    sdf_all = ad.cols(tape, out, 0, 1)
    if kind == "fg":
        guard = np.linalg.norm(pts_all, axis=1, keepdims=True) - FG_GUARD_RADIUS
        sdf_all = ad.maximum_with(tape, sdf_all, guard)
    geo = ad.rows(tape, ad.cols(tape, out, 1, 1 + fields.geo_dim(kind)), 0, n_main)
    return sdf_all, geo


def field_forward(tape: Tape, fields: FieldSet, kind: str, pts: np.ndarray,
                  view_dirs: np.ndarray, leaves: dict[str, Node],
                  override_mask: np.ndarray | None = None,
                  detach_normal: bool = False) -> dict[str, Node]:
    """Full field evaluation on a batch of points.

    Returns nodes: sdf (N,1, post-override for bg), raw_sdf, normal (N,3),
    color (N,3), alpha_head (N,1, fg only).  `override_mask` marks points
    inside the cropped foreground region whose background SDF is forced
    to +1 so the background renders transparent there.  With
    `detach_normal` the stencil runs off-tape: the normal still feeds the
    color head but carries no gradient (used for the background, whose
    normals face no eikonal constraint).
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    eps = fields.config.normal_eps
    half = fields.box_half(kind)
    _check_box(pts, half)
    inv = 1.0 / (2.0 * eps)

    if detach_normal:
        stencil = _stencil_points(pts, eps, half)[n:]
        f = sdf_only(fields, kind, stencil, clamp=True)
        normal = tape.constant(np.stack(
            [(f[2 * a * n:(2 * a + 1) * n] - f[(2 * a + 1) * n:(2 * a + 2) * n]) * inv
             for a in range(3)], axis=1))
        sdf_all, geo = sdf_with_features(tape, fields, kind, pts, leaves, n)
        sdf = sdf_all
    else:
        pts_all = _stencil_points(pts, eps, half)
        sdf_all, geo = sdf_with_features(tape, fields, kind, pts_all, leaves, n)
        sdf = ad.rows(tape, sdf_all, 0, n)
        normal = ad.concat_cols(tape, [
            ad.scale(tape, ad.sub(tape, ad.rows(tape, sdf_all, (1 + 2 * a) * n, (2 + 2 * a) * n),
                                  ad.rows(tape, sdf_all, (2 + 2 * a) * n, (3 + 2 * a) * n)), inv)
            for a in range(3)])

    raw_sdf = sdf
    if kind == "bg" and override_mask is not None:
        sdf = ad.where_const(tape, override_mask[:, None], BG_OVERRIDE_SDF, sdf)

    rgb_in = ad.concat_cols(tape, [tape.constant(pts), normal,
                                   tape.constant(view_dirs), sdf, geo])
    h = rgb_in
    for i in (1, 2):
        h = ad.softplus(tape, ad.affine(tape, h, leaves[f"{kind}.rgb.w{i}"],
                                        leaves[f"{kind}.rgb.b{i}"]), SOFTPLUS_SHARPNESS)
    head = ad.sigmoid(tape, ad.affine(tape, h, leaves[f"{kind}.rgb.w3"],
                                      leaves[f"{kind}.rgb.b3"]))
    out = {"sdf": sdf, "raw_sdf": raw_sdf, "normal": normal, "geo": geo,
           "color": ad.cols(tape, head, 0, 3)}
    if kind == "fg":
        out["alpha_head"] = ad.cols(tape, head, 3, 4)
    return out


def sdf_only(fields: FieldSet, kind: str, pts: np.ndarray,
             clamp: bool = False) -> np.ndarray:
    """Plain-numpy SDF evaluation (no tape, no normals) for probing/meshing."""
    from .hashgrid import encode

    pts = np.asarray(pts, dtype=np.float64)
    half = fields.box_half(kind)
    if clamp:
        pts = np.clip(pts, -half, half)
    else:
        _check_box(pts, half)
    grid = fields.grid(kind)
    p01 = (np.clip(pts, -half, half) + half) / (2.0 * half)
    enc = encode(grid, p01)
    x = np.concatenate([pts, enc], axis=1)
    z = x @ fields.params[f"{kind}.sdf.w1"] + fields.params[f"{kind}.sdf.b1"]
    h, _ = _k.softplus_fwd(z, SOFTPLUS_SHARPNESS)
    out = h @ fields.params[f"{kind}.sdf.w2"] + fields.params[f"{kind}.sdf.b2"]
    sdf = out[:, 0]
    if kind == "fg":
        sdf = np.maximum(sdf, np.linalg.norm(pts, axis=1) - FG_GUARD_RADIUS)
    return sdf


def _eval_single(fields: FieldSet, kind: str, p, v, override: bool | None = None) -> FieldOutput:
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    v = np.asarray(v, dtype=np.float64).reshape(1, 3)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError("view direction must be unit norm")
    tape = Tape()
    leaves = fields.param_leaves(tape)
    mask = None if override is None else np.array([override])
    nodes = field_forward(tape, fields, kind, p, v, leaves, override_mask=mask)
    out = FieldOutput(
        sdf=float(nodes["sdf"].value[0, 0]),
        geo_feature=nodes["geo"].value[0].copy(),
        color=nodes["color"].value[0].copy(),
        normal=nodes["normal"].value[0].copy(),
    )
    if kind == "fg":
        out.alpha_head = float(nodes["alpha_head"].value[0, 0])
    return out


def focor_eval(fields: FieldSet, grid: HashGrid, p, v) -> FieldOutput:
    """Foreground field at point p viewed along unit direction v."""
    if grid is not fields.fg_grid:
        raise ValueError("grid does not belong to this field set")
    return _eval_single(fields, "fg", p, v)


def baco_eval(fields: FieldSet, grid: HashGrid, p, v, inside_fg_region: bool) -> FieldOutput:
    """Background field at p; inside the cropped foreground region the
    SDF is forced to +1.0 so the point renders transparent."""
    if grid is not fields.bg_grid:
        raise ValueError("grid does not belong to this field set")
    return _eval_single(fields, "bg", p, v, override=bool(inside_fg_region))
