"""Unbiased SDF volume rendering.

Per ray: stratified samples on each field's segment, opacities from
consecutive SDF pairs through the logistic CDF ratio, exclusive-product
transmittance, and weighted color accumulation.  A pixel composites as

    C = C_fg + (1 - A) * C_bg

where A is the foreground's accumulated weight (the soft segmentation
value) and C_bg is the background's accumulated color normalized by its
own accumulated weight (the horizon constant where that weight
vanishes).  Occupancy grids skip empty space; inference renders may
additionally stop rays whose transmittance is exhausted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import _kernels as _k
from .autodiff import Node, Tape
from .fields import FieldSet, field_forward, sdf_only, sharpness_node
from .rays import RayBundle

ALPHA_LOG_CLIP = 50.0      # caps the log opacity ratio; e^50 >> any real ratio
TRANS_FLOOR = 1e-9         # 1 - alpha is clamped here for the cumprod
BG_WEIGHT_FLOOR = 1e-4     # below this the background pixel is horizon
EARLY_STOP_T = 1e-4        # inference: drop samples once transmittance dies


# ---------------------------------------------------------------------------
# opacity from SDF pairs


def alpha_from_sdf(f_i, f_next, b):
    """alpha = max(1 - Phi_b(f_next) / Phi_b(f_i), 0), Phi_b(x) = sigmoid(b x).

    Evaluated through log-space softplus so it stays finite for
    |b * x| well past 500.  Total function; works elementwise.
    """
    f_i = np.asarray(f_i, dtype=np.float64)
    f_next = np.asarray(f_next, dtype=np.float64)
    s_i = _softplus(-b * f_i)
    s_next = _softplus(-b * f_next)
    log_ratio = np.minimum(s_i - s_next, ALPHA_LOG_CLIP)
    return np.maximum(1.0 - np.exp(log_ratio), 0.0)


def _softplus(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > 30.0, z, np.log1p(np.exp(np.minimum(z, 30.0))))


def _alpha_pairs_node(tape: Tape, sdf: Node, next_idx: np.ndarray, b: Node) -> Node:
    """Tape version over consecutive sample pairs (last-in-segment pairs
    with itself, yielding alpha = 0 there)."""
    z = ad.neg(tape, ad.mul(tape, sdf, b))
    s = ad.softplus(tape, z)
    s_next = ad.gather_rows(tape, s, next_idx)
    log_ratio = ad.minimum_const(tape, ad.sub(tape, s, s_next), ALPHA_LOG_CLIP)
    return ad.maximum_const(
        tape, ad.add_const(tape, ad.neg(tape, ad.exp(tape, log_ratio)), 1.0), 0.0)


# ---------------------------------------------------------------------------
# sample bookkeeping


@dataclass
class RaySamples:
    """Per-ray quadrature samples and their rendering weights."""
    t: np.ndarray            # (n,) strictly increasing
    positions: np.ndarray    # (n, 3)
    sdf: np.ndarray          # (n,)
    alpha: np.ndarray        # (n,) in [0, 1]
    transmittance: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_sdf(cls, t, positions, sdf, b) -> "RaySamples":
        t = np.asarray(t, dtype=np.float64)
        if t.size and np.any(np.diff(t) <= 0):
            raise ValueError("sample distances must be strictly increasing")
        sdf = np.asarray(sdf, dtype=np.float64)
        f_next = np.append(sdf[1:], sdf[-1:]) if sdf.size else sdf
        alpha = alpha_from_sdf(sdf, f_next, b)
        trans = np.cumprod(np.concatenate([[1.0], 1.0 - alpha[:-1]])) if sdf.size else alpha
        return cls(t, np.asarray(positions), sdf, alpha, trans, trans * alpha)

    def validate(self, tol: float = 1e-9):
        assert self.t.size == 0 or np.all(np.diff(self.t) > 0)
        expect = np.cumprod(np.concatenate([[1.0], 1.0 - self.alpha[:-1]]))
        assert np.abs(self.transmittance - expect).max() <= tol
        assert self.weights.sum() <= 1.0 + 1e-6


def accumulate(samples: RaySamples, colors: np.ndarray):
    """Quadrature sums: (sum_i T_i a_i c_i, sum_i T_i a_i)."""
    w = samples.weights[:, None]
    return (w * np.asarray(colors, dtype=np.float64)).sum(axis=0), float(samples.weights.sum())


@dataclass
class PixelRender:
    color: np.ndarray        # composited, [0,1]^3
    pixel_alpha: float       # foreground accumulated weight
    fg_color: np.ndarray     # premultiplied foreground contribution
    bg_color: np.ndarray     # weight-normalized background color
    outside_domains: bool = False


# ---------------------------------------------------------------------------
# occupancy acceleration


class OccupancyGrid:
    """Boolean voxel cache over one field's domain box.

    Densities track a decaying maximum of a per-voxel opacity proxy (the
    alpha of a hypothetical surface crossing one voxel diagonal at the
    current sharpness).  A voxel is kept when its density clears the
    threshold or its center SDF magnitude is under twice the voxel
    diagonal, so freshly moving surfaces are never starved of samples.
    Before the first update every voxel counts as occupied.
    """

    def __init__(self, kind: str, half: float, resolution: int = 128,
                 decay: float = 0.95, threshold: float = 0.01):
        self.kind = kind
        self.half = float(half)
        self.resolution = int(resolution)
        self.decay = decay
        self.threshold = threshold
        g = self.resolution
        self.densities = np.zeros((g, g, g))
        self.flags = np.ones((g, g, g), dtype=bool)
        self._updated = False
        axis = (np.arange(g) + 0.5) / g * (2 * self.half) - self.half
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        self._centers = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    @property
    def voxel_diagonal(self) -> float:
        return float(np.sqrt(3.0) * 2.0 * self.half / self.resolution)

    def occupied_fraction(self) -> float:
        return float(self.flags.mean())

    def filter(self, pts: np.ndarray) -> np.ndarray:
        """True for points in voxels worth sampling."""
        g = self.resolution
        idx = np.floor((pts + self.half) / (2 * self.half) * g).astype(np.int64)
        np.clip(idx, 0, g - 1, out=idx)
        return self.flags[idx[:, 0], idx[:, 1], idx[:, 2]]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"densities": self.densities, "flags": self.flags}


def occupancy_update(grid: OccupancyGrid, fields: FieldSet, step: int,
                     chunk: int = 65536) -> OccupancyGrid:
    """Refresh densities/flags from the current field (call every U steps)."""
    from .fields import sharpness

    b = sharpness(fields)
    g = grid.resolution
    centers = grid._centers
    f = np.empty(len(centers))
    for lo in range(0, len(centers), chunk):
        f[lo:lo + chunk] = sdf_only(fields, grid.kind, centers[lo:lo + chunk], clamp=True)
    if grid.kind == "bg":
        # the cropped-foreground override empties the unit sphere for the
        # background field regardless of view, so probe the post-override SDF
        inside = np.linalg.norm(centers, axis=1) < 1.0
        f = np.where(inside, 1.0, f)
    s = grid.voxel_diagonal
    fresh = alpha_from_sdf(f + 0.5 * s, f - 0.5 * s, b).reshape(g, g, g)
    np.maximum(grid.decay * grid.densities, fresh, out=grid.densities)
    protect = (np.abs(f) < 2.0 * s).reshape(g, g, g)
    grid.flags = (grid.densities > grid.threshold) | protect
    grid._updated = True
    return grid


# ---------------------------------------------------------------------------
# batched rendering


@dataclass
class RenderResult:
    """Tape nodes (training graph) plus aux arrays for one ray batch."""
    color: Node              # (m, 3) composited pixel colors
    alpha: Node              # (m, 1) foreground pixel alpha
    fg_color: Node           # (m, 3) premultiplied foreground
    bg_color: Node           # (m, 3) normalized background
    fg_sdf: Node | None      # (N, 1) raw SDF at surviving fg samples
    fg_normals: Node | None  # (N, 3)
    fg_ray_ids: np.ndarray = field(default=None)
    fg_t: np.ndarray = field(default=None)
    fg_weights: Node | None = None


def _stratified(t0: np.ndarray, t1: np.ndarray, n: int, rng) -> np.ndarray:
    m = t0.shape[0]
    if rng is None:
        u = 0.5
    else:
        u = rng.random((m, n))
    return t0[:, None] + (np.arange(n) + u) / n * (t1 - t0)[:, None]


def _segment_starts(ray_ids: np.ndarray) -> np.ndarray:
    if ray_ids.size == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(np.concatenate([[True], ray_ids[1:] != ray_ids[:-1]]))


def _next_indices(starts: np.ndarray, n: int) -> np.ndarray:
    nxt = np.arange(1, n + 1, dtype=np.int64)
    ends = np.concatenate([starts[1:], [n]]) - 1
    nxt[ends] = ends
    return nxt


def _early_stop_keep(fields: FieldSet, kind: str, pts, ray_ids, b, starts,
                     override=None) -> np.ndarray:
    """Cheap SDF probe; drops samples whose transmittance is exhausted."""
    f = sdf_only(fields, kind, pts, clamp=True)
    if override is not None:
        f = np.where(override, 1.0, f)
    nxt = _next_indices(starts, len(f))
    alpha = alpha_from_sdf(f, f[nxt], b)
    trans = _k.excl_cumprod_fwd(np.maximum(1.0 - alpha, TRANS_FLOOR), starts)
    return trans >= EARLY_STOP_T


def _march_field(tape, fields, leaves, kind, bundle, valid, t0, t1, n_samples,
                 rng, occ, b_node, fg_region_fn, counters, early_stop):
    """Sample + evaluate one field along its ray segments.

    Returns (per-ray nodes dict, per-sample nodes dict, aux arrays);
    per-ray tensors are indexed by the local valid-ray order.
    """
    m = len(bundle)
    idx_rays = np.flatnonzero(valid)
    out_empty = dict(acc_color=None, acc_weight=None)
    if idx_rays.size == 0:
        return out_empty, {}, {}
    ts = _stratified(t0[idx_rays], t1[idx_rays], n_samples, rng)
    pts = (bundle.origins[idx_rays, None, :]
           + ts[:, :, None] * bundle.directions[idx_rays, None, :])
    dirs = np.repeat(bundle.directions[idx_rays], n_samples, axis=0)
    local_ids = np.repeat(np.arange(idx_rays.size), n_samples)
    pts = pts.reshape(-1, 3)
    ts = ts.reshape(-1)

    half = fields.box_half(kind)
    keep = np.all(np.abs(pts) <= half, axis=1)
    if occ is not None:
        keep &= occ.filter(np.clip(pts, -half, half))
    pts, ts, dirs, local_ids = pts[keep], ts[keep], dirs[keep], local_ids[keep]

    override = None
    if kind == "bg" and pts.size:
        override = np.linalg.norm(pts, axis=1) < 1.0
        if fg_region_fn is not None:
            override &= fg_region_fn(pts)

    b_value = float(b_node.value)
    if early_stop and pts.size:
        if counters is not None:
            counters[f"{kind}_sdf_positions"] = counters.get(f"{kind}_sdf_positions", 0) + len(pts)
        starts = _segment_starts(local_ids)
        keep2 = _early_stop_keep(fields, kind, pts, local_ids, b_value, starts, override)
        pts, ts, dirs, local_ids = pts[keep2], ts[keep2], dirs[keep2], local_ids[keep2]
        if override is not None:
            override = override[keep2]

    n = len(pts)
    if n == 0:
        return out_empty, {}, {}
    if counters is not None:
        counters[f"{kind}_sdf_positions"] = counters.get(f"{kind}_sdf_positions", 0) + 7 * n

    pts = np.clip(pts, -half, half)
    # background normals feed the color head but face no eikonal term,
    # so their stencil runs off-tape (6 cheap SDF probes, no backward)
    nodes = field_forward(tape, fields, kind, pts, dirs, leaves,
                          override_mask=override, detach_normal=(kind == "bg"))
    starts = _segment_starts(local_ids)
    nxt = _next_indices(starts, n)
    alpha = _alpha_pairs_node(tape, nodes["sdf"], nxt, b_node)
    one_minus = ad.maximum_const(
        tape, ad.add_const(tape, ad.neg(tape, alpha), 1.0), TRANS_FLOOR)
    trans = ad.segment_excl_cumprod(tape, one_minus, starts)
    weights = ad.mul(tape, trans, alpha)
    acc_weight = ad.segment_sum(tape, weights, local_ids, idx_rays.size)
    acc_color = ad.segment_sum(tape, ad.mul(tape, weights, nodes["color"]),
                               local_ids, idx_rays.size)
    per_ray = dict(acc_color=acc_color, acc_weight=acc_weight, idx_rays=idx_rays)
    per_sample = dict(sdf=nodes["raw_sdf"], normal=nodes["normal"], weights=weights)
    aux = dict(ray_ids=idx_rays[local_ids], t=ts, starts=starts)
    return per_ray, per_sample, aux


def render_rays(tape: Tape, fields: FieldSet, leaves: dict[str, Node],
                bundle: RayBundle, *, n_fg: int = 128, n_bg: int = 64,
                rng=None, occ_fg: OccupancyGrid | None = None,
                occ_bg: OccupancyGrid | None = None,
                horizon_color: np.ndarray = None,
                fg_region_fn=None, early_stop: bool = False,
                counters: dict | None = None) -> RenderResult:
    """Render a ray bundle on the tape (differentiable end to end).

    `fg_region_fn` narrows the background's cropped-foreground region to
    points projecting into the current view's dilated coarse mask; the
    unit-sphere test always applies.
    """
    m = len(bundle)
    horizon = np.zeros(3) if horizon_color is None else np.asarray(horizon_color)
    b_node = sharpness_node(tape, leaves["beta"])

    fg_valid = bundle.fg_hit & (bundle.fg_t1 > bundle.fg_t0)
    fg_ray, fg_sample, fg_aux = _march_field(
        tape, fields, leaves, "fg", bundle, fg_valid, bundle.fg_t0, bundle.fg_t1,
        n_fg, rng, occ_fg, b_node, None, counters, early_stop)
    bg_valid = bundle.bg_valid & (bundle.bg_t1 > bundle.bg_t0)
    bg_ray, bg_sample, bg_aux = _march_field(
        tape, fields, leaves, "bg", bundle, bg_valid, bundle.bg_t0, bundle.bg_t1,
        n_bg, rng, occ_bg, b_node, fg_region_fn, counters, early_stop)

    if fg_ray["acc_weight"] is not None:
        alpha = ad.scatter_rows(tape, fg_ray["acc_weight"], fg_ray["idx_rays"], m)
        fg_color = ad.scatter_rows(tape, fg_ray["acc_color"], fg_ray["idx_rays"], m)
    else:
        alpha = tape.constant(np.zeros((m, 1)))
        fg_color = tape.constant(np.zeros((m, 3)))

    if bg_ray["acc_weight"] is not None:
        w_bg = ad.scatter_rows(tape, bg_ray["acc_weight"], bg_ray["idx_rays"], m)
        c_bg_raw = ad.scatter_rows(tape, bg_ray["acc_color"], bg_ray["idx_rays"], m)
        denom = ad.maximum_const(tape, w_bg, BG_WEIGHT_FLOOR)
        normalized = ad.div(tape, c_bg_raw, denom)
        low = w_bg.value < BG_WEIGHT_FLOOR
        bg_color = ad.where_const(tape, low, horizon, normalized)
    else:
        bg_color = tape.constant(np.tile(horizon, (m, 1)))

    one_minus_a = ad.add_const(tape, ad.neg(tape, alpha), 1.0)
    color = ad.add(tape, fg_color, ad.mul(tape, one_minus_a, bg_color))
    return RenderResult(
        color=color, alpha=alpha, fg_color=fg_color, bg_color=bg_color,
        fg_sdf=fg_sample.get("sdf"), fg_normals=fg_sample.get("normal"),
        fg_ray_ids=fg_aux.get("ray_ids"), fg_t=fg_aux.get("t"),
        fg_weights=fg_sample.get("weights"))


def render_pixel(fields: FieldSet, grids, ray, view_ctx=None, *,
                 n_fg: int = 128, n_bg: int = 64,
                 horizon_color=None) -> PixelRender:
    """Render a single ray (deterministic midpoint sampling).

    `grids` may be None or a (fg_occupancy, bg_occupancy) pair;
    `view_ctx`, when given, is a callable narrowing the background's
    cropped-foreground region (see render_rays).
    """
    from .rays import make_bundle

    occ_fg, occ_bg = grids if grids is not None else (None, None)
    bundle = make_bundle(ray.origin[None, :], ray.direction[None, :])
    tape = Tape()
    leaves = fields.param_leaves(tape)
    res = render_rays(tape, fields, leaves, bundle, n_fg=n_fg, n_bg=n_bg,
                      occ_fg=occ_fg, occ_bg=occ_bg, horizon_color=horizon_color,
                      fg_region_fn=view_ctx)
    outside = not (bundle.fg_hit[0] or bundle.bg_valid[0])
    return PixelRender(color=res.color.value[0].copy(),
                       pixel_alpha=float(res.alpha.value[0, 0]),
                       fg_color=res.fg_color.value[0].copy(),
                       bg_color=res.bg_color.value[0].copy(),
                       outside_domains=bool(outside))


def argmax_weight_depth(res: RenderResult, m: int) -> np.ndarray:
    """Per-ray t of the largest foreground rendering weight (NaN when a
    ray carries no foreground samples)."""
    depth = np.full(m, np.nan)
    if res.fg_weights is None:
        return depth
    w = res.fg_weights.value[:, 0]
    best = np.full(m, -1.0)
    for i, r in enumerate(res.fg_ray_ids):
        if w[i] > best[r]:
            best[r] = w[i]
            depth[r] = res.fg_t[i]
    return depth


def render_view(fields: FieldSet, scene, view_index: int, *,
                n_fg: int = 128, n_bg: int = 64,
                occ_fg: OccupancyGrid | None = None,
                occ_bg: OccupancyGrid | None = None,
                early_stop: bool = True, chunk: int = 1024,
                counters: dict | None = None,
                want_depth: bool = False) -> dict[str, np.ndarray]:
    """Full-frame inference render of one view (chunked, no gradients)."""
    view = scene.views[view_index]
    h, w = view.intrinsics.height, view.intrinsics.width
    px, py = np.meshgrid(np.arange(w), np.arange(h))
    px, py = px.ravel(), py.ravel()
    fg_region_fn = _view_mask_fn(scene, view_index)

    out = {"color": np.zeros((h * w, 3)), "alpha": np.zeros(h * w),
           "fg_color": np.zeros((h * w, 3)), "bg_color": np.zeros((h * w, 3))}
    depth = np.full(h * w, np.nan)
    for lo in range(0, h * w, chunk):
        sel = slice(lo, min(lo + chunk, h * w))
        bundle = scene.view_rays(view_index, px[sel], py[sel])
        tape = Tape()
        leaves = fields.param_leaves(tape)
        res = render_rays(tape, fields, leaves, bundle, n_fg=n_fg, n_bg=n_bg,
                          occ_fg=occ_fg, occ_bg=occ_bg,
                          horizon_color=scene.horizon_color,
                          fg_region_fn=fg_region_fn, early_stop=early_stop,
                          counters=counters)
        out["color"][sel] = res.color.value
        out["alpha"][sel] = res.alpha.value[:, 0]
        out["fg_color"][sel] = res.fg_color.value
        out["bg_color"][sel] = res.bg_color.value
        if want_depth:
            depth[sel] = argmax_weight_depth(res, len(bundle))
    result = {k: v.reshape(h, w, -1).squeeze() for k, v in out.items()}
    if want_depth:
        result["depth"] = depth.reshape(h, w)
    return result


def _view_mask_fn(scene, view_index: int):
    """Cropped-foreground predicate bound to one view's dilated mask."""
    view = scene.views[view_index]
    dilated = view.dilated_mask()
    if dilated is None:
        return None

    def fn(pts: np.ndarray) -> np.ndarray:
        px, py, ok = scene.project(view_index, pts)
        ix = np.floor(px).astype(np.int64)
        iy = np.floor(py).astype(np.int64)
        h, w = dilated.shape
        inside = ok & (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        res = np.zeros(len(pts), dtype=bool)
        idx = np.flatnonzero(inside)
        res[idx] = dilated[iy[idx], ix[idx]]
        return res

    return fn
