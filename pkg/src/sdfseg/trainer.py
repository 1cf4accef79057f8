"""End-to-end optimization: batch sampling, rendering, losses, Adam.

Each iteration samples one view, draws a pixel batch, renders both
fields along the rays, assembles the joint loss, back-propagates, and
applies a bias-corrected Adam step (with linear learning-rate warmup
and a global gradient-norm clip).  Occupancy grids refresh on a fixed
period.  Checkpoints are a JSON header followed by little-endian
float32 blobs and round-trip bit-exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import AdamState, ParamStore, Tape, adam_step, clip_global_norm
from .errors import NonFiniteLossError
from .fields import BETA_CAP, BG_BOX, FG_BOX, FieldConfig, FieldSet, sharpness
from .hashgrid import HashGridConfig
from .losses import (LossWeights, RayBatch, color_loss_node, eikonal_loss_node,
                     mask_loss_node, sparsity_loss_node, total_loss_node)
from .renderer import OccupancyGrid, occupancy_update, render_rays, _view_mask_fn
from .scene import SceneBundle
from .threading_utils import set_threads

CHECKPOINT_VERSION = 1
MASK_PHASE_FRACTION = 0.2   # of total iterations, when not set explicitly


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 40000
    batch_rays: int = 1024
    lr: float = 0.01
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mask_phase_end: int | None = None    # default: 20% of iterations
    use_masks: bool = True
    n_fg: int = 128
    n_bg: int = 64
    grid_levels: int = 16
    grid_features: int = 2
    grid_table_size: int = 2 ** 19
    grid_n_min: int = 16
    grid_n_max: int = 2048
    occupancy_period: int = 16
    occupancy_resolution: int = 128
    occupancy_decay: float = 0.95
    warmup_steps: int = 500
    grad_clip: float = 10.0
    checkpoint_every: int = 0            # 0 disables periodic checkpoints
    log_every: int = 100
    threads: int = 0                     # 0 keeps library defaults

    def __post_init__(self):
        if self.iterations < 1 or self.batch_rays < 1:
            raise ValueError("iterations and batch_rays must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def resolved(self) -> "TrainConfig":
        """Fill derived defaults (the mask phase length)."""
        if self.mask_phase_end is not None:
            return self
        return replace(self, mask_phase_end=int(round(MASK_PHASE_FRACTION * self.iterations)))

    def field_config(self) -> FieldConfig:
        grid = HashGridConfig(levels=self.grid_levels,
                              features_per_level=self.grid_features,
                              table_size=self.grid_table_size,
                              n_min=self.grid_n_min, n_max=self.grid_n_max)
        return FieldConfig(fg_grid=grid, bg_grid=grid, seed=self.seed)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        data = dict(data)
        if isinstance(data.get("weights"), dict):
            data["weights"] = LossWeights(**data["weights"])
        return TrainConfig(**data)

    @staticmethod
    def from_json(path) -> "TrainConfig":
        with open(path) as f:
            return TrainConfig.from_dict(json.load(f))


@dataclass
class HistoryRow:
    step: int
    color: float
    eikonal: float
    sparsity: float
    mask: float      # NaN while inactive
    b: float


@dataclass
class Checkpoint:
    version: int
    config: TrainConfig
    params: ParamStore
    iteration: int
    rng_state: dict
    occupancy: dict[str, np.ndarray]
    scene_transform: dict | None = None   # {"scale", "translation"} of the scene

    def fieldset(self) -> FieldSet:
        fields = FieldSet(self.config.field_config())
        for name, arr in self.params.items():
            fields.params[name][...] = arr
        return fields

    def occupancy_grids(self) -> tuple[OccupancyGrid, OccupancyGrid]:
        grids = []
        for kind, half in (("fg", FG_BOX), ("bg", BG_BOX)):
            dens = self.occupancy[f"{kind}.densities"]
            grid = OccupancyGrid(kind, half=half, resolution=dens.shape[0])
            grid.densities[...] = dens
            grid.flags = self.occupancy[f"{kind}.flags"] > 0.5
            grid._updated = True
            grids.append(grid)
        return grids[0], grids[1]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[HistoryRow]
    fields: FieldSet
    occ_fg: OccupancyGrid
    occ_bg: OccupancyGrid
    stopped_at: int


@dataclass
class TrainerState:
    """What a step callback sees."""
    step: int
    fields: FieldSet
    occ_fg: OccupancyGrid
    occ_bg: OccupancyGrid
    history: list[HistoryRow]


# ---------------------------------------------------------------------------
# batch sampling


def sample_batch(scene: SceneBundle, rng, m: int, *, view_index: int | None = None,
                 without_replacement: bool = False, use_masks: bool = True) -> RayBatch:
    """One view chosen uniformly, then m pixels uniformly within it."""
    if view_index is None:
        view_index = int(rng.integers(0, len(scene.views)))
    view = scene.views[view_index]
    h, w = view.intrinsics.height, view.intrinsics.width
    if without_replacement:
        flat = rng.permutation(h * w)[:m]
    else:
        flat = rng.integers(0, h * w, size=m)
    py, px = np.divmod(flat, w)
    bundle = scene.view_rays(view_index, px, py)
    mask_values = None
    if use_masks and view.coarse_mask is not None:
        mask_values = view.coarse_mask[py, px].astype(np.float64)
    return RayBatch(colors=view.image[py, px], pixels=np.stack([px, py], axis=1),
                    view_index=view_index, mask_values=mask_values, bundle=bundle)


# ---------------------------------------------------------------------------
# training loop


def _loss_parts(tape, res, batch, weights, step):
    parts = {}
    parts["color"] = color_loss_node(tape, res.color, batch.colors)
    if res.fg_normals is not None:
        parts["eikonal"] = eikonal_loss_node(tape, res.fg_normals)
        parts["sparsity"] = sparsity_loss_node(tape, res.fg_sdf, weights.tau)
    else:
        parts["eikonal"] = tape.constant(np.zeros(()))
        parts["sparsity"] = tape.constant(np.zeros(()))
    if batch.mask_values is not None and step < weights.mask_phase_end:
        parts["mask"] = mask_loss_node(tape, res.alpha, batch.mask_values)
    return parts


def train(scene: SceneBundle, config: TrainConfig, *, callback=None,
          checkpoint_path=None, history_path=None) -> TrainResult:
    """Run the optimization loop; non-finite losses abort with diagnostics."""
    config = config.resolved()
    set_threads(config.threads)
    weights = replace(config.weights, mask_phase_end=config.mask_phase_end)
    fields = FieldSet(config.field_config())
    occ_fg = OccupancyGrid("fg", half=FG_BOX, resolution=config.occupancy_resolution,
                           decay=config.occupancy_decay)
    occ_bg = OccupancyGrid("bg", half=BG_BOX, resolution=config.occupancy_resolution,
                           decay=config.occupancy_decay)
    adam = AdamState(fields.params)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    history: list[HistoryRow] = []
    stopped_at = config.iterations

    for step in range(1, config.iterations + 1):
        batch = sample_batch(scene, rng, config.batch_rays, use_masks=config.use_masks)
        tape = Tape()
        leaves = fields.param_leaves(tape)
        fg_region_fn = _view_mask_fn(scene, batch.view_index) if config.use_masks else None
        res = render_rays(tape, fields, leaves, batch.bundle,
                          n_fg=config.n_fg, n_bg=config.n_bg, rng=rng,
                          occ_fg=occ_fg, occ_bg=occ_bg,
                          horizon_color=scene.horizon_color,
                          fg_region_fn=fg_region_fn)
        parts = _loss_parts(tape, res, batch, weights, step)
        for name, node in parts.items():
            if not np.isfinite(node.value):
                raise NonFiniteLossError(
                    f"non-finite loss at iteration {step}: term {name!r}")
        total = total_loss_node(tape, parts, weights, step)
        grads = tape.backward(total, fields.params)
        clip_global_norm(grads, config.grad_clip)
        lr = config.lr * min(1.0, step / max(1, config.warmup_steps))
        adam_step(fields.params, grads, adam, lr=lr, t=step)
        beta = fields.params["beta"]
        if beta > BETA_CAP:
            beta[...] = BETA_CAP

        if step % config.occupancy_period == 0:
            occupancy_update(occ_fg, fields, step)
            occupancy_update(occ_bg, fields, step)

        if step == 1 or step % config.log_every == 0 or step == config.iterations:
            mask_val = float(parts["mask"].value) if "mask" in parts else float("nan")
            history.append(HistoryRow(step=step, color=float(parts["color"].value),
                                      eikonal=float(parts["eikonal"].value),
                                      sparsity=float(parts["sparsity"].value),
                                      mask=mask_val, b=sharpness(fields)))
        if checkpoint_path and config.checkpoint_every \
                and step % config.checkpoint_every == 0 and step < config.iterations:
            ckpt = _make_checkpoint(config, fields, step, rng, occ_fg, occ_bg, scene)
            save_checkpoint(checkpoint_path, ckpt)
        if callback is not None:
            if callback(TrainerState(step, fields, occ_fg, occ_bg, history)):
                stopped_at = step
                break

    ckpt = _make_checkpoint(config, fields, stopped_at, rng, occ_fg, occ_bg, scene)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, ckpt)
    if history_path:
        save_history_csv(history_path, history)
    return TrainResult(checkpoint=ckpt, history=history, fields=fields,
                       occ_fg=occ_fg, occ_bg=occ_bg, stopped_at=stopped_at)


def _make_checkpoint(config, fields, iteration, rng, occ_fg, occ_bg,
                     scene=None) -> Checkpoint:
    params = ParamStore()
    for name, arr in fields.params.items():
        params.add(name, arr.copy())
    occupancy = {
        "fg.densities": occ_fg.densities.copy(),
        "fg.flags": occ_fg.flags.astype(np.float64),
        "bg.densities": occ_bg.densities.copy(),
        "bg.flags": occ_bg.flags.astype(np.float64),
    }
    transform = None
    if scene is not None:
        transform = {"scale": float(scene.norm_transform.scale),
                     "translation": [float(x) for x in scene.norm_transform.translation]}
    return Checkpoint(version=CHECKPOINT_VERSION, config=config, params=params,
                      iteration=iteration, rng_state=rng.bit_generator.state,
                      occupancy=occupancy, scene_transform=transform)


# ---------------------------------------------------------------------------
# checkpoint serialization: JSON header line + float32 blobs


def save_checkpoint(path, ckpt: Checkpoint):
    tensors = [{"name": n, "shape": list(a.shape)} for n, a in ckpt.params.items()]
    occ = [{"name": n, "shape": list(a.shape)} for n, a in sorted(ckpt.occupancy.items())]
    header = {
        "format_version": ckpt.version,
        "config": asdict(ckpt.config),
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "tensors": tensors,
        "occupancy": occ,
        "scene_transform": ckpt.scene_transform,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for name, arr in ckpt.params.items():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for name in sorted(ckpt.occupancy):
            f.write(np.ascontiguousarray(ckpt.occupancy[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version "
                             f"{header.get('format_version')!r}")
        config = TrainConfig.from_dict(header["config"])
        params = ParamStore()
        for meta in header["tensors"]:
            shape = tuple(meta["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * n)
            arr = np.frombuffer(buf, dtype="<f4", count=n).astype(np.float64)
            params.add(meta["name"], arr.reshape(shape))
        occupancy = {}
        for meta in header["occupancy"]:
            shape = tuple(meta["shape"])
            n = int(np.prod(shape))
            buf = f.read(4 * n)
            occupancy[meta["name"]] = np.frombuffer(buf, dtype="<f4",
                                                    count=n).astype(np.float64).reshape(shape)
    state = header["rng_state"]
    return Checkpoint(version=header["format_version"], config=config, params=params,
                      iteration=header["iteration"], rng_state=state,
                      occupancy=occupancy,
                      scene_transform=header.get("scene_transform"))


def save_history_csv(path, history: list[HistoryRow]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "L_color", "L_eik", "L_sparse", "L_mask", "b"])
        for row in history:
            writer.writerow([row.step, repr(row.color), repr(row.eikonal),
                             repr(row.sparsity), repr(row.mask), repr(row.b)])


# ---------------------------------------------------------------------------
# sharpness trajectory


@dataclass
class SharpnessReport:
    steps: list[int]
    b_values: list[float]
    fraction_windows_increasing: float
    initial_b: float
    final_b: float


def b_trajectory(history: list[HistoryRow], window: int = 500) -> SharpnessReport:
    """How the opacity sharpness evolved; fraction of `window`-step
    spans over which it increased."""
    if not history:
        raise ValueError("no snapshots")
    steps = [row.step for row in history]
    bs = [row.b for row in history]
    increased = []
    for i, s in enumerate(steps):
        target = s + window
        j = next((k for k in range(i + 1, len(steps)) if steps[k] >= target), None)
        if j is not None:
            increased.append(bs[j] > bs[i])
    frac = float(np.mean(increased)) if increased else float("nan")
    return SharpnessReport(steps=steps, b_values=bs,
                           fraction_windows_increasing=frac,
                           initial_b=bs[0], final_b=bs[-1])
