"""Training objective: color + eikonal + sparsity (+ early-phase mask).

Each loss has a plain-numpy form (the contract and the test oracle) and
a tape form used inside the training graph.  The mask term supervises
the foreground pixel alpha against a coarse binary mask and is active
only during the initial phase; afterwards it is dropped from the graph
entirely, not merely weighted to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node, Tape

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    eikonal: float = 0.1
    sparsity: float = 0.01
    tau: float = 10.0
    mask: float = 0.5
    mask_phase_end: int = 1000

    def __post_init__(self):
        if min(self.eikonal, self.sparsity, self.mask) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class RayBatch:
    """One training batch: pixels of a single view and their rays."""
    colors: np.ndarray               # (m, 3) target pixel colors
    pixels: np.ndarray               # (m, 2) integer (px, py)
    view_index: int
    mask_values: np.ndarray | None   # (m,) {0,1} when the view has a mask
    bundle: object                   # RayBundle

    def __post_init__(self):
        if len(self.colors) < 1:
            raise ValueError("a batch needs at least one ray")


# ---------------------------------------------------------------------------
# numpy forms


def color_loss(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean squared L2 color error: (1/m) sum_k ||c_hat_k - c_k||^2."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ContractError(f"shape mismatch {rendered.shape} vs {target.shape}")
    diff = rendered - target
    return float((diff * diff).sum(axis=-1).mean())


def eikonal_loss(normals: np.ndarray) -> float:
    """Mean (||n|| - 1)^2 over all sampled normals."""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(normals, axis=1)
    return float(((norms - 1.0) ** 2).mean())


def sparsity_loss(sdf_values: np.ndarray, tau: float) -> float:
    """Mean exp(-tau |sdf|)^2; pushes off-surface SDF magnitudes from 0."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    s = np.abs(np.asarray(sdf_values, dtype=np.float64))
    return float(np.exp(-2.0 * tau * s).mean())


def mask_loss(pixel_alpha: np.ndarray, mask: np.ndarray) -> float:
    """Binary cross entropy between pixel alphas and a coarse mask."""
    a = np.clip(np.asarray(pixel_alpha, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    m = np.asarray(mask, dtype=np.float64)
    return float((-(m * np.log(a) + (1.0 - m) * np.log(1.0 - a))).mean())


def total_loss(parts: dict[str, float], weights: LossWeights, step: int) -> float:
    """Weighted sum; the mask term exists only before mask_phase_end."""
    total = parts["color"] + weights.eikonal * parts["eikonal"] \
        + weights.sparsity * parts["sparsity"]
    if "mask" in parts and parts["mask"] is not None and step < weights.mask_phase_end:
        total += weights.mask * parts["mask"]
    return float(total)


# ---------------------------------------------------------------------------
# tape forms


def color_loss_node(tape: Tape, rendered: Node, target: np.ndarray) -> Node:
    if rendered.value.shape != target.shape:
        raise ContractError(f"shape mismatch {rendered.value.shape} vs {target.shape}")
    diff = ad.sub(tape, rendered, tape.constant(target))
    per_ray = ad.sum_cols(tape, ad.mul(tape, diff, diff))
    return ad.mean_all(tape, per_ray)


def eikonal_loss_node(tape: Tape, normals: Node) -> Node:
    sq = ad.sum_cols(tape, ad.mul(tape, normals, normals))
    norm = ad.sqrt(tape, ad.maximum_const(tape, sq, 1e-30))
    dev = ad.add_const(tape, norm, -1.0)
    return ad.mean_all(tape, ad.mul(tape, dev, dev))


def sparsity_loss_node(tape: Tape, sdf: Node, tau: float) -> Node:
    return ad.mean_all(tape, ad.exp(
        tape, ad.scale(tape, ad.absolute(tape, sdf), -2.0 * tau)))


def mask_loss_node(tape: Tape, pixel_alpha: Node, mask: np.ndarray) -> Node:
    a = ad.clip(tape, pixel_alpha, BCE_EPS, 1.0 - BCE_EPS)
    m = mask.reshape(-1, 1).astype(np.float64)
    pos = ad.mul(tape, tape.constant(m), ad.log(tape, a))
    neg_a = ad.add_const(tape, ad.neg(tape, a), 1.0)
    neg = ad.mul(tape, tape.constant(1.0 - m), ad.log(tape, neg_a))
    return ad.neg(tape, ad.mean_all(tape, ad.add(tape, pos, neg)))


def total_loss_node(tape: Tape, parts: dict[str, Node], weights: LossWeights,
                    step: int) -> Node:
    total = parts["color"]
    total = ad.add(tape, total, ad.scale(tape, parts["eikonal"], weights.eikonal))
    total = ad.add(tape, total, ad.scale(tape, parts["sparsity"], weights.sparsity))
    if parts.get("mask") is not None and step < weights.mask_phase_end:
        total = ad.add(tape, total, ad.scale(tape, parts["mask"], weights.mask))
    return total
