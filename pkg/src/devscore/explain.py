"""Saliency: which pixels drove a bag's anomaly score.

The pipeline is gradient magnitudes of the top-K bag score with respect to
the (standardized) patch inputs, assembled back into image space with
coverage normalization, then smoothed by a truncated Gaussian whose width
scales with the image side.  Instances outside the top-K selection receive
exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backprop
from .bags import Bag
from .errors import ContractError
from .losses import topk_score
from .metrics import auc_roc
from .network import NetworkParams, make_leaves, scores_tensor

Array = np.ndarray

BASE_SIGMA = 4.0
BASE_SIDE = 128


@dataclass
class SaliencyMap:
    """Non-negative per-pixel attribution for one image."""
    values: Array
    image_id: str


def default_sigma(side: int) -> float:
    """Blur width 4 at a 128 side, scaled linearly, never below 1."""
    return max(1.0, BASE_SIGMA * side / BASE_SIDE)


def input_gradients(bag: Bag, params: NetworkParams, k_fraction: float = 0.10) -> Array:
    """|d(top-K score)/d(instance features)|, shape like `bag.instances`.

    Rows for unselected instances are exactly zero thanks to the 1/K
    gradient routing of the aggregation.
    """
    if bag.geometry is None:
        raise ContractError(f"bag {bag.id!r} has no patch geometry; only the anomaly "
                            "score itself is explainable for plain feature bags")
    leaves = make_leaves(params)
    x = Tensor(bag.instances, name="input")
    scores = scores_tensor(leaves, params.arch, x)
    phi, _ = topk_score(scores, k_fraction)
    backprop(phi)
    return np.abs(x.grad)


def assemble_map(grads: Array, geometry) -> SaliencyMap:
    """Scatter per-patch gradients onto pixels, averaging where windows overlap."""
    rows, cols = geometry.grid()
    n, d = np.asarray(grads).shape
    if n != rows * cols or d != geometry.patch * geometry.patch:
        raise ContractError(f"gradients shaped {grads.shape} do not match a "
                            f"{rows}x{cols} grid of {geometry.patch}x{geometry.patch} patches")
    acc = np.zeros((geometry.height, geometry.width))
    cover = np.zeros((geometry.height, geometry.width))
    p = geometry.patch
    for j in range(n):
        r0, c0 = geometry.window_origin(j)
        acc[r0:r0 + p, c0:c0 + p] += grads[j].reshape(p, p)
        cover[r0:r0 + p, c0:c0 + p] += 1.0
    out = np.divide(acc, cover, out=np.zeros_like(acc), where=cover > 0)
    return SaliencyMap(values=out, image_id=geometry.image_id)


def gaussian_blur(sal: SaliencyMap, sigma: float | None = None) -> SaliencyMap:
    """Truncated, edge-renormalized Gaussian smoothing.

    Kernel radius is round(2*sigma); near borders the kernel renormalizes
    over its in-bounds taps, so a constant map stays constant.  Separable
    passes with per-pass renormalization equal the full 2-d renormalized
    convolution because the in-bounds region is always a rectangle.
    """
    if sigma is None:
        sigma = default_sigma(max(sal.values.shape))
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    radius = int(round(2.0 * sigma))
    if radius == 0:
        return SaliencyMap(values=sal.values.copy(), image_id=sal.image_id)
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)

    def blur_axis(a: Array) -> Array:
        n = a.shape[0]
        out = np.zeros_like(a)
        norm = np.zeros(n)
        for k, w in zip(range(-radius, radius + 1), taps):
            src_lo, src_hi = max(0, -k), min(n, n - k)
            if src_lo >= src_hi:
                continue
            out[src_lo:src_hi] += w * a[src_lo + k:src_hi + k]
            norm[src_lo:src_hi] += w
        return out / norm[:, None] if a.ndim == 2 else out / norm

    v = blur_axis(sal.values)
    v = blur_axis(v.T).T
    return SaliencyMap(values=v, image_id=sal.image_id)


def explain_bag(bag: Bag, params: NetworkParams, k_fraction: float = 0.10,
                sigma: float | None = None) -> SaliencyMap:
    """The full pipeline: input gradients, assembly, blur."""
    grads = input_gradients(bag, params, k_fraction)
    return gaussian_blur(assemble_map(grads, bag.geometry), sigma)


def pixel_auc(sal: SaliencyMap, mask: Array) -> float:
    """Ranking quality of the saliency map against a binary defect mask."""
    mask = np.asarray(mask)
    if mask.shape != sal.values.shape:
        raise ContractError(f"mask shape {mask.shape} != map shape {sal.values.shape}")
    labels = (mask.ravel() > 0).astype(int)
    return auc_roc(sal.values.ravel(), labels)
