"""Gaussian prompt heatmaps at feature-grid resolution.

Prompts (points, boxes) are mapped to grid-space centers, rasterized as 2D
Gaussians, summed, normalized into [0, 1], and added onto feature maps with a
per-channel broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .prompts import PromptSet


@dataclass(frozen=True)
class GaussianCenter:
    """A Gaussian bump in feature-grid coordinates (cx = column, cy = row)."""

    cx: float
    cy: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class SigmaPolicy:
    """How prompt geometry picks the Gaussian width, in grid units.

    Boxes: sigma = box_fraction * max(box_w, box_h), measured in image pixels,
    then scaled to grid units ("box-quarter" at the 0.25 default).
    Points: sigma = point_fraction * min(grid_h, grid_w).
    """

    box_fraction: float = 0.25
    point_fraction: float = 0.125

    def __post_init__(self):
        if self.box_fraction <= 0 or self.point_fraction <= 0:
            raise ValueError("sigma policy fractions must be > 0")


def coord_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Index grids with X[i, j] = j and Y[i, j] = i."""
    if h < 1 or w < 1:
        raise ValueError(f"grid dimensions must be >= 1, got ({h}, {w})")
    y, x = np.mgrid[0:h, 0:w]
    return x.astype(np.float64), y.astype(np.float64)


def gaussian_at(center: GaussianCenter, h: int, w: int) -> np.ndarray:
    """Unit-peak Gaussian exp(-((j-cx)^2 + (i-cy)^2) / (2 sigma^2)) on an h x w grid."""
    if center.sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {center.sigma}")
    x, y = coord_grid(h, w)
    d2 = (x - center.cx) ** 2 + (y - center.cy) ** 2
    return np.exp(-d2 / (2.0 * center.sigma**2))


def aggregate_heatmap(centers: list[GaussianCenter], h: int, w: int) -> np.ndarray:
    """Sum the per-center Gaussians, then normalize so the max is at most 1.

    Normalization divides by max(raw_max, 1): a single center keeps its unit
    peak, overlapping centers are squeezed back into [0, 1].
    """
    if not centers:
        raise ValueError("aggregate_heatmap needs at least one center")
    raw = np.zeros((h, w), dtype=np.float64)
    for c in centers:
        raw += gaussian_at(c, h, w)
    return raw / max(float(raw.max()), 1.0)


def prompts_to_centers(
    prompts: PromptSet,
    image_size: tuple[int, int],
    grid_size: tuple[int, int],
    sigma_policy: SigmaPolicy | None = None,
) -> list[GaussianCenter]:
    """Map prompts into grid-space Gaussian centers.

    image_size and grid_size are (H, W). Points map through plain coordinate
    scaling, boxes through their geometric center. Centers landing outside the
    grid after scaling are clamped to the nearest valid coordinate so that
    degenerate prompts cannot crash adaptation.
    """
    if prompts.empty:
        raise ValueError("prompts_to_centers needs a nonempty PromptSet")
    policy = sigma_policy or SigmaPolicy()
    img_h, img_w = image_size
    grid_h, grid_w = grid_size
    prompts.validate_bounds((img_h, img_w))

    sx = grid_w / img_w
    sy = grid_h / img_h

    def clamp(v: float, hi: int) -> float:
        return min(max(v, 0.0), hi - 1.0)

    centers: list[GaussianCenter] = []
    for p in prompts.points:
        sigma = policy.point_fraction * min(grid_h, grid_w)
        centers.append(GaussianCenter(clamp(p.x * sx, grid_w), clamp(p.y * sy, grid_h), sigma))
    for b in prompts.boxes:
        cx, cy = b.center
        # box extent in image pixels, scaled into grid units via the x stride
        # (square images and grids in practice; max() keeps it isotropic)
        sigma = policy.box_fraction * max(b.width, b.height) * sx
        centers.append(GaussianCenter(clamp(cx * sx, grid_w), clamp(cy * sy, grid_h), sigma))
    return centers


def prompt_heatmap(
    prompts: PromptSet,
    image_size: tuple[int, int],
    grid_size: tuple[int, int],
    sigma_policy: SigmaPolicy | None = None,
) -> np.ndarray:
    """Prompts straight to a normalized (H, W) grid heatmap."""
    centers = prompts_to_centers(prompts, image_size, grid_size, sigma_policy)
    return aggregate_heatmap(centers, grid_size[0], grid_size[1])


def broadcast_inject(
    feature: torch.Tensor, heatmap: np.ndarray | torch.Tensor, gain: float = 1.0
) -> torch.Tensor:
    """Add gain * heatmap onto every channel of a (B, C, H, W) feature map.

    The heatmap enters the graph as a constant, so the result stays
    differentiable with respect to the feature.
    """
    if feature.dim() != 4:
        raise ValueError(f"expected (B, C, H, W) feature, got shape {tuple(feature.shape)}")
    hm = torch.as_tensor(heatmap, dtype=feature.dtype, device=feature.device)
    if hm.dim() == 2:
        hm = hm[None, None]
    elif hm.dim() == 3:  # (B, H, W), one map per sample
        hm = hm[:, None]
    if hm.shape[-2:] != feature.shape[-2:]:
        raise ValueError(
            f"heatmap spatial shape {tuple(hm.shape[-2:])} does not match "
            f"feature {tuple(feature.shape[-2:])}"
        )
    return feature + gain * hm


def heatmap_to_u8(heatmap: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] heatmap to 8-bit grayscale, value = round(255 * h)."""
    return np.clip(np.rint(np.asarray(heatmap, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
