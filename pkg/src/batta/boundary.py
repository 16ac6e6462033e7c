"""Boundary maps from shallow features and the shallow/deep alignment loss.

A Sobel magnitude map of shallow features marks edges; the loss is the mean of
(1 - Pearson r) per sample and channel, with the correlation taken over the
boundary support cells only, so gradients stay sparse and the score ignores
per-channel affine rescaling. A quality gate checks that boundary activation
concentrates inside the prompt box before any adaptation is allowed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .prompts import BoxXYXY

SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
SOBEL_Y = ((-1.0, -2.0, -1.0), (0.0, 0.0, 0.0), (1.0, 2.0, 1.0))

# channels whose masked variance over the support falls below this are
# excluded from the alignment average instead of producing NaNs
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class GateThresholds:
    tau: float = 1.5
    delta: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")


@dataclass
class AlignmentReport:
    """Outcome of one alignment-loss evaluation.

    loss is kept as a 0-dim tensor so it can be backpropagated; use
    to_json_dict() for serialization.
    """

    loss: torch.Tensor
    channels_used: int
    support_fraction: float
    gate_passed: bool = True
    correlations: torch.Tensor | None = field(default=None, repr=False)
    valid: torch.Tensor | None = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "loss": float(self.loss.detach()),
            "channels_used": int(self.channels_used),
            "gate_passed": bool(self.gate_passed),
            "support_fraction": float(self.support_fraction),
        }


def _check_feature(t: torch.Tensor, name: str) -> None:
    if t.dim() != 4:
        raise ValueError(f"{name} must be (B, C, H, W), got shape {tuple(t.shape)}")


def sobel_gradients(feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel 3x3 Sobel responses, replicate-padded to keep the shape."""
    _check_feature(feat, "feat")
    b, c, h, w = feat.shape
    if h < 3 or w < 3:
        raise ValueError(f"spatial dims must be >= 3 for Sobel, got {h}x{w}")
    kx = torch.tensor(SOBEL_X, dtype=feat.dtype, device=feat.device)
    ky = torch.tensor(SOBEL_Y, dtype=feat.dtype, device=feat.device)
    weight = torch.stack([kx, ky]).repeat(c, 1, 1).unsqueeze(1)  # (2C, 1, 3, 3)
    padded = F.pad(feat, (1, 1, 1, 1), mode="replicate")
    out = F.conv2d(padded, weight, groups=c)
    out = out.view(b, c, 2, h, w)
    return out[:, :, 0], out[:, :, 1]


def boundary_map(
    feat: torch.Tensor, eps: float = 1e-6, reduce: str = "mean"
) -> torch.Tensor:
    """Normalized Sobel magnitude of a feature map, one (B, 1, H, W) map in [0, 1).

    Magnitude is computed per channel, reduced across channels (mean or max),
    and divided by its per-sample max plus eps; samples are normalized
    independently because they are adapted independently.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if reduce not in ("mean", "max"):
        raise ValueError(f"reduce must be 'mean' or 'max', got {reduce!r}")
    gx, gy = sobel_gradients(feat)
    mag = torch.sqrt(gx**2 + gy**2)
    mag = mag.mean(dim=1, keepdim=True) if reduce == "mean" else mag.amax(dim=1, keepdim=True)
    peak = mag.amax(dim=(2, 3), keepdim=True)
    return mag / (peak + eps)


def mask_features(feat: torch.Tensor, bmap: torch.Tensor) -> torch.Tensor:
    """Element-wise product with a (B, 1, H, W) map broadcast over channels."""
    _check_feature(feat, "feat")
    _check_feature(bmap, "bmap")
    if bmap.shape[1] != 1:
        raise ValueError(f"boundary map must have one channel, got {bmap.shape[1]}")
    if bmap.shape[0] != feat.shape[0] or bmap.shape[-2:] != feat.shape[-2:]:
        raise ValueError(
            f"shape mismatch: feat {tuple(feat.shape)} vs map {tuple(bmap.shape)}"
        )
    return feat * bmap


def masked_pearson(
    fs: torch.Tensor,
    fd: torch.Tensor,
    bmap: torch.Tensor,
    support_threshold: float = 0.1,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pearson correlation of shallow/deep feature values over boundary support.

    Support is the cell set {(i, j): M > support_threshold}; only those cells
    enter the statistics, so channels that differ by an affine map correlate to
    exactly +/-1 and out-of-support cells contribute no gradient. Statistics
    accumulate in float64. Returns (r, valid) with r of dtype float64, both
    (B, C). Channels with an empty support or near-zero variance on either
    side are marked invalid (r forced to 0) rather than raising.
    """
    if fs.shape != fd.shape:
        raise ValueError(f"shape mismatch: {tuple(fs.shape)} vs {tuple(fd.shape)}")
    if not 0 <= support_threshold < 1:
        raise ValueError(f"support_threshold must be in [0, 1), got {support_threshold}")
    _check_feature(bmap, "bmap")
    if bmap.shape[1] != 1:
        raise ValueError(f"boundary map must have one channel, got {bmap.shape[1]}")
    if bmap.shape[0] != fs.shape[0] or bmap.shape[-2:] != fs.shape[-2:]:
        raise ValueError(
            f"shape mismatch: feat {tuple(fs.shape)} vs map {tuple(bmap.shape)}"
        )

    # mean/variance accumulation over support cells is cancellation-prone, so
    # the statistics run in double precision regardless of the feature dtype
    fs = fs.to(torch.float64)
    fd = fd.to(torch.float64)
    support = (bmap > support_threshold).to(torch.float64)  # (B, 1, H, W)
    n = support.sum(dim=(2, 3))  # (B, 1)
    n_safe = n.clamp_min(1.0)

    mean_s = (fs * support).sum(dim=(2, 3)) / n_safe  # (B, C)
    mean_d = (fd * support).sum(dim=(2, 3)) / n_safe
    ds = (fs - mean_s[..., None, None]) * support
    dd = (fd - mean_d[..., None, None]) * support

    num = (ds * dd).sum(dim=(2, 3))
    ss = (ds * ds).sum(dim=(2, 3))
    sd = (dd * dd).sum(dim=(2, 3))

    valid = (n > 0) & (ss / n_safe > VARIANCE_FLOOR) & (sd / n_safe > VARIANCE_FLOOR)
    den = torch.sqrt(ss.clamp_min(VARIANCE_FLOOR)) * torch.sqrt(sd.clamp_min(VARIANCE_FLOOR))
    r = num / den
    r = torch.where(valid, r, torch.zeros_like(r))
    return r, valid


def alignment_loss(
    fs: torch.Tensor,
    fd: torch.Tensor,
    bmap: torch.Tensor,
    support_threshold: float = 0.1,
    stop_grad_shallow: bool = True,
) -> AlignmentReport:
    """Mean of (1 - r) over non-excluded (sample, channel) pairs.

    With stop_grad_shallow the shallow side (and the map derived from it) acts
    as a fixed supervision target. If every channel is excluded the loss is 0
    with channels_used = 0, which tells the driver to skip the update.
    """
    if stop_grad_shallow:
        fs = fs.detach()
        bmap = bmap.detach()
    r, valid = masked_pearson(fs, fd, bmap, support_threshold)
    channels_used = int(valid.sum())
    if channels_used > 0:
        loss = ((1.0 - r) * valid.to(r.dtype)).sum() / channels_used
    else:
        loss = torch.zeros((), dtype=torch.float64, device=fd.device)
    support_fraction = float(
        (bmap > support_threshold).to(torch.float64).mean(dim=(1, 2, 3)).mean()
    )
    return AlignmentReport(
        loss=loss,
        channels_used=channels_used,
        support_fraction=support_fraction,
        correlations=r,
        valid=valid,
    )


def _boxes_to_cell_mask(
    boxes: list[BoxXYXY], h: int, w: int, device: torch.device
) -> torch.Tensor:
    """Union of half-open grid boxes as a boolean (H, W) cell mask."""
    import math

    inside = torch.zeros(h, w, dtype=torch.bool, device=device)
    for box in boxes:
        x0 = max(int(math.floor(box.x0)), 0)
        y0 = max(int(math.floor(box.y0)), 0)
        x1 = min(int(math.ceil(box.x1)), w)
        y1 = min(int(math.ceil(box.y1)), h)
        if x1 > x0 and y1 > y0:
            inside[y0:y1, x0:x1] = True
    return inside


def quality_gate(
    bmap: torch.Tensor,
    boxes: BoxXYXY | list[BoxXYXY],
    thresholds: GateThresholds = GateThresholds(),
) -> list[bool]:
    """Per-sample check that boundary activation concentrates in the box.

    Pass iff mean(M inside) > tau * mean(M outside) and mean(M inside) > delta.
    Boxes are given in grid coordinates; multiple boxes gate on their union.
    A box covering the whole grid has its outside mean defined as 0, and a
    degenerate box (no cells inside) fails the gate with a warning.
    """
    _check_feature(bmap, "bmap")
    if isinstance(boxes, BoxXYXY):
        boxes = [boxes]
    b, _, h, w = bmap.shape
    inside = _boxes_to_cell_mask(boxes, h, w, bmap.device)
    n_in = int(inside.sum())
    if n_in == 0:
        warnings.warn("quality gate: box covers no grid cells, failing gate")
        return [False] * b
    outside = ~inside
    n_out = int(outside.sum())

    results = []
    for i in range(b):
        m = bmap[i, 0]
        mean_in = float(m[inside].mean())
        mean_out = float(m[outside].mean()) if n_out > 0 else 0.0
        results.append(mean_in > thresholds.tau * mean_out and mean_in > thresholds.delta)
    return results
