"""Overlap metrics, run aggregation, and figure emission.

Dice and mIoU follow the binary-task conventions documented on each function.
Aggregation turns per-sample JSON records into a RunSummary whose means and
medians are recomputable from the embedded records.
"""

from __future__ import annotations

import json
import statistics
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .prompts import PromptSet


def _as_bool(mask) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask).astype(bool)


def dice(pred, gt) -> float:
    """2|P∩G| / (|P|+|G|); defined as 1.0 when both masks are empty."""
    p = _as_bool(pred)
    g = _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def iou_fg(pred, gt) -> float:
    """Foreground IoU; defined as 1.0 when both masks are empty."""
    p = _as_bool(pred)
    g = _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def miou(pred, gt) -> float:
    """Mean IoU over the two classes {foreground, background}.

    A class absent from both masks scores 1.0 for that class.
    """
    p = _as_bool(pred)
    g = _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return 0.5 * (iou_fg(p, g) + iou_fg(~p, ~g))


# -- aggregation --------------------------------------------------------------

_NUMERIC_KEYS = ("dice", "miou", "wall_time_ms")


@dataclass
class RunSummary:
    label: str
    count: int
    means: dict
    medians: dict
    gate_pass_rate: float
    steps_mean: float
    total_wall_time_ms: float
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "label": self.label,
            "count": self.count,
            "means": self.means,
            "medians": self.medians,
            "gate_pass_rate": self.gate_pass_rate,
            "steps_mean": self.steps_mean,
            "total_wall_time_ms": self.total_wall_time_ms,
            "records": self.records,
            "config": self.config,
            "seed": self.seed,
        }

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def from_json_dict(cls, d: dict) -> "RunSummary":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunSummary":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


def aggregate(records: list[dict], label: str = "run", config: dict | None = None, seed: int | None = None) -> RunSummary:
    """Fold per-sample records into a RunSummary with means and medians."""
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    means = {}
    medians = {}
    for key in _NUMERIC_KEYS:
        vals = [float(r[key]) for r in records if key in r]
        if vals:
            means[key] = statistics.fmean(vals)
            medians[key] = float(statistics.median(vals))
    gates = [bool(r.get("gate_passed", True)) for r in records]
    steps = [float(r.get("steps_taken", 0)) for r in records]
    walls = [float(r.get("wall_time_ms", 0.0)) for r in records]
    return RunSummary(
        label=label,
        count=len(records),
        means=means,
        medians=medians,
        gate_pass_rate=sum(gates) / len(gates),
        steps_mean=statistics.fmean(steps),
        total_wall_time_ms=float(sum(walls)),
        records=list(records),
        config=dict(config or {}),
        seed=seed,
    )


# -- plots --------------------------------------------------------------------


def emit_plots(summaries: list[RunSummary], outdir, maps: dict | None = None) -> list[Path]:
    """Write the comparison figures; returns the created file paths.

    Always writes a dice/miou bar chart and a timing bar chart. When `maps`
    (name -> 2d array in [0,1]) is given, each map gets its own panel PNG.
    """
    if not summaries:
        raise ValueError("emit_plots needs at least one summary")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    labels = [s.label for s in summaries]
    created = []

    x = np.arange(len(summaries))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(summaries)), 3.2))
    width = 0.38
    ax.bar(x - width / 2, [s.means.get("dice", 0.0) for s in summaries], width, label="dice")
    ax.bar(x + width / 2, [s.means.get("miou", 0.0) for s in summaries], width, label="miou")
    ax.set_xticks(x, labels, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean score")
    ax.legend()
    fig.tight_layout()
    p = outdir / "dice_miou.png"
    fig.savefig(p)
    plt.close(fig)
    created.append(p)

    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(summaries)), 3.2))
    ax.bar(x, [s.means.get("wall_time_ms", 0.0) for s in summaries], 0.6, color="#777")
    ax.set_xticks(x, labels, rotation=30, ha="right")
    ax.set_ylabel("mean wall time per sample (ms)")
    fig.tight_layout()
    p = outdir / "timing.png"
    fig.savefig(p)
    plt.close(fig)
    created.append(p)

    for name, arr in (maps or {}).items():
        arr = np.asarray(arr, dtype=float)
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        im = ax.imshow(arr, vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_axis_off()
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        p = outdir / f"map_{name}.png"
        fig.savefig(p)
        plt.close(fig)
        created.append(p)
    return created


# -- attribution map ----------------------------------------------------------


def gradcam_map(model, image: torch.Tensor, prompts: PromptSet, target_layer: int) -> torch.Tensor:
    """Gradient-weighted channel mean of one encoder block's activations.

    The scalar being differentiated is the sum of logits over predicted
    foreground. A prediction with no foreground yields an all-zero map and a
    warning, since there is nothing to attribute.
    """
    depth = model.cfg.depth
    if not 0 <= target_layer < depth:
        raise ValueError(f"target_layer must be in [0, {depth}), got {target_layer}")
    model.zero_grad(set_to_none=True)
    with torch.enable_grad():
        img = image[None] if image.dim() == 3 else image
        trace = model.encode_image(img, prompts)
        tokens = model.encode_prompts(prompts)
        logits, _ = model.decoder(trace.final_features, tokens)
        act = trace.per_block_features[target_layer]
        fg = logits > 0
        if not bool(fg.any()):
            warnings.warn("no predicted foreground; attribution map is all zero")
            return torch.zeros(act.shape[-2:], dtype=act.dtype)
        score = logits[fg].sum()
        (grad,) = torch.autograd.grad(score, act)
    weights = grad.mean(dim=(2, 3))  # (B, C)
    cam = torch.relu((weights[:, :, None, None] * act).sum(dim=1))[0].detach()
    peak = float(cam.max())
    if peak > 0:
        cam = cam / peak
    return cam
