"""Per-sample test-time adaptation driver.

One episode: encode with prompt injection, build the boundary map from the
shallow features, check the quality gate, then (if it passes) take plain
gradient-descent steps on a small parameter subset of the final encoder block,
minimizing the boundary-masked alignment loss. Prediction always uses the
weights as they stand after the loop; episodic mode restores the pristine
checkpoint afterwards.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import torch

import numpy as np
from torch.func import functional_call

from .boundary import GateThresholds, alignment_loss, boundary_map, quality_gate
from .data import Sample, ShiftSpec, apply_shift, minimal_box
from .encoder import select_features
from .metrics import dice as dice_metric
from .metrics import miou as miou_metric
from .model import SegModel, SegmentationResult, supervised_loss
from .prompts import BoxXYXY, PromptSet

PARAM_SELECTORS = ("last_block_norms", "last_block_attn_proj", "last_block_all")


@dataclass(frozen=True)
class AdaptationConfig:
    steps: int = 5
    lr: float = 1e-4
    param_selector: str = "last_block_norms"
    l_s: int = 2
    l_d: int = 11
    tau: float = 1.5
    delta: float = 0.1
    support_threshold: float = 0.1
    episodic: bool = True
    stop_grad_shallow: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.param_selector not in PARAM_SELECTORS:
            raise ValueError(
                f"unknown param_selector {self.param_selector!r}; expected one of {PARAM_SELECTORS}"
            )
        if not self.l_s < self.l_d:
            raise ValueError("l_s must be < l_d")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "lr": self.lr,
            "param_selector": self.param_selector,
            "l_s": self.l_s,
            "l_d": self.l_d,
            "tau": self.tau,
            "delta": self.delta,
            "support_threshold": self.support_threshold,
            "episodic": self.episodic,
            "stop_grad_shallow": self.stop_grad_shallow,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        return cls(**d)


@dataclass
class AdaptationTrace:
    per_step_loss: list[float] = field(default_factory=list)
    gate_passed: bool = False
    params_updated: int = 0
    steps_taken: int = 0
    wall_time_ms: float = 0.0
    cumulative_steps: int = 0
    aborted: bool = False
    error: str | None = None


@dataclass
class ParamSelection:
    names: list[str]
    params: list[torch.nn.Parameter]
    scalar_count: int


def _selector_prefixes(depth: int, selector: str) -> tuple[str, ...]:
    if selector not in PARAM_SELECTORS:
        raise ValueError(f"unknown param_selector {selector!r}; expected one of {PARAM_SELECTORS}")
    prefix = f"encoder.blocks.{depth - 1}."
    if selector == "last_block_norms":
        return (prefix + "norm1.", prefix + "norm2.")
    if selector == "last_block_attn_proj":
        return (prefix + "attn.proj.",)
    return (prefix,)


def select_tunable_params(model: SegModel, selector: str) -> ParamSelection:
    """Freeze everything, then re-enable gradients on the selected subset.

    The subset lives in the final encoder block: its two layer norms, its
    attention output projection, or the whole block.
    """
    wanted = _selector_prefixes(model.cfg.depth, selector)
    names = []
    params = []
    for name, p in model.named_parameters():
        p.requires_grad_(False)
        if name.startswith(wanted):
            names.append(name)
            params.append(p)
    for p in params:
        p.requires_grad_(True)
    if not params:
        raise RuntimeError(f"selector {selector!r} matched no parameters")
    return ParamSelection(
        names=names, params=params, scalar_count=sum(p.numel() for p in params)
    )


def _grid_boxes(prompts: PromptSet, image_size: int, grid_size: int) -> list[BoxXYXY]:
    s = grid_size / image_size
    return [
        BoxXYXY(x0=b.x0 * s, y0=b.y0 * s, x1=b.x1 * s, y1=b.y1 * s) for b in prompts.boxes
    ]


def _snapshot(model: SegModel) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def adapt_sample(
    model: SegModel,
    image: torch.Tensor,
    prompts: PromptSet,
    cfg: AdaptationConfig = AdaptationConfig(),
) -> tuple[SegmentationResult, AdaptationTrace]:
    """Run one adaptation episode and predict.

    The gate is evaluated once, before any step. On gate failure or with
    steps=0 the output is exactly the zero-shot prediction. A non-finite loss
    aborts the episode and restores the pristine weights.
    """
    start = time.perf_counter()
    trace = AdaptationTrace()
    pristine = _snapshot(model)
    grad_flags = {n: p.requires_grad for n, p in model.named_parameters()}
    torch.manual_seed(cfg.seed)

    try:
        selection = select_tunable_params(model, cfg.param_selector)

        with torch.no_grad():
            probe = model.encode_image(image[None] if image.dim() == 3 else image, prompts)
            fs, _ = select_features(probe, cfg.l_s, cfg.l_d)
            bmap = boundary_map(fs)
        if prompts.boxes:
            gate = quality_gate(
                bmap,
                _grid_boxes(prompts, model.cfg.image_size, model.cfg.grid_size),
                GateThresholds(tau=cfg.tau, delta=cfg.delta),
            )[0]
        else:
            warnings.warn("no box prompt; quality gate cannot be evaluated, skipping adaptation")
            gate = False
        trace.gate_passed = bool(gate)

        if gate:
            img = image[None] if image.dim() == 3 else image
            for _ in range(cfg.steps):
                model.zero_grad(set_to_none=True)
                enc = model.encode_image(img, prompts)
                fs, fd = select_features(enc, cfg.l_s, cfg.l_d)
                bmap = boundary_map(fs)
                report = alignment_loss(
                    fs, fd, bmap, cfg.support_threshold, cfg.stop_grad_shallow
                )
                loss = report.loss
                if not torch.isfinite(loss):
                    model.load_state_dict(pristine)
                    trace.aborted = True
                    trace.error = "non-finite alignment loss"
                    trace.per_step_loss = []
                    trace.steps_taken = 0
                    break
                if report.channels_used == 0:
                    trace.per_step_loss.append(float(loss.detach()))
                    break
                loss.backward()
                with torch.no_grad():
                    for p in selection.params:
                        if p.grad is not None:
                            p.add_(p.grad, alpha=-cfg.lr)
                trace.per_step_loss.append(float(loss.detach()))
                trace.steps_taken += 1
            if trace.steps_taken > 0:
                trace.params_updated = selection.scalar_count

        result = model.segment(image, prompts)
    finally:
        if cfg.episodic or trace.aborted:
            model.load_state_dict(pristine)
        for n, p in model.named_parameters():
            p.requires_grad_(grad_flags[n])
        model.zero_grad(set_to_none=True)

    trace.cumulative_steps = trace.steps_taken
    trace.wall_time_ms = (time.perf_counter() - start) * 1000.0
    return result, trace


def run_stream(
    model: SegModel,
    dataset: list[Sample],
    cfg: AdaptationConfig = AdaptationConfig(),
    prompt_fn=None,
) -> list[tuple[SegmentationResult, AdaptationTrace]]:
    """Adapt over samples in order; failures are recorded, not raised.

    prompt_fn maps a Sample to a PromptSet; the default is the minimal
    bounding box of the ground-truth mask.
    """
    if not dataset:
        raise ValueError("run_stream needs a nonempty dataset")
    if prompt_fn is None:
        prompt_fn = lambda s: PromptSet(boxes=[minimal_box(s.mask.numpy())])
    pristine = _snapshot(model) if not cfg.episodic else None
    out = []
    cumulative = 0
    for sample in dataset:
        try:
            result, trace = adapt_sample(model, sample.image, prompt_fn(sample), cfg)
        except Exception as exc:  # keep the stream alive, restore a sane model
            if pristine is not None:
                model.load_state_dict(pristine)
            trace = AdaptationTrace(aborted=True, error=f"{type(exc).__name__}: {exc}")
            try:
                result = model.segment(sample.image, prompt_fn(sample))
            except Exception:  # even the prompt is broken; emit an empty mask
                h, w = sample.image.shape[-2:]
                logits = torch.full((1, 1, h, w), -1.0)
                result = SegmentationResult(
                    logits=logits,
                    mask=logits > 0,
                    confidence=torch.zeros(1),
                    wall_time_ms=0.0,
                )
        cumulative += trace.steps_taken
        trace.cumulative_steps = cumulative
        out.append((result, trace))
    return out


class _AlignmentObjective(torch.nn.Module):
    """Wraps the encode -> boundary -> alignment pipeline for functional_call."""

    def __init__(self, model: SegModel, cfg: AdaptationConfig):
        super().__init__()
        self.model = model
        self.adapt_cfg = cfg

    def forward(self, images: torch.Tensor, prompts) -> torch.Tensor:
        trace = self.model.encode_image(images, prompts)
        fs, fd = select_features(trace, self.adapt_cfg.l_s, self.adapt_cfg.l_d)
        bmap = boundary_map(fs)
        report = alignment_loss(
            fs, fd, bmap, self.adapt_cfg.support_threshold, self.adapt_cfg.stop_grad_shallow
        )
        return report.loss


def finetune_for_adaptation(
    model: SegModel,
    train: list[Sample],
    adapt_cfg: AdaptationConfig = AdaptationConfig(),
    shift_kinds: tuple[str, ...] = ("combo",),
    epochs: int = 6,
    inner_steps: int = 2,
    lr: float = 1e-4,
    seed: int = 0,
    batch_size: int = 8,
    clean_weight: float = 1.0,
    hold_weight: float = 1.0,
) -> dict:
    """Teach the model to benefit from its own test-time alignment steps.

    For each batch a random appearance shift is applied, the adaptation
    parameter subset takes inner_steps plain gradient-descent steps on the
    alignment loss (exactly what the test-time driver will do), and the
    supervised loss of the post-step prediction is optimized through those
    steps. Two control terms keep the comparison honest: a clean-image anchor
    protects in-domain behavior, and a hold term distills the pre-step
    predictions on shifted images to the entry checkpoint, so zero-shot
    accuracy under shift stays at its pre-finetune level instead of silently
    absorbing the robustness that adaptation is supposed to provide.
    Updates the model in place and returns a metadata dict.
    """
    if not train:
        raise ValueError("finetune_for_adaptation needs a nonempty training set")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    for kind in shift_kinds:
        if kind not in {"contrast", "blur", "noise", "invert", "combo"}:
            raise ValueError(f"unknown shift kind {kind!r}")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    order_gen = torch.Generator().manual_seed(seed)
    teacher_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    teacher = SegModel(model.cfg)
    teacher.load_state_dict(teacher_state)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    align = _AlignmentObjective(model, adapt_cfg)
    sel_names = None

    images = torch.stack([s.image for s in train])
    gts = torch.stack([s.mask for s in train])[:, None].to(torch.float32)
    prompts = [PromptSet(boxes=[minimal_box(s.mask.numpy())]) for s in train]

    post_curve: list[float] = []
    anchor_curve: list[float] = []
    hold_curve: list[float] = []
    inner_curve: list[float] = []
    skipped = 0
    for _ in range(epochs):
        order = torch.randperm(len(train), generator=order_gen)
        post_losses = []
        anchor_losses = []
        hold_losses = []
        inner_first = []
        for i in range(0, len(train), batch_size):
            idx = order[i : i + batch_size].tolist()
            spec = ShiftSpec(
                kind=shift_kinds[int(rng.integers(len(shift_kinds)))],
                severity=float(rng.uniform(0.5, 1.0)),
                seed=int(rng.integers(2**31)),
            )
            shifted = apply_shift([train[j] for j in idx], spec)
            imgs_s = torch.stack([s.image for s in shifted])
            batch_gts = gts[idx]
            batch_prompts = [prompts[j] for j in idx]

            params = dict(model.named_parameters())
            if sel_names is None:
                wanted = _selector_prefixes(model.cfg.depth, adapt_cfg.param_selector)
                sel_names = [n for n in params if n.startswith(wanted)]

            overrides: dict[str, torch.Tensor] = {}
            for _step in range(inner_steps):
                inner_loss = functional_call(
                    align,
                    {"model." + n: v for n, v in overrides.items()},
                    (imgs_s, batch_prompts),
                )
                if _step == 0:
                    inner_first.append(float(inner_loss.detach()))
                if not (torch.isfinite(inner_loss) and inner_loss.requires_grad):
                    break
                current = [overrides.get(n, params[n]) for n in sel_names]
                grads = torch.autograd.grad(
                    inner_loss, current, create_graph=True, allow_unused=True
                )
                overrides = dict(overrides)
                for n, cur, g in zip(sel_names, current, grads):
                    if g is not None:
                        overrides[n] = cur - adapt_cfg.lr * g

            logits_post, _ = functional_call(model, overrides, (imgs_s, batch_prompts))
            post_loss = supervised_loss(logits_post, batch_gts)
            logits_pre, _ = model.forward(imgs_s, batch_prompts)
            with torch.no_grad():
                teacher_logits, _ = teacher.forward(imgs_s, batch_prompts)
            hold_loss = torch.nn.functional.mse_loss(
                torch.sigmoid(logits_pre), torch.sigmoid(teacher_logits)
            )
            logits_clean, _ = model.forward(images[idx], batch_prompts)
            anchor_loss = supervised_loss(logits_clean, batch_gts)
            total = post_loss + clean_weight * anchor_loss + hold_weight * hold_loss
            if not torch.isfinite(total):
                skipped += 1
                continue
            opt.zero_grad()
            total.backward()
            opt.step()
            post_losses.append(float(post_loss.detach()))
            anchor_losses.append(float(anchor_loss.detach()))
            hold_losses.append(float(hold_loss.detach()))
        if post_losses:
            post_curve.append(sum(post_losses) / len(post_losses))
            anchor_curve.append(sum(anchor_losses) / len(anchor_losses))
            hold_curve.append(sum(hold_losses) / len(hold_losses))
            inner_curve.append(sum(inner_first) / max(len(inner_first), 1))
    model.eval()
    return {
        "epochs": epochs,
        "inner_steps": inner_steps,
        "inner_lr": adapt_cfg.lr,
        "param_selector": adapt_cfg.param_selector,
        "shift_kinds": list(shift_kinds),
        "lr": lr,
        "seed": seed,
        "clean_weight": clean_weight,
        "hold_weight": hold_weight,
        "post_step_loss_curve": post_curve,
        "anchor_loss_curve": anchor_curve,
        "hold_loss_curve": hold_curve,
        "alignment_loss_curve": inner_curve,
        "skipped_batches": skipped,
    }


def sample_record(
    sample: Sample,
    result: SegmentationResult,
    trace: AdaptationTrace | None = None,
    mode: str = "adapt",
) -> dict:
    """One JSON-ready record for a sample's outcome."""
    pred = result.mask[0, 0].cpu().numpy()
    gt = sample.mask.numpy()
    wall = trace.wall_time_ms if trace is not None else result.wall_time_ms
    return {
        "sample_id": sample.sample_id,
        "dice": dice_metric(pred, gt),
        "miou": miou_metric(pred, gt),
        "gate_passed": bool(trace.gate_passed) if trace is not None else True,
        "steps_taken": int(trace.steps_taken) if trace is not None else 0,
        "per_step_loss": list(trace.per_step_loss) if trace is not None else [],
        "wall_time_ms": float(wall),
        "mode": mode,
    }
