"""Prompt-conditioned segmentation stack: encoder + prompt encoder + decoder.

The prompt encoder turns points and boxes into sparse tokens (sinusoidal
position code plus a learned type embedding; one token per point, two corner
tokens per box). The decoder runs two token<->grid cross-attention layers,
upsamples back to image resolution in two transposed-conv steps, and scores
each pixel against an MLP projection of the mask token. A confidence head on
the mask token estimates mask quality in [0, 1].
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, minimal_box
from .encoder import EncoderConfig, EncoderTrace, ViTEncoder
from .prompts import PromptSet

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
DICE_SMOOTH = 1.0


@dataclass
class SegmentationResult:
    logits: torch.Tensor  # (B, 1, S, S)
    mask: torch.Tensor  # (B, 1, S, S) bool, exactly logits > 0
    confidence: torch.Tensor  # (B,) in [0, 1]
    wall_time_ms: float = 0.0


class PromptEncoder(nn.Module):
    """Points and boxes to sparse (B, T, C) tokens."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.embed_dim % 4 != 0:
            raise ValueError("embed_dim must be divisible by 4 for the position code")
        self.cfg = cfg
        # 0 = point, 1 = box top-left corner, 2 = box bottom-right corner
        self.type_embed = nn.Embedding(3, cfg.embed_dim)

    def _position_code(self, xy: torch.Tensor) -> torch.Tensor:
        # xy: (T, 2) in [0, 1]; sin/cos at octave-spaced frequencies per axis
        quarter = self.cfg.embed_dim // 4
        freqs = (2.0 ** torch.arange(quarter, dtype=xy.dtype, device=xy.device)) * math.pi
        args = xy[:, :, None] * freqs  # (T, 2, quarter)
        code = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)  # (T, 2, 2q)
        return code.reshape(xy.shape[0], -1)

    def encode_one(self, prompts: PromptSet) -> torch.Tensor:
        if prompts.empty:
            raise ValueError("cannot encode an empty prompt set")
        s = float(self.cfg.image_size)
        coords = []
        types = []
        for p in prompts.points:
            coords.append((p.x / s, p.y / s))
            types.append(0)
        for b in prompts.boxes:
            coords.append((b.x0 / s, b.y0 / s))
            types.append(1)
            coords.append((b.x1 / s, b.y1 / s))
            types.append(2)
        dev = self.type_embed.weight.device
        dt = self.type_embed.weight.dtype
        xy = torch.tensor(coords, dtype=dt, device=dev)
        idx = torch.tensor(types, dtype=torch.long, device=dev)
        return self._position_code(xy) + self.type_embed(idx)  # (T, C)

    def forward(self, prompts: PromptSet | list[PromptSet]) -> torch.Tensor:
        if isinstance(prompts, PromptSet):
            return self.encode_one(prompts)[None]
        tokens = [self.encode_one(p) for p in prompts]
        t = tokens[0].shape[0]
        if any(tok.shape[0] != t for tok in tokens):
            raise ValueError("batched prompt sets must produce equal token counts")
        return torch.stack(tokens)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor) -> torch.Tensor:
        b, nq, c = q_in.shape
        nk = kv_in.shape[1]
        h = self.num_heads
        q = self.q(q_in).reshape(b, nq, h, -1).transpose(1, 2)
        k = self.k(kv_in).reshape(b, nk, h, -1).transpose(1, 2)
        v = self.v(kv_in).reshape(b, nk, h, -1).transpose(1, 2)
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, c)
        return self.proj(out)


class TwoWayLayer(nn.Module):
    """Token self-attention, tokens -> grid, grid -> tokens, all residual."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.self_attn = CrossAttention(dim, num_heads)
        self.norm_self = nn.LayerNorm(dim)
        self.t2i = CrossAttention(dim, num_heads)
        self.norm_t = nn.LayerNorm(dim)
        self.i2t = CrossAttention(dim, num_heads)
        self.norm_i = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor, grid: torch.Tensor):
        tokens = self.norm_self(tokens + self.self_attn(tokens, tokens))
        tokens = self.norm_t(tokens + self.t2i(tokens, grid))
        grid = self.norm_i(grid + self.i2t(grid, tokens))
        return tokens, grid


class MaskDecoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        dim = cfg.embed_dim
        if cfg.patch_size % 2 != 0:
            raise ValueError("patch_size must be even for two-step upsampling")
        self.cfg = cfg
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.grid_pos = nn.Parameter(torch.zeros(1, dim, cfg.grid_size, cfg.grid_size))
        self.layers = nn.ModuleList([TwoWayLayer(dim, cfg.num_heads) for _ in range(2)])
        s1 = cfg.patch_size // 2
        self.upsample = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 2, kernel_size=s1, stride=s1),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 2, dim // 4, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.hyper = nn.Sequential(
            nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim // 4)
        )
        self.logit_bias = nn.Parameter(torch.zeros(1))
        self.confidence_head = nn.Linear(dim, 1)

    def forward(self, features: torch.Tensor, prompt_tokens: torch.Tensor):
        """(B, C, h, w) features + (B, T, C) tokens -> logits (B, 1, S, S), confidence (B,)."""
        b, c, h, w = features.shape
        if c != self.cfg.embed_dim or h != self.cfg.grid_size or w != self.cfg.grid_size:
            raise ValueError(
                f"feature shape {tuple(features.shape)} does not match decoder config"
            )
        if prompt_tokens.shape[0] != b:
            raise ValueError("prompt token batch does not match feature batch")
        grid = (features + self.grid_pos).flatten(2).transpose(1, 2)  # (B, hw, C)
        tokens = torch.cat([self.mask_token.expand(b, -1, -1), prompt_tokens], dim=1)
        for layer in self.layers:
            tokens, grid = layer(tokens, grid)
        mask_tok = tokens[:, 0]
        pixel = self.upsample(grid.transpose(1, 2).reshape(b, c, h, w))
        logits = torch.einsum("bc,bchw->bhw", self.hyper(mask_tok), pixel)[:, None]
        logits = logits + self.logit_bias
        confidence = torch.sigmoid(self.confidence_head(mask_tok))[:, 0]
        return logits, confidence


class SegModel(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.encoder = ViTEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.decoder = MaskDecoder(cfg)

    # -- forward pieces ----------------------------------------------------

    def encode_image(self, image: torch.Tensor, prompts=None) -> EncoderTrace:
        return self.encoder.encode(image, prompts)

    def encode_prompts(self, prompts) -> torch.Tensor:
        return self.prompt_encoder(prompts)

    def decode_mask(self, features: torch.Tensor, prompt_tokens: torch.Tensor) -> SegmentationResult:
        logits, confidence = self.decoder(features, prompt_tokens)
        return SegmentationResult(logits=logits, mask=logits > 0, confidence=confidence)

    def forward(self, image: torch.Tensor, prompts) -> tuple[torch.Tensor, torch.Tensor]:
        img = image[None] if image.dim() == 3 else image
        trace = self.encode_image(img, prompts)
        tokens = self.encode_prompts(prompts)
        if tokens.shape[0] == 1 and img.shape[0] > 1:
            tokens = tokens.expand(img.shape[0], -1, -1)
        return self.decoder(trace.final_features, tokens)

    @torch.no_grad()
    def segment(self, image: torch.Tensor, prompts: PromptSet, overrides: dict | None = None) -> SegmentationResult:
        """Full prompted forward pass for one image, with wall-clock timing."""
        start = time.perf_counter()
        with self.injection_override(**(overrides or {})):
            logits, confidence = self.forward(image, prompts)
        wall = (time.perf_counter() - start) * 1000.0
        return SegmentationResult(
            logits=logits, mask=logits > 0, confidence=confidence, wall_time_ms=wall
        )

    def segment_many(
        self, images, prompts_list, overrides: dict | None = None
    ) -> list[SegmentationResult]:
        return [self.segment(img, p, overrides) for img, p in zip(images, prompts_list)]

    @contextmanager
    def injection_override(self, **kw):
        """Temporarily replace injection fields of the encoder config."""
        old = self.encoder.cfg
        try:
            if kw:
                self.encoder.cfg = replace(old, **kw)
            yield
        finally:
            self.encoder.cfg = old

    # -- persistence ---------------------------------------------------------

    def save(self, path, meta: dict | None = None):
        return save_checkpoint(path, self.state_dict(), self.cfg.to_dict(), meta)

    @classmethod
    def load(cls, path) -> tuple["SegModel", dict]:
        state, config, meta = load_checkpoint(path)
        model = cls(EncoderConfig.from_dict(config))
        model.load_state_dict(state)
        model.eval()
        return model, meta


# -- losses -----------------------------------------------------------------


def _check_binary(gt: torch.Tensor) -> None:
    if not torch.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth mask must be binary")


def focal_loss(
    logits: torch.Tensor,
    gt: torch.Tensor,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
) -> torch.Tensor:
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(gt.shape)}")
    _check_binary(gt)
    gt = gt.to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * gt + (1 - p) * (1 - gt)
    alpha_t = alpha * gt + (1 - alpha) * (1 - gt)
    return (alpha_t * (1 - p_t) ** gamma * ce).mean()


def dice_loss(probs: torch.Tensor, gt: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    if probs.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(gt.shape)}")
    _check_binary(gt)
    gt = gt.to(probs.dtype)
    flat_p = probs.flatten(1)
    flat_g = gt.flatten(1)
    inter = (flat_p * flat_g).sum(dim=1)
    denom = flat_p.sum(dim=1) + flat_g.sum(dim=1)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def supervised_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Focal plus soft-Dice training objective."""
    return focal_loss(logits, gt) + dice_loss(torch.sigmoid(logits), gt)


# -- toy pretraining ---------------------------------------------------------


def _batch_dice(mask: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    # per-sample hard dice; both-empty counts as 1
    p = mask.flatten(1).to(torch.float64)
    g = gt.flatten(1).to(torch.float64)
    inter = (p * g).sum(dim=1)
    denom = p.sum(dim=1) + g.sum(dim=1)
    out = torch.where(denom > 0, 2.0 * inter / denom.clamp_min(1.0), torch.ones_like(denom))
    return out


@dataclass
class PretrainResult:
    model: SegModel
    meta: dict


def _prep(samples: list[Sample]):
    images = torch.stack([s.image for s in samples])
    gts = torch.stack([s.mask for s in samples])[:, None].to(torch.float32)
    prompts = [PromptSet(boxes=[minimal_box(s.mask.numpy())]) for s in samples]
    return images, gts, prompts


def pretrain(
    train: list[Sample],
    val: list[Sample] | None,
    cfg: EncoderConfig,
    epochs: int = 30,
    lr: float = 1e-4,
    seed: int = 0,
    batch_size: int = 16,
    val_every: int = 5,
) -> PretrainResult:
    """Train the toy stack with minimal-box prompts; keep the best-val weights.

    Training optimizes supervised_loss plus a small confidence regression
    against the detached hard-Dice of each prediction. Validation runs every
    val_every epochs and on the final epoch.
    """
    if not train:
        raise ValueError("pretrain needs a nonempty training set")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if val_every < 1:
        raise ValueError("val_every must be >= 1")
    val = val if val else train

    torch.manual_seed(seed)
    model = SegModel(replace(cfg, seed=seed))
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = torch.Generator().manual_seed(seed)

    train_images, train_gts, train_prompts = _prep(train)
    val_images, val_gts, val_prompts = _prep(val)

    @torch.no_grad()
    def eval_split(images, gts, prompts, chunk: int = 32) -> float:
        was_training = model.training
        model.eval()
        scores = []
        for i in range(0, images.shape[0], chunk):
            logits, _ = model.forward(images[i : i + chunk], prompts[i : i + chunk])
            scores.append(_batch_dice(logits > 0, gts[i : i + chunk]))
        model.train(was_training)
        return float(torch.cat(scores).mean())

    loss_curve: list[float] = []
    val_curve: list[tuple[int, float]] = []
    best_val = -1.0
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_epoch = -1
    steps = 0

    for epoch in range(epochs):
        order = torch.randperm(len(train), generator=rng)
        epoch_losses = []
        for i in range(0, len(train), batch_size):
            idx = order[i : i + batch_size]
            images = train_images[idx]
            gts = train_gts[idx]
            prompts = [train_prompts[j] for j in idx.tolist()]
            logits, confidence = model.forward(images, prompts)
            loss = supervised_loss(logits, gts)
            with torch.no_grad():
                dice_target = _batch_dice(logits > 0, gts).to(confidence.dtype)
            loss = loss + F.mse_loss(confidence, dice_target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
            steps += 1
        loss_curve.append(sum(epoch_losses) / len(epoch_losses))
        if (epoch + 1) % val_every == 0 or epoch == epochs - 1:
            v = eval_split(val_images, val_gts, val_prompts)
            val_curve.append((epoch, v))
            if v > best_val:
                best_val = v
                best_epoch = epoch
                best_state = {k: t.detach().clone() for k, t in model.state_dict().items()}

    if best_epoch >= 0:
        model.load_state_dict(best_state)
    model.eval()
    meta = {
        "seed": seed,
        "epochs": epochs,
        "lr": lr,
        "steps": steps,
        "loss_curve": loss_curve,
        "val_dice_curve": val_curve,
        "best_epoch": best_epoch,
        "best_val_dice": best_val if best_epoch >= 0 else None,
        "final_train_dice": eval_split(train_images, train_gts, train_prompts) if epochs > 0 else None,
    }
    return PretrainResult(model=model, meta=meta)
