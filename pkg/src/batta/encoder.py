"""Compact ViT image encoder with per-stage prompt injection hooks.

Twelve blocks grouped into four stages of three; the first two blocks of each
stage use window attention, the third global attention. All blocks keep the
patch-grid resolution, so any pair of block outputs can be compared spatially.
Prompt injection (overlay, embedding-based, or Gaussian heatmap) applies to
the deepest `injection_stages` stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .heatmap import SigmaPolicy, prompt_heatmap
from .prompts import PromptSet

INJECTION_STRATEGIES = (
    "none",
    "overlay",
    "embed_pre_block",
    "embed_post_attn",
    "gaussian_pre_block",
    "gaussian_post_attn",
)

_PRE_BLOCK = ("embed_pre_block", "gaussian_pre_block")
_POST_ATTN = ("embed_post_attn", "gaussian_post_attn")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 12
    blocks_per_stage: int = 3
    window_size: int = 4
    mlp_ratio: float = 4.0
    injection_strategy: str = "none"
    injection_stages: int = 0
    injection_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("patch_size must divide image_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("num_heads must divide embed_dim")
        if self.depth % self.blocks_per_stage != 0:
            raise ValueError("blocks_per_stage must divide depth")
        if self.grid_size % self.window_size != 0:
            raise ValueError("window_size must divide the feature grid side")
        if self.injection_strategy not in INJECTION_STRATEGIES:
            raise ValueError(
                f"unknown injection_strategy {self.injection_strategy!r}; "
                f"expected one of {INJECTION_STRATEGIES}"
            )
        if not 0 <= self.injection_stages <= self.num_stages:
            raise ValueError(
                f"injection_stages must be in 0..{self.num_stages}, got {self.injection_stages}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_stages(self) -> int:
        return self.depth // self.blocks_per_stage

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class EncoderTrace:
    """Every block output (post-injection where applicable), in order."""

    per_block_features: list[torch.Tensor]
    final_features: torch.Tensor = field(init=False)

    def __post_init__(self):
        if not self.per_block_features:
            raise ValueError("empty trace")
        self.final_features = self.per_block_features[-1]


def select_features(trace: EncoderTrace, l_s: int, l_d: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Shallow and deep block outputs for alignment, l_s < l_d."""
    depth = len(trace.per_block_features)
    if not 0 <= l_s < l_d < depth:
        raise ValueError(f"need 0 <= l_s < l_d < {depth}, got ({l_s}, {l_d})")
    return trace.per_block_features[l_s], trace.per_block_features[l_d]


def overlay_prompt(image: torch.Tensor, prompts: PromptSet) -> torch.Tensor:
    """Draw prompts onto a copy of the image at max intensity.

    Boxes get a 1-pixel frame around their half-open extent, points a 3x3
    square. Idempotent for fixed prompts.
    """
    squeeze = image.dim() == 3
    img = image[None] if squeeze else image
    if img.dim() != 4:
        raise ValueError(f"expected (3, S, S) or (B, 3, S, S) image, got {tuple(image.shape)}")
    h, w = img.shape[-2:]
    prompts.validate_bounds((h, w))
    out = img.clone()
    for b in prompts.boxes:
        x0, y0 = int(round(b.x0)), int(round(b.y0))
        x1, y1 = int(round(b.x1)), int(round(b.y1))
        x1 = min(max(x1, x0 + 1), w)
        y1 = min(max(y1, y0 + 1), h)
        out[..., y0, x0:x1] = 1.0
        out[..., y1 - 1, x0:x1] = 1.0
        out[..., y0:y1, x0] = 1.0
        out[..., y0:y1, x1 - 1] = 1.0
    for p in prompts.points:
        cy, cx = int(round(p.y)), int(round(p.x))
        out[..., max(cy - 1, 0) : min(cy + 2, h), max(cx - 1, 0) : min(cx + 2, w)] = 1.0
    return out[0] if squeeze else out


class PatchEmbed(nn.Module):
    """Linear patch projection plus a learned, zero-initialized positional grid."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.proj = nn.Conv2d(3, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(torch.zeros(1, cfg.embed_dim, cfg.grid_size, cfg.grid_size))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x) + self.pos


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, N, C) token sequences
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, -1).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * num_windows, ws*ws, C); ws must divide H and W."""
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_unpartition(windows: torch.Tensor, ws: int, hw: tuple[int, int]) -> torch.Tensor:
    h, w = hw
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.view(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class Block(nn.Module):
    """Pre-norm transformer block; window attention when window_size > 0."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, window_size: int):
        super().__init__()
        self.window_size = window_size
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, inj_post_attn: torch.Tensor | None = None) -> torch.Tensor:
        # x: (B, H, W, C); optional injection lands after the attention
        # sublayer, before the MLP sublayer
        b, h, w, _ = x.shape
        shortcut = x
        y = self.norm1(x)
        if self.window_size > 0:
            y = window_partition(y, self.window_size)
            y = self.attn(y)
            y = window_unpartition(y, self.window_size, (h, w))
        else:
            y = self.attn(y.reshape(b, h * w, -1)).reshape(b, h, w, -1)
        x = shortcut + y
        if inj_post_attn is not None:
            x = x + inj_post_attn
        return x + self.mlp(self.norm2(x))


class ViTEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, sigma_policy: SigmaPolicy | None = None):
        super().__init__()
        self.cfg = cfg
        self.sigma_policy = sigma_policy or SigmaPolicy()
        torch.manual_seed(cfg.seed)
        self.patch_embed = PatchEmbed(cfg)
        blocks = []
        for i in range(cfg.depth):
            is_global = (i % cfg.blocks_per_stage) == cfg.blocks_per_stage - 1
            blocks.append(
                Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, 0 if is_global else cfg.window_size)
            )
        self.blocks = nn.ModuleList(blocks)
        # per-prompt-type embeddings for the embedding-based variants;
        # zero init makes them reduce to strategy "none" until trained
        self.prompt_type_embed = nn.Parameter(torch.zeros(2, cfg.embed_dim))

    # -- injection helpers -------------------------------------------------

    def injection_active(self, block_index: int) -> bool:
        cfg = self.cfg
        if cfg.injection_strategy == "none" or cfg.injection_stages == 0:
            return False
        stage = block_index // cfg.blocks_per_stage
        return stage >= cfg.num_stages - cfg.injection_stages

    def _prompt_list(self, prompts, batch: int) -> list[PromptSet]:
        if isinstance(prompts, PromptSet):
            return [prompts] * batch
        prompts = list(prompts)
        if len(prompts) != batch:
            raise ValueError(f"got {len(prompts)} prompt sets for batch of {batch}")
        return prompts

    def build_injection(self, prompts, batch: int) -> torch.Tensor | None:
        """Per-sample injection tensor for the configured strategy.

        Gaussian variants: (B, 1, H, W) normalized heatmaps. Embedding
        variants: (B, C, H, W), the learned type embedding placed at each
        prompt's center cell.
        """
        cfg = self.cfg
        if cfg.injection_strategy in ("none", "overlay") or cfg.injection_stages == 0:
            return None
        if prompts is None:
            raise ValueError("prompts are required when an injection strategy is active")
        plist = self._prompt_list(prompts, batch)
        g = cfg.grid_size
        size = (cfg.image_size, cfg.image_size)
        device = self.patch_embed.pos.device
        dtype = self.patch_embed.pos.dtype

        if cfg.injection_strategy in ("gaussian_pre_block", "gaussian_post_attn"):
            maps = [prompt_heatmap(p, size, (g, g), self.sigma_policy) for p in plist]
            return torch.as_tensor(np.stack(maps), dtype=dtype, device=device)[:, None]

        # embedding-based: indicator of prompt centers, outer product with the
        # learned type embedding (0 = point, 1 = box)
        out = torch.zeros(batch, cfg.embed_dim, g, g, dtype=dtype, device=device)
        scale = g / cfg.image_size
        for b, p in enumerate(plist):
            if p.empty:
                raise ValueError("empty prompt set with an active injection strategy")
            p.validate_bounds(size)
            for pt in p.points:
                j = min(int(round(pt.x * scale)), g - 1)
                i = min(int(round(pt.y * scale)), g - 1)
                out[b, :, i, j] = out[b, :, i, j] + self.prompt_type_embed[0]
            for bx in p.boxes:
                cx, cy = bx.center
                j = min(int(round(cx * scale)), g - 1)
                i = min(int(round(cy * scale)), g - 1)
                out[b, :, i, j] = out[b, :, i, j] + self.prompt_type_embed[1]
        return out

    # -- forward -----------------------------------------------------------

    def block_forward(
        self, feature: torch.Tensor, block_index: int, heatmap: torch.Tensor | None = None
    ) -> torch.Tensor:
        """One block on a (B, C, H, W) feature map, injecting when active.

        `heatmap` is the broadcastable injection grid (1 or C channels); it is
        ignored unless this block's stage is injection-active.
        """
        cfg = self.cfg
        if not 0 <= block_index < cfg.depth:
            raise ValueError(f"block_index {block_index} out of range")
        inj = None
        if heatmap is not None and self.injection_active(block_index):
            if heatmap.shape[-2:] != feature.shape[-2:]:
                raise ValueError(
                    f"injection spatial shape {tuple(heatmap.shape[-2:])} "
                    f"!= feature {tuple(feature.shape[-2:])}"
                )
            inj = cfg.injection_gain * heatmap
        if inj is not None and cfg.injection_strategy in _PRE_BLOCK:
            feature = feature + inj
        x = feature.permute(0, 2, 3, 1)
        inj_post = None
        if inj is not None and cfg.injection_strategy in _POST_ATTN:
            inj_post = inj.permute(0, 2, 3, 1)
        x = self.blocks[block_index](x, inj_post_attn=inj_post)
        return x.permute(0, 3, 1, 2)

    def encode(self, image: torch.Tensor, prompts=None) -> EncoderTrace:
        """Run patch embedding and all blocks, recording every block output."""
        cfg = self.cfg
        squeeze = image.dim() == 3
        img = image[None] if squeeze else image
        if img.shape[-1] != cfg.image_size or img.shape[-2] != cfg.image_size:
            raise ValueError(
                f"expected {cfg.image_size}x{cfg.image_size} input, got {tuple(img.shape[-2:])}"
            )
        if cfg.injection_strategy == "overlay" and cfg.injection_stages > 0:
            if prompts is None:
                raise ValueError("prompts are required when an injection strategy is active")
            plist = self._prompt_list(prompts, img.shape[0])
            img = torch.stack([overlay_prompt(img[b], plist[b]) for b in range(img.shape[0])])
        inj = self.build_injection(prompts, img.shape[0])

        x = self.patch_embed(img)
        feats: list[torch.Tensor] = []
        for i in range(cfg.depth):
            x = self.block_forward(x, i, heatmap=inj)
            # the network output itself carries the additive injection too;
            # for stacked blocks that addition is the next block's input-side
            # one, so only the final block needs it explicitly
            if (
                i == cfg.depth - 1
                and inj is not None
                and cfg.injection_strategy in _PRE_BLOCK
                and self.injection_active(i)
            ):
                x = x + cfg.injection_gain * inj
            feats.append(x)
        return EncoderTrace(per_block_features=feats)

    def forward(self, image: torch.Tensor, prompts=None) -> EncoderTrace:
        return self.encode(image, prompts)

    def last_block(self) -> Block:
        return self.blocks[-1]
