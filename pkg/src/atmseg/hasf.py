"""Holistic text/visual fusion decoder and the Dice + Focal segmentation loss.

At each decoder stage the visual tokens are refined by self-attention,
receive the projected holistic text tokens through a gated cross-attention,
and are upsampled and merged with the encoder skip feature.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import N_STAGES, FeaturePyramid, ShapeError, sinusoidal_1d


@dataclass
class HasfConfig:
    num_heads: int = 4
    num_text_tokens: int = 8  # M
    max_text_tokens: int = 160  # holistic prompts are padded/truncated to this
    alpha_init: float = 0.0
    shared_alpha: bool = False
    norm: str = "layer"  # layer | none
    text_pe: bool = True

    def validate(self, widths) -> None:
        if self.num_text_tokens < 1:
            raise ValueError("num_text_tokens must be >= 1")
        for c in widths:
            if c % self.num_heads:
                raise ValueError(f"num_heads={self.num_heads} does not divide width {c}")
            if c % 4:
                raise ValueError(f"stage width {c} must be a multiple of 4 for 2-D positional encoding")
        if self.norm not in ("layer", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_2d(h: int, w: int, c: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Row/column sine tables concatenated on channels, flattened row-major to ``(h*w, c)``."""
    half = c // 2
    py = sinusoidal_1d(h, half, dtype, device)  # (h, c/2)
    px = sinusoidal_1d(w, half, dtype, device)  # (w, c/2)
    pe = torch.cat([py[:, None, :].expand(h, w, half), px[None, :, :].expand(h, w, half)], dim=-1)
    return pe.reshape(h * w, c)


def _norm(kind: str, c: int) -> nn.Module:
    return nn.LayerNorm(c) if kind == "layer" else nn.Identity()


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.view(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v, return_weights: bool = False):
        qh, kh, vh = self._split(self.q(q)), self._split(self.k(k)), self._split(self.v(v))
        if return_weights:
            scale = 1.0 / math.sqrt(qh.shape[-1])
            weights = torch.softmax(qh @ kh.transpose(-2, -1) * scale, dim=-1)
            o = weights @ vh
        else:
            o = F.scaled_dot_product_attention(qh, kh, vh)
        b, _, n, d = o.shape
        o = self.out(o.transpose(1, 2).reshape(b, n, self.num_heads * d))
        return (o, weights) if return_weights else o


class TextProjector(nn.Module):
    """Pointwise channel mixing (C -> C_i), a linear map over the token axis
    (max_tokens -> M), then ReLU."""

    def __init__(self, text_width: int, stage_width: int, max_tokens: int, num_tokens: int):
        super().__init__()
        self.max_tokens = max_tokens
        self.channel = nn.Conv1d(text_width, stage_width, 1)
        self.token = nn.Linear(max_tokens, num_tokens)

    def forward(self, g: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        # g: (B, L, C) -> (B, M, C_i)
        x = self.channel(g.transpose(1, 2))  # (B, C_i, L)
        if lengths is not None:
            # padding positions stay zero after the channel bias
            keep = torch.arange(x.shape[-1], device=x.device)[None, :] < lengths[:, None]
            x = x * keep[:, None, :].to(x.dtype)
        if x.shape[-1] < self.max_tokens:
            x = F.pad(x, (0, self.max_tokens - x.shape[-1]))
        elif x.shape[-1] > self.max_tokens:
            x = x[..., : self.max_tokens]
        return F.relu(self.token(x).transpose(1, 2))


class SelfEnhance(nn.Module):
    """``f' = f + Norm(SA(f + PE, f + PE, f))``."""

    def __init__(self, dim: int, num_heads: int, norm: str = "layer"):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm = _norm(norm, dim)

    def forward(self, x: torch.Tensor, pe: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite visual features entering self-attention")
        qk = x + pe
        return x + self.norm(self.attn(qk, qk, x))


class CrossFuse(nn.Module):
    """``f_m = f' + alpha * Norm(CA(f' + PE_v, t + PE_t, t))``."""

    def __init__(self, dim: int, num_heads: int, norm: str = "layer", text_pe: bool = True):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm = _norm(norm, dim)
        self.text_pe = text_pe

    def forward(self, x, pe_v, text, alpha) -> torch.Tensor:
        k = text
        if self.text_pe:
            k = text + sinusoidal_1d(text.shape[1], text.shape[2], text.dtype, text.device)
        return x + alpha * self.norm(self.attn(x + pe_v, k, text))


class DecodeStep(nn.Module):
    """Bilinear 2x upsample + 1x1 channel map, concatenation with the skip
    feature, 3x3 conv and ReLU."""

    def __init__(self, stage: int, in_width: int, out_width: int):
        super().__init__()
        self.stage = stage
        self.reduce = nn.Conv2d(in_width, out_width, 1)
        self.conv = nn.Conv2d(2 * out_width, out_width, 3, padding=1)

    def forward(self, fused: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        b, _, h, w = fused.shape
        if skip.shape[0] != b or skip.shape[-2:] != (2 * h, 2 * w) or skip.shape[1] != self.reduce.out_channels:
            raise ShapeError(
                f"stage {self.stage}: fused {tuple(fused.shape)} cannot merge with skip {tuple(skip.shape)}"
            )
        up = F.interpolate(fused, scale_factor=2, mode="bilinear", align_corners=False)
        up = self.reduce(up)
        return F.relu(self.conv(torch.cat([up, skip], dim=1)))


class HasfDecoder(nn.Module):
    """Runs stages 5..1 of fusion and decoding, then a 1x1 head to the class
    channels. ``text=None`` skips the cross-attention entirely (the
    text-free path)."""

    def __init__(self, widths, text_width: int, num_classes: int, config: HasfConfig):
        super().__init__()
        widths = list(widths)  # [C_0, ..., C_5]
        config.validate(widths[1:])
        self.config = config
        self.widths = widths
        self.self_attn = nn.ModuleList(SelfEnhance(widths[i], config.num_heads, config.norm) for i in range(1, 6))
        self.cross_attn = nn.ModuleList(
            CrossFuse(widths[i], config.num_heads, config.norm, config.text_pe) for i in range(1, 6)
        )
        self.projectors = nn.ModuleList(
            TextProjector(text_width, widths[i], config.max_text_tokens, config.num_text_tokens)
            for i in range(1, 6)
        )
        self.decode = nn.ModuleList(DecodeStep(i, widths[i], widths[i - 1]) for i in range(1, 6))
        n_alpha = 1 if config.shared_alpha else N_STAGES
        self.alpha = nn.Parameter(torch.full((n_alpha,), float(config.alpha_init)))
        self.head = nn.Conv2d(widths[0], num_classes, 1)

    def stage_alpha(self, i: int) -> torch.Tensor:
        return self.alpha[0] if self.config.shared_alpha else self.alpha[i - 1]

    def forward(self, pyramid: FeaturePyramid, text: torch.Tensor | None = None, text_lengths=None):
        """Returns ``(logits, features)`` where ``features`` is the last
        decoder map ``f_v^0`` before the class head."""
        if len(pyramid) != N_STAGES + 1:
            raise ShapeError(f"pyramid needs {N_STAGES + 1} stages, got {len(pyramid)}")
        x = pyramid[N_STAGES]
        for i in range(N_STAGES, 0, -1):
            b, c, h, w = x.shape
            tokens = x.flatten(2).transpose(1, 2)
            pe = sinusoidal_2d(h, w, c, x.dtype, x.device)
            tokens = self.self_attn[i - 1](tokens, pe)
            if text is not None:
                t = self.projectors[i - 1](text, text_lengths)
                tokens = self.cross_attn[i - 1](tokens, pe, t, self.stage_alpha(i))
            x = tokens.transpose(1, 2).reshape(b, c, h, w)
            x = self.decode[i - 1](x, pyramid[i - 1])
        return self.head(x), x


# ---------------------------------------------------------------- loss


def dice_focal_terms(
    probs: torch.Tensor,
    target: torch.Tensor,
    gamma: float = 2.0,
    alpha: float = 0.25,
    eps: float = 1e-5,
    clamp: float = 1e-7,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft Dice over all class channels and multi-class Focal loss.

    ``probs`` is ``(B, K, H, W)`` and sums to one over ``K``; ``target`` is an
    integer ``(B, H, W)`` label map.
    """
    k = probs.shape[1]
    onehot = F.one_hot(target.long(), k).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(2, 3))
    denom = probs.sum(dim=(2, 3)) + onehot.sum(dim=(2, 3))
    dice = 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()
    p_t = (probs * onehot).sum(dim=1).clamp(clamp, 1.0 - clamp)
    focal = (-alpha * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()
    return dice, focal


def dice_focal_loss(probs, target, **kw) -> torch.Tensor:
    dice, focal = dice_focal_terms(probs, target, **kw)
    return dice + focal
