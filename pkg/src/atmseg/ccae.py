"""Class-wise channel-level contrastive alignment and the total objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ShapeError, TextEmbedding


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    include_background: bool = True
    lambda1: float = 1.0
    lambda2: float = 0.2
    bridge: str = "linear"  # linear | direct

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.bridge not in ("linear", "direct"):
            raise ValueError(f"unknown bridge {self.bridge!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def l2_rows(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def build_text_channels(embeddings: Sequence[TextEmbedding | torch.Tensor]) -> torch.Tensor:
    """Mean-pool each class prompt over its tokens, stack, L2-normalize rows.
    Returns ``(S, C)``."""
    rows = []
    width = None
    for e in embeddings:
        t = e.tokens if isinstance(e, TextEmbedding) else e
        if width is None:
            width = t.shape[-1]
        elif t.shape[-1] != width:
            raise ShapeError(f"channel prompt widths differ: {width} vs {t.shape[-1]}")
        rows.append(t.mean(dim=0))
    return l2_rows(torch.stack(rows))


class VisualChannelBridge(nn.Module):
    """Pools the decoder feature map once per class, weighting pixels by the
    class probability, then maps the pooled ``C_0`` vectors to the text width
    (``linear``) or uses them as they are (``direct``, needs ``C_0 == C``)."""

    def __init__(self, feature_width: int, text_width: int, mode: str = "linear"):
        super().__init__()
        self.mode = mode
        if mode == "linear":
            self.proj = nn.Linear(feature_width, text_width)
        elif mode == "direct":
            if feature_width != text_width:
                raise ShapeError(
                    f"direct bridge needs decoder width {feature_width} == text width {text_width}"
                )
            self.proj = nn.Identity()
        else:
            raise ValueError(f"unknown bridge {mode!r}")

    @staticmethod
    def class_mass(probs: torch.Tensor) -> torch.Tensor:
        """Global average pool of the probability map, ``(B, K)``."""
        return probs.mean(dim=(2, 3))

    def forward(self, probs: torch.Tensor, features: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
        # probs (B, K, H, W), features (B, C_0, H, W) -> (B, K, C) unit rows
        hw = probs.shape[2] * probs.shape[3]
        pooled = torch.einsum("bkhw,bchw->bkc", probs, features) / hw
        pooled = pooled / (self.class_mass(probs)[..., None] + eps)
        return l2_rows(self.proj(pooled))


def ftc_loss(visual: torch.Tensor, text: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Symmetric InfoNCE between matching class rows.

    ``visual`` and ``text`` are ``(S, C)`` or ``(B, S, C)`` with unit rows;
    row ``i`` of one side is the positive for row ``i`` of the other and all
    other rows are negatives. Batched inputs are averaged over the batch.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if visual.dim() == 2:
        visual, text = visual[None], text[None]
    if text.shape[0] == 1 and visual.shape[0] > 1:
        text = text.expand(visual.shape[0], -1, -1)
    if visual.shape != text.shape:
        raise ShapeError(f"visual {tuple(visual.shape)} vs text {tuple(text.shape)}")
    b, s, _ = visual.shape
    logits = visual @ text.transpose(1, 2) / temperature  # (B, S, S)
    target = torch.arange(s, device=visual.device).repeat(b)
    v2t = F.cross_entropy(logits.reshape(b * s, s), target, reduction="sum")
    t2v = F.cross_entropy(logits.transpose(1, 2).reshape(b * s, s), target, reduction="sum")
    return (v2t + t2v) / (2 * s * b)


def select_channels(x: torch.Tensor, include_background: bool) -> torch.Tensor:
    return x if include_background else x[..., 1:, :]


def total_loss(dicefocal, ftc, config: ContrastiveConfig):
    if ftc is None:
        return config.lambda1 * dicefocal
    return config.lambda1 * dicefocal + config.lambda2 * ftc
