"""Full segmentation network: visual encoder, fusion decoder and the
channel-level contrastive head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .ccae import ContrastiveConfig, VisualChannelBridge, build_text_channels, ftc_loss, select_channels, total_loss
from .encoders import EncoderConfig, build_text_encoder, build_visual_encoder, stack_embeddings
from .hasf import HasfConfig, HasfDecoder, dice_focal_terms


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (B, K, H, W)
    probs: torch.Tensor  # softmax over K
    features: torch.Tensor  # (B, C_0, H, W) decoder map before the head


class ATMNet(nn.Module):
    def __init__(
        self,
        num_classes: int,
        encoder: EncoderConfig | None = None,
        hasf: HasfConfig | None = None,
        contrastive: ContrastiveConfig | None = None,
        text_encoder=None,
    ):
        super().__init__()
        self.encoder_config = encoder = encoder or EncoderConfig()
        self.hasf_config = hasf = hasf or HasfConfig()
        self.contrastive_config = contrastive = contrastive or ContrastiveConfig()
        encoder.validate()
        contrastive.validate()
        self.num_classes = num_classes
        self.visual = build_visual_encoder(encoder)
        self.decoder = HasfDecoder(encoder.widths, encoder.text_width, num_classes, hasf)
        self.bridge = VisualChannelBridge(encoder.stem_width, encoder.text_width, contrastive.bridge)
        text_encoder = text_encoder if text_encoder is not None else build_text_encoder(encoder)
        if isinstance(text_encoder, nn.Module):
            self.text_encoder = text_encoder
        else:
            # parameter-free encoders stay out of the state dict
            object.__setattr__(self, "text_encoder", text_encoder)
        self._channel_cache: dict[tuple[str, ...], torch.Tensor] = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.head.weight.dtype

    def encode_holistic(self, prompts: Sequence[str]):
        embs = [self.text_encoder.encode(p) for p in prompts]
        lengths = torch.tensor([e.length for e in embs])
        text = stack_embeddings(embs, self.hasf_config.max_text_tokens).to(self.dtype)
        return text, lengths

    def forward(self, images: torch.Tensor, holistic: Sequence[str] | None = None) -> ModelOutput:
        """``holistic=None`` runs the text-free path: no text is encoded and
        the cross-attention is skipped."""
        pyramid = self.visual(images)
        text = lengths = None
        if holistic is not None:
            text, lengths = self.encode_holistic(holistic)
        logits, features = self.decoder(pyramid, text, lengths)
        return ModelOutput(logits, torch.softmax(logits, dim=1), features)

    def text_channels(self, prompts: Sequence[str]) -> torch.Tensor:
        key = tuple(prompts)
        cacheable = not getattr(self.text_encoder, "trainable", False)
        if cacheable and key in self._channel_cache:
            return self._channel_cache[key]
        rows = build_text_channels([self.text_encoder.encode(p) for p in prompts]).to(self.dtype)
        if cacheable:
            self._channel_cache[key] = rows
        return rows

    def losses(
        self,
        out: ModelOutput,
        target: torch.Tensor,
        channel_prompts: Sequence[Sequence[str]] | None = None,
        **focal_kw,
    ) -> dict[str, torch.Tensor]:
        """Dice, Focal, optional contrastive term and the weighted total.
        ``channel_prompts=None`` leaves the contrastive term out."""
        cfg = self.contrastive_config
        dice, focal = dice_focal_terms(out.probs, target, **focal_kw)
        parts = {"dice": dice, "focal": focal}
        ftc = None
        if channel_prompts is not None:
            text = torch.stack([self.text_channels(p) for p in channel_prompts])
            visual = self.bridge(out.probs, out.features)
            ftc = ftc_loss(
                select_channels(visual, cfg.include_background),
                select_channels(text, cfg.include_background),
                cfg.temperature,
            )
            parts["ftc"] = ftc
        parts["total"] = total_loss(dice + focal, ftc, cfg)
        return parts

    def train(self, mode: bool = True):
        self._channel_cache.clear()
        return super().train(mode)

    def _apply(self, fn, *args, **kwargs):
        self._channel_cache.clear()
        out = super()._apply(fn, *args, **kwargs)
        if hasattr(self.text_encoder, "to") and not isinstance(self.text_encoder, nn.Module):
            self.text_encoder.to(self.dtype)
        return out

    @torch.no_grad()
    def predict(self, images: torch.Tensor, holistic: Sequence[str] | None = None) -> torch.Tensor:
        return self.forward(images, holistic).logits.argmax(dim=1)
