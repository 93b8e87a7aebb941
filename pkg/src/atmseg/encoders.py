"""Visual pyramid encoders and text encoders.

Feature maps are channels-first torch tensors: stage ``i`` of a pyramid has
shape ``(B, C_i, H / 2**i, W / 2**i)`` for ``i`` in 0..5, where stage 0 is the
full-resolution stem that feeds the last skip connection.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

N_STAGES = 5


class ShapeError(ValueError):
    pass


@dataclass
class EncoderConfig:
    visual_widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    stem_width: int = 16
    text_width: int = 64
    image_size: int = 96
    backend: str = "tiny"  # tiny | external
    text_seed: int = 0
    # external backends
    swin_feature_size: int = 24
    text_model: str = "emilyalsentzer/Bio_ClinicalBERT"
    freeze_text: bool = True

    def validate(self) -> None:
        if len(self.visual_widths) != N_STAGES:
            raise ValueError(f"need {N_STAGES} visual widths, got {len(self.visual_widths)}")
        if min(self.visual_widths) <= 0 or self.stem_width <= 0 or self.text_width <= 0:
            raise ValueError("widths must be positive")
        if self.image_size % 2**N_STAGES:
            raise ShapeError(f"image_size {self.image_size} is not divisible by {2**N_STAGES}")
        if self.backend not in ("tiny", "external"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @property
    def widths(self) -> list[int]:
        """``[C_0, C_1, ..., C_5]``."""
        return [self.stem_width, *self.visual_widths]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["visual_widths"] = list(self.visual_widths)
        return d


@dataclass
class FeaturePyramid:
    stages: list[torch.Tensor]  # index i -> f_v^i

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.stages[i]

    def __len__(self) -> int:
        return len(self.stages)


@dataclass
class TextEmbedding:
    tokens: torch.Tensor  # (L, C)
    source_text: str = field(default="", repr=False)

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


def _check_input(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected a (B, 1, H, W) image batch, got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % 2**N_STAGES or w % 2**N_STAGES:
        raise ShapeError(f"image size {h}x{w} is not divisible by {2**N_STAGES}")


def _conv_block(cin: int, cout: int) -> list[nn.Module]:
    conv = nn.Conv2d(cin, cout, 3, padding=1)
    nn.init.zeros_(conv.bias)
    return [conv, nn.GroupNorm(min(8, cout), cout), nn.ReLU(inplace=True)]


class TinyVisualEncoder(nn.Module):
    """Stem plus five (conv, norm, ReLU, 2x average-pool) blocks."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        widths = config.widths
        self.stem = nn.Sequential(*_conv_block(1, widths[0]))
        self.blocks = nn.ModuleList(
            nn.Sequential(*_conv_block(widths[i - 1], widths[i]), nn.AvgPool2d(2))
            for i in range(1, N_STAGES + 1)
        )

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        _check_input(x)
        feats = [self.stem(x)]
        for block in self.blocks:
            feats.append(block(feats[-1]))
        return FeaturePyramid(feats)


class SwinVisualEncoder(nn.Module):
    """Adapter around MONAI's 2-D hierarchical Swin transformer (the encoder
    half of Swin UNETR). Each of its five stages is mapped to the configured
    width with a 1x1 convolution; a conv stem provides stage 0."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        try:
            from monai.networks.nets.swin_unetr import SwinTransformer
        except ImportError as exc:  # pragma: no cover - depends on the environment
            raise ImportError("the external visual backend needs `pip install monai`") from exc
        fs = config.swin_feature_size
        self.swin = SwinTransformer(
            in_chans=1,
            embed_dim=fs,
            window_size=(7, 7),
            patch_size=(2, 2),
            depths=(2, 2, 2, 2),
            num_heads=(3, 6, 12, 24),
            spatial_dims=2,
        )
        widths = config.widths
        self.stem = nn.Sequential(*_conv_block(1, widths[0]))
        self.bridges = nn.ModuleList(
            nn.Conv2d(fs * 2**k, widths[k + 1], 1) for k in range(N_STAGES)
        )

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        _check_input(x)
        outs = self.swin(x, normalize=True)
        return FeaturePyramid([self.stem(x)] + [b(o) for b, o in zip(self.bridges, outs)])


def build_visual_encoder(config: EncoderConfig) -> nn.Module:
    config.validate()
    if config.backend == "tiny":
        return TinyVisualEncoder(config)
    return SwinVisualEncoder(config)


def encode_image(image, encoder: nn.Module, config: EncoderConfig) -> FeaturePyramid:
    """Encode one 2-D image of size ``config.image_size``."""
    arr = torch.as_tensor(np.asarray(image), dtype=next(encoder.parameters()).dtype)
    if arr.shape != (config.image_size, config.image_size):
        raise ShapeError(f"image {tuple(arr.shape)} does not match image_size {config.image_size}")
    return encoder(arr[None, None])


# ---------------------------------------------------------------- text


def sinusoidal_1d(n: int, c: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Standard ``sin``/``cos`` positional table of shape ``(n, c)``."""
    pos = torch.arange(n, dtype=torch.float64, device=device)[:, None]
    half = (c + 1) // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=device) * 2 / c)
    ang = pos * freq[None, :]
    pe = torch.zeros(n, c, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(ang)[:, : (c + 1) // 2]
    pe[:, 1::2] = torch.cos(ang)[:, : c // 2]
    return pe.to(dtype)


def tokenize(text: str) -> list[str]:
    return text.split()


class HashTextEncoder:
    """Parameter-free stand-in for a pretrained language model.

    Every whitespace token maps to a fixed Gaussian vector seeded by a hash of
    the token; a sinusoidal position table is added on top. No network access,
    bit-identical across runs and processes.
    """

    trainable = False

    def __init__(self, width: int = 64, seed: int = 0, dtype=torch.float32):
        self.width = width
        self.seed = seed
        self.dtype = dtype
        self._table: dict[str, np.ndarray] = {}
        self._cache: dict[str, TextEmbedding] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._table.get(token)
        if vec is None:
            digest = hashlib.blake2b(f"{self.seed}\x00{token}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.width) / math.sqrt(self.width) * 4.0
            self._table[token] = vec
        return vec

    def encode(self, prompt: str) -> TextEmbedding:
        if not prompt or not prompt.strip():
            raise ValueError("cannot encode an empty prompt")
        hit = self._cache.get(prompt)
        if hit is not None:
            return hit
        toks = tokenize(prompt)
        emb = torch.from_numpy(np.stack([self.token_vector(t) for t in toks]))
        emb = emb + 0.5 * sinusoidal_1d(len(toks), self.width, dtype=torch.float64)
        out = TextEmbedding(emb.to(self.dtype), prompt)
        self._cache[prompt] = out
        return out

    def to(self, dtype) -> "HashTextEncoder":
        if dtype != self.dtype:
            self.dtype = dtype
            self._cache.clear()
        return self

    def parameters(self):
        return iter(())


class PretrainedTextEncoder(nn.Module):
    """Adapter for a Hugging Face encoder (Bio-ClinicalBERT by default) with
    a learned linear bridge from its hidden size to ``width``."""

    trainable = True

    def __init__(self, model_name_or_path: str, width: int, freeze: bool = True, model=None, tokenizer=None):
        super().__init__()
        if model is None or tokenizer is None:
            try:
                from transformers import AutoModel, AutoTokenizer
            except ImportError as exc:  # pragma: no cover
                raise ImportError("the external text backend needs `pip install transformers`") from exc
            tokenizer = tokenizer or AutoTokenizer.from_pretrained(model_name_or_path)
            model = model or AutoModel.from_pretrained(model_name_or_path)
        self.tokenizer = tokenizer
        self.model = model
        self.freeze = freeze
        if freeze:
            self.model.requires_grad_(False)
            self.model.eval()
        self.bridge = nn.Linear(model.config.hidden_size, width)
        self.width = width

    def encode(self, prompt: str) -> TextEmbedding:
        if not prompt or not prompt.strip():
            raise ValueError("cannot encode an empty prompt")
        batch = self.tokenizer(prompt, return_tensors="pt", truncation=True)
        with torch.set_grad_enabled(not self.freeze and torch.is_grad_enabled()):
            hidden = self.model(**batch).last_hidden_state[0]
        hidden = hidden.to(self.bridge.weight.dtype)
        return TextEmbedding(self.bridge(hidden), prompt)


def build_text_encoder(config: EncoderConfig, dtype=torch.float32):
    if config.backend == "tiny":
        return HashTextEncoder(config.text_width, config.text_seed, dtype)
    return PretrainedTextEncoder(config.text_model, config.text_width, config.freeze_text)


def encode_text(prompt: str, encoder) -> TextEmbedding:
    return encoder.encode(prompt)


def stack_embeddings(embs: Sequence[TextEmbedding], max_tokens: int) -> torch.Tensor:
    """Zero-pad (or truncate) a list of ``(L_b, C)`` embeddings to
    ``(B, max_tokens, C)``."""
    width = embs[0].tokens.shape[1]
    out = embs[0].tokens.new_zeros(len(embs), max_tokens, width)
    for b, e in enumerate(embs):
        if e.tokens.shape[1] != width:
            raise ShapeError("text embeddings of different widths in one batch")
        n = min(e.length, max_tokens)
        out[b, :n] = e.tokens[:n]
    return out
