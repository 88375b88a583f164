"""Toy dual encoder: conv/transformer image tower, prompted text tower, freezing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

# "A photo of a X X X X street." framed by start/end tokens
VOCAB = ["<pad>", "<sos>", "<eos>", "a", "photo", "of", "street", ".", "X"]
TEMPLATE = ["<sos>", "a", "photo", "of", "a", "X", "X", "X", "X", "street", ".", "<eos>"]
N_CTX = 4


@dataclass
class ImageEncoderConfig:
    family: str = "conv"
    depth: int = 4
    width: int = 32
    patch_size: int = 4
    output_dim: int = 64
    input_size: int = 32
    heads: int = 4

    def __post_init__(self) -> None:
        if self.family not in ("conv", "transformer"):
            raise ValueError(f"unknown image encoder family {self.family!r}")
        if self.output_dim <= 0 or self.depth < 1 or self.width <= 0:
            raise ValueError("depth, width and output_dim must be positive")
        if self.family == "transformer":
            if self.input_size % self.patch_size:
                raise ValueError("input_size must be divisible by patch_size")
            if self.width % self.heads:
                raise ValueError("width must be divisible by heads")


@dataclass
class TextEncoderConfig:
    vocab_size: int = len(VOCAB)
    depth: int = 2
    width: int = 64
    heads: int = 4
    max_tokens: int = len(TEMPLATE)
    output_dim: int = 64

    def __post_init__(self) -> None:
        if self.vocab_size < len(VOCAB):
            raise ValueError(f"vocab_size must be >= {len(VOCAB)}")
        if self.max_tokens < len(TEMPLATE):
            raise ValueError(f"max_tokens must be >= {len(TEMPLATE)}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


def check_tower_dims(img: ImageEncoderConfig, txt: TextEncoderConfig) -> None:
    if img.output_dim != txt.output_dim:
        raise ValueError(f"image output_dim {img.output_dim} != text output_dim {txt.output_dim}")


# --------------------------------------------------------------------------- image towers


# per-channel statistics of the synthetic renders, applied before the first layer
PIXEL_MEAN = (0.5, 0.5, 0.5)
PIXEL_STD = (0.25, 0.25, 0.25)


class ResidualBlock(nn.Module):
    """Pre-activation block; the output stays signed."""

    def __init__(self, width: int, downsample: bool):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.norm2 = nn.GroupNorm(4, width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.downsample = downsample

    def forward(self, x):
        y = self.conv1(F.relu(self.norm1(x)))
        x = x + self.conv2(F.relu(self.norm2(y)))
        return F.avg_pool2d(x, 2) if self.downsample else x


class ConvImageEncoder(nn.Module):
    """Stem conv (layer 0) then residual blocks, global average pooling, linear head."""

    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        self.cfg = cfg
        stem = nn.Sequential(nn.Conv2d(3, cfg.width, 3, padding=1), nn.MaxPool2d(2))
        # halve resolution on every other block while the map stays >= 4 px
        blocks, side = [], cfg.input_size // 2
        for i in range(1, cfg.depth):
            down = i % 2 == 1 and side >= 8
            blocks.append(ResidualBlock(cfg.width, down))
            side = side // 2 if down else side
        self.layers = nn.ModuleList([stem, *blocks])
        self.norm = nn.GroupNorm(4, cfg.width)
        self.head = nn.Linear(cfg.width, cfg.output_dim)
        self.register_buffer("pixel_mean", torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(PIXEL_STD).view(1, 3, 1, 1), persistent=False)

    def embedding_modules(self) -> List[nn.Module]:
        return []

    def forward(self, x):
        x = (x - self.pixel_mean) / self.pixel_std
        for layer in self.layers:
            x = layer(x)
        return self.head(self.norm(x).mean(dim=(2, 3)))


class ViTImageEncoder(nn.Module):
    """Patch transformer; the CLS token output is the image feature."""

    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.grid = cfg.input_size // cfg.patch_size
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.randn(1, 1 + self.grid ** 2, cfg.width) * 0.02)
        self.layers = nn.ModuleList([
            nn.TransformerEncoderLayer(cfg.width, cfg.heads, 2 * cfg.width, dropout=0.0,
                                       batch_first=True, norm_first=True)
            for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.output_dim)

    def embedding_modules(self) -> List[nn.Module]:
        return [self.patch_embed]

    def embedding_parameters(self) -> List[nn.Parameter]:
        return [self.cls_token, self.pos_embed]

    def forward(self, x):
        tokens = self.patch_embed(x)
        gh, gw = tokens.shape[-2:]
        tokens = tokens.flatten(2).transpose(1, 2)
        pe = self.pos_embed
        if (gh, gw) != (self.grid, self.grid):
            pe = interpolate_positional_encoding(pe, (gh, gw), src_grid=(self.grid, self.grid))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        h = torch.cat([cls, tokens], dim=1) + pe
        for layer in self.layers:
            h = layer(h)
        return self.head(self.norm(h[:, 0]))


def build_image_encoder(cfg: ImageEncoderConfig) -> nn.Module:
    return ConvImageEncoder(cfg) if cfg.family == "conv" else ViTImageEncoder(cfg)


def encode_images(encoder: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Feature rows for a (B, 3, H, W) batch; no grad, eval mode."""
    cfg: ImageEncoderConfig = encoder.cfg
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
    if len(images) == 0:
        return torch.zeros(0, cfg.output_dim)
    if cfg.family == "conv" and images.shape[-2:] != (cfg.input_size, cfg.input_size):
        raise ValueError(f"expected {cfg.input_size}px images, got {tuple(images.shape[-2:])}")
    if cfg.family == "transformer" and (images.shape[-1] % cfg.patch_size
                                        or images.shape[-2] % cfg.patch_size):
        raise ValueError(f"image side not divisible by patch size {cfg.patch_size}")
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        out = torch.cat([encoder(images[i:i + batch_size])
                         for i in range(0, len(images), batch_size)])
    encoder.train(was_training)
    return out


def interpolate_positional_encoding(pe: torch.Tensor, new_grid: Tuple[int, int],
                                    src_grid: Optional[Tuple[int, int]] = None,
                                    num_prefix: int = 1) -> torch.Tensor:
    """Bilinearly resample a (1, prefix + H*W, C) positional table onto ``new_grid``.

    Prefix (CLS) rows are copied unchanged. ``src_grid`` may be omitted only for a
    square source grid.
    """
    prefix, grid = pe[:, :num_prefix], pe[:, num_prefix:]
    n = grid.shape[1]
    if src_grid is None:
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"{n} grid tokens is not a square grid; pass src_grid")
        src_grid = (side, side)
    if src_grid[0] * src_grid[1] != n or min(*src_grid, *new_grid) <= 0:
        raise ValueError(f"bad grids: source {src_grid} for {n} tokens, target {new_grid}")
    if tuple(new_grid) == tuple(src_grid):
        return pe
    c = grid.shape[-1]
    grid = grid.reshape(1, src_grid[0], src_grid[1], c).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=tuple(new_grid), mode="bilinear", align_corners=False)
    grid = grid.permute(0, 2, 3, 1).reshape(1, new_grid[0] * new_grid[1], c)
    return torch.cat([prefix, grid], dim=1)


# --------------------------------------------------------------------------- text tower


class TextEncoder(nn.Module):
    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_tokens, cfg.width) * 0.01)
        self.layers = nn.ModuleList([
            nn.TransformerEncoderLayer(cfg.width, cfg.heads, 2 * cfg.width, dropout=0.0,
                                       batch_first=True, norm_first=True)
            for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.output_dim, bias=False)
        self.register_buffer("template_ids", torch.tensor([VOCAB.index(t) for t in TEMPLATE]),
                             persistent=False)
        self.ctx_slots = [i for i, t in enumerate(TEMPLATE) if t == "X"]
        self.eos_index = TEMPLATE.index("<eos>")

    def forward(self, token_embeddings: torch.Tensor) -> torch.Tensor:
        t = token_embeddings.shape[1]
        h = token_embeddings + self.pos_embed[:t]
        mask = nn.Transformer.generate_square_subsequent_mask(t)
        for layer in self.layers:
            h = layer(h, src_mask=mask, is_causal=True)
        return self.proj(self.norm(h[:, self.eos_index]))


class PromptBank(nn.Module):
    """Per-class learnable vectors for the four X slots of the template."""

    def __init__(self, num_classes: int, width: int, init_std: float = 0.02):
        super().__init__()
        self.context = nn.Parameter(torch.randn(num_classes, N_CTX, width) * init_std)

    @property
    def num_classes(self) -> int:
        return self.context.shape[0]


def encode_prompted_text(text_encoder: TextEncoder, class_ids, bank: PromptBank) -> torch.Tensor:
    class_ids = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
    if len(class_ids) == 0:
        return torch.zeros(0, text_encoder.cfg.output_dim)
    if bank.context.shape[-1] != text_encoder.cfg.width:
        raise ValueError("prompt width does not match text encoder width")
    if class_ids.min() < 0 or class_ids.max() >= bank.num_classes:
        raise IndexError(f"class id out of range [0, {bank.num_classes})")
    base = text_encoder.token_embedding(text_encoder.template_ids)
    emb = base.unsqueeze(0).repeat(len(class_ids), 1, 1)
    slots = text_encoder.ctx_slots
    emb = torch.cat([emb[:, :slots[0]], bank.context[class_ids], emb[:, slots[-1] + 1:]], dim=1)
    return text_encoder(emb)


# --------------------------------------------------------------------------- freezing


@dataclass
class FreezeState:
    frozen_layer_count: int
    affected_parameter_names: List[str] = field(default_factory=list)


def freeze_layers(encoder: nn.Module, k: int) -> FreezeState:
    """Exclude the first ``k`` layers (and, for k >= 1, the input embedding) from training.

    Everything else is made trainable; the head is never frozen.
    """
    depth = len(encoder.layers)
    if not 0 <= k <= depth:
        raise ValueError(f"frozen layer count {k} outside [0, {depth}]")
    frozen = set()
    if k >= 1:
        for m in getattr(encoder, "embedding_modules", lambda: [])():
            frozen.update(id(p) for p in m.parameters())
        for p in getattr(encoder, "embedding_parameters", lambda: [])():
            frozen.add(id(p))
    for layer in encoder.layers[:k]:
        frozen.update(id(p) for p in layer.parameters())
    names = []
    for name, p in encoder.named_parameters():
        p.requires_grad_(id(p) not in frozen)
        if id(p) in frozen:
            names.append(name)
    return FreezeState(k, names)


def freeze_all(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


def trainable_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
