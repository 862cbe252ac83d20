"""Spectrogram-guided dual-stream co-attention pooling and the emotion head."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .audio import SPEC_BINS, SPEC_FRAMES

CLASSES = ("angry", "sad", "happy", "neutral")


@dataclass
class HeadConfig:
    n_guides: int = 4
    n_frames: int = 149
    model_dim: int = 512
    mlp_hidden: list[int] = field(default_factory=lambda: [256])
    n_classes: int = len(CLASSES)
    with_vad_head: bool = False
    dropout: float = 0.1
    spec_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64, 32])

    def __post_init__(self):
        if self.n_guides < 1:
            raise ValueError("n_guides must be >= 1")


class HeadConfigError(ValueError):
    pass


def _conv_out(n: int, n_stages: int) -> int:
    for _ in range(n_stages):
        n = (n - 1) // 2 + 1  # kernel 3, stride 2, padding 1
    return n


class SpectrogramEncoder(nn.Module):
    """Strided conv stack over the 300x200 image, flattened."""

    def __init__(self, channels):
        super().__init__()
        layers, c_in = [], 1
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.ReLU()]
            c_in = c
        self.net = nn.Sequential(*layers)
        self.out_features = c_in * _conv_out(SPEC_FRAMES, len(channels)) * _conv_out(SPEC_BINS, len(channels))

    def forward(self, spec):
        return self.net(spec.unsqueeze(1)).flatten(1)


class GuideEncoder(nn.Module):
    """Spectrogram -> two (N, T) guide grids."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = SpectrogramEncoder(cfg.spec_channels)
        self.linear = nn.Linear(self.backbone.out_features, 2 * cfg.n_guides * cfg.n_frames)

    def forward(self, spec: torch.Tensor):
        if spec.shape[-2:] != (SPEC_FRAMES, SPEC_BINS):
            raise HeadConfigError(f"spectrogram must be {SPEC_FRAMES}x{SPEC_BINS}, got {tuple(spec.shape[-2:])}")
        x_s = self.linear(self.backbone(spec))
        first, second = x_s.chunk(2, dim=-1)
        shape = (self.cfg.n_guides, self.cfg.n_frames)
        return first.unflatten(-1, shape), second.unflatten(-1, shape)


def pooling_weights(guide: torch.Tensor) -> torch.Tensor:
    return torch.softmax(guide, dim=-1)


def coattend(guide: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
    """(B, N, T) guide logits x (B, T, D) frames -> (B, N, D) pooled rows."""
    if guide.shape[-1] != frames.shape[-2]:
        raise ValueError(f"guide covers {guide.shape[-1]} frames, stream has {frames.shape[-2]}")
    return pooling_weights(guide) @ frames


class EmotionHead(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = 2 * cfg.n_guides * cfg.model_dim
        layers = []
        for h in cfg.mlp_hidden:
            layers += [nn.Linear(in_dim, h), nn.ReLU(), nn.Dropout(cfg.dropout)]
            in_dim = h
        self.mlp = nn.Sequential(*layers)
        self.classifier = nn.Linear(in_dim, cfg.n_classes)
        self.vad = nn.Linear(2 * cfg.n_guides * cfg.model_dim, 3) if cfg.with_vad_head else None

    def forward(self, x_e_pooled, x_o_pooled):
        z = torch.cat([x_e_pooled.flatten(1), x_o_pooled.flatten(1)], dim=-1)
        logits = self.classifier(self.mlp(z))
        vad = self.vad(z) if self.vad is not None else None
        return logits, vad


class DualStreamCoAttention(nn.Module):
    """Guides from the spectrogram pool X_e^target and X_o; MLP on the concatenation."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.guides = GuideEncoder(cfg)
        self.head = EmotionHead(cfg)

    def forward(self, spec, x_e_target, x_o):
        if x_e_target.shape[1] != self.cfg.n_frames or x_o.shape[1] != self.cfg.n_frames:
            raise HeadConfigError(f"head expects {self.cfg.n_frames} frames per stream")
        g1, g2 = self.guides(spec)
        return self.head(coattend(g1, x_e_target), coattend(g2, x_o))


def detach_for_probe(x_hat: torch.Tensor) -> torch.Tensor:
    return x_hat.detach()


class ReconstructionProbe(nn.Module):
    """Single-stream variant: both guides pool the same detached encoder output."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.coattn = DualStreamCoAttention(cfg)

    def forward(self, spec, x_hat):
        x = detach_for_probe(x_hat)
        return self.coattn(spec, x, x)


def head_loss(logits, labels, vad=None, vad_true=None, vad_weight: float = 1.0):
    loss = F.cross_entropy(logits, labels)
    if vad is not None and vad_true is not None:
        loss = loss + vad_weight * F.mse_loss(vad, vad_true)
    return loss
