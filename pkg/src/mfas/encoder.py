"""Convolutional front-end + Transformer speech encoder with per-layer taps."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LEVELS = ("raw", "deep", "target")


@dataclass
class EncoderConfig:
    conv_strides: list[int] = field(default_factory=lambda: [5, 2, 2, 2, 2, 2, 2])
    conv_kernels: list[int] = field(default_factory=lambda: [10, 3, 3, 3, 3, 2, 2])
    conv_channels: int = 512
    n_layers: int = 4
    model_dim: int = 512
    ffn_dim: int = 2048
    n_heads: int = 8
    dropout: float = 0.1
    max_positions: int = 1024
    mask_prob: float = 0.065
    mask_span: int = 10
    norm_first: bool = False
    conv_bias: bool = False
    normalize_input: bool = True
    extractor_norm: str = "group"  # "layer": every conv block; "group": first block only

    def __post_init__(self):
        if len(self.conv_strides) != len(self.conv_kernels):
            raise ValueError("conv_strides and conv_kernels must have equal length")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.extractor_norm not in ("layer", "group"):
            raise ValueError("extractor_norm must be 'layer' or 'group'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def tiny(cls, **kw) -> "EncoderConfig":
        """Desk-scale encoder used by the toy experiments (same conv geometry)."""
        base = dict(conv_channels=32, model_dim=64, ffn_dim=128, n_heads=4, dropout=0.0)
        base.update(kw)
        return cls(**base)


def conv_output_length(n_samples: int, kernels, strides) -> int:
    length = n_samples
    for k, s in zip(kernels, strides):
        length = (length - k) // s + 1
    return length


def receptive_field(kernels, strides) -> int:
    rf, jump = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * jump
        jump *= s
    return rf


class MaskSpec(NamedTuple):
    """Boolean (B, T) mask of frames to replace with the mask token."""

    mask: torch.Tensor

    @property
    def counts(self) -> torch.Tensor:
        return self.mask.sum(dim=1)

    @classmethod
    def from_indices(cls, indices: list, n_frames: int) -> "MaskSpec":
        mask = torch.zeros(len(indices), n_frames, dtype=torch.bool)
        for b, idx in enumerate(indices):
            idx = list(idx)
            if any(i < 0 or i >= n_frames for i in idx):
                raise IndexError(f"mask index out of range for T={n_frames}: {idx}")
            mask[b, idx] = True
        return cls(mask)


def sample_mask(
    n_frames: int, mask_prob: float, span: int, seed=None, batch_size: int = 1
) -> MaskSpec:
    """Span masking: each frame starts a span with probability ``mask_prob``."""
    if not 0.0 <= mask_prob <= 1.0 or span < 1:
        raise ValueError("need 0 <= mask_prob <= 1 and span >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    starts = rng.random((batch_size, n_frames)) < mask_prob
    mask = np.zeros_like(starts)
    for offset in range(min(span, n_frames)):
        mask[:, offset:] |= starts[:, : n_frames - offset]
    return MaskSpec(torch.from_numpy(mask))


def apply_mask(x: torch.Tensor, spec: MaskSpec, token: torch.Tensor) -> torch.Tensor:
    mask = spec.mask.to(x.device)
    if mask.shape != x.shape[:2]:
        raise IndexError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(x.shape[:2])}")
    return torch.where(mask.unsqueeze(-1), token.to(x.dtype).expand_as(x), x)


class LayerTapBundle(NamedTuple):
    taps: list  # k tensors of shape (B, T, D)

    @property
    def k(self) -> int:
        return len(self.taps)

    @property
    def raw(self) -> torch.Tensor:
        return self.taps[0]

    @property
    def deep(self) -> torch.Tensor:
        # X_e^m with m = k/2, 1-based
        return self.taps[self.k // 2 - 1]

    @property
    def target(self) -> torch.Tensor:
        return self.taps[-1]

    def level(self, name: str) -> torch.Tensor:
        return getattr(self, name)


class _ConvBlock(nn.Module):
    """Conv1d, optional normalisation, GELU.

    ``norm`` is "layer" (over channels, per frame), "group" (one group per
    channel, over time) or None.
    """

    def __init__(self, c_in, c_out, kernel, stride, bias=True, norm="layer"):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride, bias=bias)
        self.norm_kind = norm
        if norm == "layer":
            self.norm = nn.LayerNorm(c_out)
        elif norm == "group":
            self.norm = nn.GroupNorm(c_out, c_out)
        else:
            self.norm = None

    def forward(self, x):
        x = self.conv(x)
        if self.norm_kind == "layer":
            x = self.norm(x.transpose(1, 2)).transpose(1, 2)
        elif self.norm_kind == "group":
            x = self.norm(x)
        return F.gelu(x)


class SpeechEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        blocks, c_in = [], 1
        for i, (k, s) in enumerate(zip(cfg.conv_kernels, cfg.conv_strides)):
            norm = "layer" if cfg.extractor_norm == "layer" else ("group" if i == 0 else None)
            blocks.append(_ConvBlock(c_in, cfg.conv_channels, k, s, cfg.conv_bias, norm))
            c_in = cfg.conv_channels
        self.feature_extractor = nn.Sequential(*blocks)
        self.post_norm = nn.LayerNorm(cfg.conv_channels)
        self.projection = nn.Linear(cfg.conv_channels, cfg.model_dim)
        self.mask_token = nn.Parameter(torch.empty(cfg.model_dim).uniform_())
        self.positions = nn.Embedding(cfg.max_positions, cfg.model_dim)
        nn.init.normal_(self.positions.weight, std=0.02)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                cfg.model_dim,
                cfg.n_heads,
                cfg.ffn_dim,
                cfg.dropout,
                activation="gelu",
                batch_first=True,
                norm_first=cfg.norm_first,
            )
            for _ in range(cfg.n_layers)
        )

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.cfg.conv_kernels, self.cfg.conv_strides)

    def encode_frames(self, wav: torch.Tensor) -> torch.Tensor:
        """(B, L) samples -> (B, T, D_m) frames."""
        if wav.dim() == 1:
            wav = wav.unsqueeze(0)
        if wav.shape[-1] < self.receptive_field:
            raise ValueError(
                f"input of {wav.shape[-1]} samples is shorter than the receptive field ({self.receptive_field})"
            )
        if self.cfg.normalize_input:
            wav = F.layer_norm(wav, wav.shape[-1:])
        feats = self.feature_extractor(wav.unsqueeze(1)).transpose(1, 2)
        return self.projection(self.post_norm(feats))

    def apply_mask(self, x: torch.Tensor, spec: MaskSpec | None) -> torch.Tensor:
        if spec is None:
            return x
        return apply_mask(x, spec, self.mask_token)

    def transform_with_taps(self, x: torch.Tensor) -> LayerTapBundle:
        T = x.shape[1]
        if T > self.cfg.max_positions:
            raise ValueError(f"{T} frames exceed max_positions={self.cfg.max_positions}")
        h = x + self.positions.weight[:T].unsqueeze(0)
        taps = []
        for layer in self.layers:
            h = layer(h)
            taps.append(h)
        return LayerTapBundle(taps)

    def forward(self, wav: torch.Tensor, mask: MaskSpec | None = None):
        """Returns (unmasked frames X, tap bundle over the masked frames)."""
        x = self.encode_frames(wav)
        return x, self.transform_with_taps(self.apply_mask(x, mask))
