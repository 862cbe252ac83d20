"""Masked-reconstruction objectives: quantized-contrastive, continuous teacher, toy CTC."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import LayerTapBundle, MaskSpec, SpeechEncoder

# quantizer sweep: (books B, words W), giving N_q = 4, 16, 64, 144, 4096
CODEBOOK_GRID = [(2, 2), (4, 2), (2, 8), (2, 12), (4, 8)]
TARGET_DEPTHS = [1, 2, 3, 4]


@dataclass
class CodebookConfig:
    n_books: int = 2
    n_words: int = 8
    n_negatives: int = 10
    temp_start: float = 2.0
    temp_end: float = 0.5
    sim_temperature: float = 0.1
    sim_offset: float = 0.5
    diversity_weight: float = 0.1

    @property
    def n_units(self) -> int:
        return self.n_words**self.n_books

    def temperature(self, progress: float) -> float:
        """Gumbel temperature, annealed geometrically from start to end."""
        progress = min(max(progress, 0.0), 1.0)
        return self.temp_start * (self.temp_end / self.temp_start) ** progress


@dataclass
class ContinuousTargetConfig:
    n_layers: int = 1
    ema_decay: float = 0.999
    normalize_targets: bool = True


@dataclass
class CtcConfig:
    vocab_size: int = 13  # 12 toy tokens + blank (index 0)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")


class GumbelQuantizer(nn.Module):
    """B codebooks of W codewords; the target is the concatenation of one word per book."""

    def __init__(self, dim: int, cfg: CodebookConfig):
        super().__init__()
        if dim % cfg.n_books:
            raise ValueError("model dim must be divisible by n_books")
        self.cfg = cfg
        self.code_dim = dim // cfg.n_books
        self.logits = nn.Linear(dim, cfg.n_books * cfg.n_words)
        self.codebook = nn.Parameter(torch.randn(cfg.n_books, cfg.n_words, self.code_dim))
        nn.init.normal_(self.logits.weight, std=1.0)
        nn.init.zeros_(self.logits.bias)

    def forward(self, x, temperature=1.0, hard=True, generator=None, noise=True):
        """(..., D) -> (quantized (..., D), soft probabilities (..., B, W), indices (..., B))."""
        B, W = self.cfg.n_books, self.cfg.n_words
        logits = self.logits(x).unflatten(-1, (B, W))
        if noise and self.training:
            u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
            gumbel = -torch.log((-torch.log(u.clamp(1e-10, 1.0))).clamp_min(1e-10))
            logits_n = logits + gumbel
        else:
            logits_n = logits
        soft = F.softmax(logits_n / temperature, dim=-1)
        idx = logits_n.argmax(dim=-1)
        if hard:
            one_hot = F.one_hot(idx, W).to(soft.dtype)
            sel = one_hot - soft.detach() + soft  # straight-through
        else:
            sel = soft
        q = torch.einsum("...bw,bwc->...bc", sel, self.codebook).flatten(-2)
        return q, F.softmax(logits, dim=-1), idx


def quantize_targets(x, mask: MaskSpec, quantizer: GumbelQuantizer, temperature=1.0, generator=None):
    """Quantize the masked frames of ``x``.

    Returns positives (B, T, D) (meaningful only at masked frames), the soft
    codeword probabilities of masked frames (n_masked, B, W) and their indices.
    """
    q, probs, idx = quantizer(x, temperature=temperature, generator=generator)
    m = mask.mask.to(x.device)
    return q, probs[m], idx


def diversity_penalty(probs: torch.Tensor, n_units: int) -> torch.Tensor:
    """1 - perplexity / N_q, perplexity of the averaged per-book distributions."""
    if probs.numel() == 0:
        return probs.new_zeros(())
    avg = probs.mean(dim=0)  # (B, W)
    entropy = -(avg * torch.log(avg + 1e-7)).sum()
    return 1.0 - torch.exp(entropy) / n_units


def _sample_negatives(mask_row: torch.Tensor, n_neg: int, generator=None):
    """For each masked position, draw n_neg other masked positions (with replacement)."""
    pos = mask_row.nonzero().squeeze(1)
    n = pos.numel()
    if n < 2 or n_neg == 0:
        return pos, None
    draw = torch.randint(0, n - 1, (n, n_neg), generator=generator)
    # shift to skip self
    draw = draw + (draw >= torch.arange(n).unsqueeze(1)).long()
    return pos, pos[draw]


def quantized_contrastive_loss(
    x_hat: torch.Tensor,
    positives: torch.Tensor,
    mask: MaskSpec,
    cfg: CodebookConfig,
    generator=None,
    codes: torch.Tensor | None = None,
    probs: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cosine-similarity BCE of each masked prediction against its codeword and negatives.

    Logit = (cos - sim_offset) / sim_temperature. Negatives whose code indices
    equal the positive's (``codes``) are excluded from the loss.
    """
    m = mask.mask.to(x_hat.device)
    if not bool(m.any()):
        return x_hat.sum() * 0.0
    per_pos = []
    for b in range(x_hat.shape[0]):
        pos, neg = _sample_negatives(m[b], cfg.n_negatives, generator)
        if pos.numel() == 0:
            continue
        pred = x_hat[b, pos]  # (n, D)
        targets = positives[b, pos].unsqueeze(1)  # (n, 1, D)
        valid = torch.ones(pos.numel(), 1, dtype=torch.bool, device=x_hat.device)
        if neg is not None:
            targets = torch.cat([targets, positives[b][neg]], dim=1)
            neg_valid = torch.ones_like(neg, dtype=torch.bool)
            if codes is not None:
                same = (codes[b][neg] == codes[b, pos].unsqueeze(1)).all(dim=-1)
                neg_valid = ~same
            valid = torch.cat([valid, neg_valid], dim=1)
        cos = F.cosine_similarity(pred.unsqueeze(1), targets, dim=-1, eps=1e-8)
        logits = (cos - cfg.sim_offset) / cfg.sim_temperature
        labels = torch.zeros_like(logits)
        labels[:, 0] = 1.0
        bce = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
        bce = (bce * valid).sum(dim=1) / valid.sum(dim=1)
        per_pos.append(bce)
    loss = torch.cat(per_pos).mean()
    if probs is not None and cfg.diversity_weight > 0:
        loss = loss + cfg.diversity_weight * diversity_penalty(probs, cfg.n_units)
    return loss


# -- continuous teacher ------------------------------------------------------


class TeacherState:
    """EMA copy of a student encoder, never receiving gradients."""

    def __init__(self, student: SpeechEncoder, decay: float = 0.999):
        self.model = copy.deepcopy(student)
        self.model.requires_grad_(False)
        self.model.eval()
        self.decay = decay

    @torch.no_grad()
    def update(self, student: nn.Module, decay: float | None = None) -> None:
        update_teacher(self.model, student, self.decay if decay is None else decay)


@torch.no_grad()
def update_teacher(teacher: nn.Module, student: nn.Module, decay: float) -> None:
    """teacher <- decay * teacher + (1 - decay) * student, parameter by parameter."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise RuntimeError("teacher and student parameter sets differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise RuntimeError(f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        tp.mul_(decay).add_(sp.detach(), alpha=1.0 - decay)


@torch.no_grad()
def average_top_layers(bundle: LayerTapBundle, n_layers: int, normalize: bool = True) -> torch.Tensor:
    if not 1 <= n_layers <= bundle.k:
        raise ValueError(f"L_c={n_layers} must lie in [1, {bundle.k}]")
    taps = bundle.taps[bundle.k - n_layers :]
    if normalize:
        # per-channel standardisation over time: a constant offset shared by every
        # frame is not a target the student can satisfy without reading its input
        taps = [F.instance_norm(t.transpose(1, 2)).transpose(1, 2) for t in taps]
    return torch.stack(taps).mean(dim=0)


@torch.no_grad()
def continuous_targets(wav: torch.Tensor, teacher: TeacherState, cfg: ContinuousTargetConfig) -> torch.Tensor:
    """Mean of the teacher's last L_c layer outputs on the unmasked input."""
    if cfg.n_layers > len(teacher.model.layers):
        raise ValueError(f"L_c={cfg.n_layers} exceeds encoder depth {len(teacher.model.layers)}")
    _, bundle = teacher.model(wav)
    return average_top_layers(bundle, cfg.n_layers, cfg.normalize_targets)


def continuous_loss(x_hat: torch.Tensor, y: torch.Tensor, mask: MaskSpec) -> torch.Tensor:
    if x_hat.shape != y.shape:
        raise ValueError("prediction and target shapes differ")
    m = mask.mask.to(x_hat.device)
    if not bool(m.any()):
        return x_hat.sum() * 0.0
    return F.mse_loss(x_hat[m], y[m].detach())


# -- toy ASR stage -----------------------------------------------------------


class CtcHead(nn.Module):
    def __init__(self, dim: int, cfg: CtcConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(dim, cfg.vocab_size)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.proj(frames)


def ctc_loss_from_logits(logits: torch.Tensor, targets: list[list[int]]) -> torch.Tensor:
    """Mean CTC negative log-likelihood; blank is index 0, tokens are 1..V-1."""
    T = logits.shape[1]
    for t in targets:
        if len(t) > T:
            raise ValueError(f"target of length {len(t)} longer than {T} frames")
    log_probs = F.log_softmax(logits, dim=-1).transpose(0, 1)  # (T, B, V)
    flat = torch.tensor([tok for t in targets for tok in t], dtype=torch.long)
    in_lens = torch.full((logits.shape[0],), T, dtype=torch.long)
    tgt_lens = torch.tensor([len(t) for t in targets], dtype=torch.long)
    return F.ctc_loss(log_probs, flat, in_lens, tgt_lens, blank=0, reduction="sum", zero_infinity=True) / len(targets)


def ctc_finetune_step(bundle: LayerTapBundle, head: CtcHead, targets: list[list[int]]) -> torch.Tensor:
    return ctc_loss_from_logits(head(bundle.target), targets)


def greedy_decode(logits: torch.Tensor) -> list[list[int]]:
    out = []
    for row in logits.argmax(dim=-1).tolist():
        seq, prev = [], 0
        for tok in row:
            if tok != prev and tok != 0:
                seq.append(tok)
            prev = tok
        out.append(seq)
    return out
