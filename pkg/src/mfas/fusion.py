"""Fusion search space: level choice, eight-op pool, softmax relaxation, derivation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import LEVELS, LayerTapBundle

OPERATIONS = ("Zero", "Sum", "Attention", "Attention_r", "ConcatFC", "ConcatFC_r", "ISM", "ISM_r")
SYMMETRIC_OPS = ("Zero", "Sum")
GRID_ROWS = ("target", "deep", "raw")  # display order of the strategy grid


class FusionConfigError(ValueError):
    pass


class StrategyStateError(RuntimeError):
    pass


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"fusion inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def op_zero(a, b):
    _check_shapes(a, b)
    return torch.zeros_like(a) * (a + b)  # keeps the graph connected with zero gradient


def op_sum(a, b):
    _check_shapes(a, b)
    return a + b


def scaled_dot_attention(q, k, v, scale=None):
    scale = 1.0 / math.sqrt(q.shape[-1]) if scale is None else scale
    weights = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
    return weights @ v, weights


def op_attention(a, b):
    """a queries b; b is both key and value."""
    _check_shapes(a, b)
    return scaled_dot_attention(a, b, b)[0]


class Zero(nn.Module):
    def forward(self, a, b):
        return op_zero(a, b)


class Sum(nn.Module):
    def forward(self, a, b):
        return op_sum(a, b)


class Attention(nn.Module):
    """Single-head by default (parameter-free); ``n_heads > 1`` adds q/k/v projections."""

    def __init__(self, dim: int, n_heads: int = 1):
        super().__init__()
        self.n_heads = n_heads
        if n_heads > 1:
            if dim % n_heads:
                raise FusionConfigError("dim must be divisible by n_heads")
            self.q = nn.Linear(dim, dim)
            self.k = nn.Linear(dim, dim)
            self.v = nn.Linear(dim, dim)
            self.out = nn.Linear(dim, dim)

    def forward(self, a, b):
        _check_shapes(a, b)
        if self.n_heads == 1:
            return op_attention(a, b)
        split = lambda t: t.unflatten(-1, (self.n_heads, -1)).transpose(1, 2)
        o, _ = scaled_dot_attention(split(self.q(a)), split(self.k(b)), split(self.v(b)))
        return self.out(o.transpose(1, 2).flatten(-2))


class ConcatFC(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc = nn.Linear(2 * dim, dim)

    def forward(self, a, b):
        _check_shapes(a, b)
        return F.relu(self.fc(torch.cat([a, b], dim=-1)))


class ISM(nn.Module):
    """a + tanh(W2 a * H) * H with H = W1 b."""

    def __init__(self, dim: int):
        super().__init__()
        self.gate_in = nn.Linear(dim, dim)  # Linear_1, applied to b
        self.gate_self = nn.Linear(dim, dim)  # Linear_2, applied to a

    def forward(self, a, b):
        _check_shapes(a, b)
        h = self.gate_in(b)
        return a + torch.tanh(self.gate_self(a) * h) * h


class Reverse(nn.Module):
    """Applies the wrapped op with its arguments swapped."""

    def __init__(self, op: nn.Module):
        super().__init__()
        if isinstance(op, (Zero, Sum)):
            raise FusionConfigError(f"{type(op).__name__} is symmetric and has no reverse")
        self.op = op

    def forward(self, a, b):
        return self.op(b, a)


def reverse(op: nn.Module, a, b):
    return Reverse(op)(a, b)


def build_operation(name: str, dim: int, attn_heads: int = 1) -> nn.Module:
    if name.endswith("_r"):
        base = name[:-2]
        if base in SYMMETRIC_OPS:
            raise FusionConfigError(f"{base} has no reverse")
        return Reverse(build_operation(base, dim, attn_heads))
    builders = {
        "Zero": lambda: Zero(),
        "Sum": lambda: Sum(),
        "Attention": lambda: Attention(dim, attn_heads),
        "ConcatFC": lambda: ConcatFC(dim),
        "ISM": lambda: ISM(dim),
    }
    if name not in builders:
        raise FusionConfigError(f"unknown operation {name!r}")
    return builders[name]()


class FusionCell(nn.Module):
    """One level's operation pool; every op owns independent parameters."""

    def __init__(self, dim: int, attn_heads: int = 1):
        super().__init__()
        self.ops = nn.ModuleList(build_operation(n, dim, attn_heads) for n in OPERATIONS)

    def op_outputs(self, x_e, x_t) -> torch.Tensor:
        return torch.stack([op(x_e, x_t) for op in self.ops])

    def forward(self, x_e, x_t, alpha_row: torch.Tensor) -> torch.Tensor:
        if alpha_row.numel() != len(OPERATIONS):
            raise FusionConfigError(f"alpha row must have {len(OPERATIONS)} entries")
        return fusion_cell_forward(x_e, x_t, alpha_row, self)

    def single(self, x_e, x_t, op_name: str) -> torch.Tensor:
        return self.ops[OPERATIONS.index(op_name)](x_e, x_t)


def fusion_cell_forward(x_e, x_t, alpha_row, cell: FusionCell) -> torch.Tensor:
    weights = torch.softmax(alpha_row, dim=-1)
    outs = [op(x_e, x_t) for op in cell.ops]
    return sum(w * o for w, o in zip(weights, outs))


@dataclass
class FusionStrategy:
    ops: dict  # level -> operation name
    selected_level: str

    @property
    def op(self) -> str:
        return self.ops[self.selected_level]

    def to_dict(self) -> dict:
        return {"ops": dict(self.ops), "selected_level": self.selected_level}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionStrategy":
        ops = dict(d["ops"])
        if set(ops) != set(LEVELS) or d["selected_level"] not in LEVELS:
            raise FusionConfigError(f"malformed strategy: {d}")
        for name in ops.values():
            if name not in OPERATIONS:
                raise FusionConfigError(f"unknown operation {name!r}")
        return cls(ops, d["selected_level"])


class SearchSpace(nn.Module):
    """Alpha table (3 levels x 8 ops) plus one fusion cell per level."""

    def __init__(self, dim: int, attn_heads: int = 1):
        super().__init__()
        self.alpha = nn.Parameter(torch.zeros(len(LEVELS), len(OPERATIONS)))
        self.cells = nn.ModuleDict({lvl: FusionCell(dim, attn_heads) for lvl in LEVELS})

    def forward(self, level: str, x_e, x_t, strategy: FusionStrategy | None = None):
        cell = self.cells[level]
        if strategy is not None:
            return cell.single(x_e, x_t, strategy.ops[level])
        return cell(x_e, x_t, self.alpha[LEVELS.index(level)])

    def model_parameters(self):
        return [p for n, p in self.named_parameters() if n != "alpha"]

    def alpha_table(self) -> dict:
        a = self.alpha.detach().cpu().numpy()
        return {
            "rows": list(LEVELS),
            "columns": list(OPERATIONS),
            "alpha": a.tolist(),
            "softmax": softmax_rows(a).tolist(),
        }


def softmax_rows(alpha: np.ndarray) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def choose_level(bundle: LayerTapBundle, rng: np.random.Generator | None = None, fixed: str | None = None):
    """Uniform level draw during search; the fixed level in derived/eval mode."""
    if fixed is not None:
        return fixed, bundle.level(fixed)
    level = LEVELS[int(rng.integers(len(LEVELS)))]
    return level, bundle.level(level)


def argmax_ops(alpha) -> dict:
    """Per-level argmax; np.argmax picks the lowest index on ties."""
    a = np.asarray(alpha.detach().cpu() if torch.is_tensor(alpha) else alpha, dtype=np.float64)
    return {lvl: OPERATIONS[int(np.argmax(a[i]))] for i, lvl in enumerate(LEVELS)}


def derive_strategy(alpha, validation_scores: dict | None) -> FusionStrategy:
    """Argmax op per level; level chosen by best (UA, WA) on validation.

    ``validation_scores`` maps level -> (UA, WA) of that level's single-path model.
    """
    if not validation_scores or set(validation_scores) != set(LEVELS):
        raise StrategyStateError("validation scores for all three levels are required")
    ops = argmax_ops(alpha)
    best = max(LEVELS, key=lambda lvl: (tuple(validation_scores[lvl]), -LEVELS.index(lvl)))
    return FusionStrategy(ops, best)
