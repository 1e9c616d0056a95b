import math
from dataclasses import dataclass, field
from typing import List

import torch
from torch import nn

from utils.errors import ConfigError, ShapeError

PE_KINDS = ("none", "rope", "alibi", "ape-learn", "ape-sin")


@dataclass
class PEConfig:
    kind: str = "rope"
    rope_base: float = 10000.0
    # empty means the geometric default 2^(-8h/H)
    alibi_slopes: List[float] = field(default_factory=list)

    def validate(self, n_heads: int, head_dim: int) -> None:
        if self.kind not in PE_KINDS:
            raise ConfigError(f"unknown position encoding {self.kind!r}, expected one of {PE_KINDS}")
        if self.kind == "rope" and head_dim % 2:
            raise ConfigError(f"rope needs an even head dim, got {head_dim}")
        if self.kind == "alibi" and self.alibi_slopes:
            if len(self.alibi_slopes) != n_heads:
                raise ConfigError(f"{len(self.alibi_slopes)} alibi slopes for {n_heads} heads")
            if any(s <= 0 for s in self.alibi_slopes):
                raise ConfigError("alibi slopes must be positive")

    @property
    def is_absolute(self) -> bool:
        return self.kind.startswith("ape")

    def slopes(self, n_heads: int) -> torch.Tensor:
        if self.alibi_slopes:
            return torch.tensor(self.alibi_slopes, dtype=torch.float64)
        return alibi_slopes(n_heads)


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., : x.shape[-1] // 2], x[..., x.shape[-1] // 2 :]
    return torch.cat([-x2, x1], dim=-1)


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate pairs (k, k + dim/2) of ``x[..., seq, dim]`` by ``pos * base^(-2k/dim)``."""
    dim = x.shape[-1]
    if dim % 2:
        raise ShapeError(f"rope needs an even dim, got {dim}")
    positions = torch.as_tensor(positions, device=x.device)
    if positions.shape[-1] != x.shape[-2]:
        raise ShapeError(f"{positions.shape[-1]} positions for a sequence of {x.shape[-2]}")

    inv_freq = 1.0 / (base ** (torch.arange(0, dim, 2, dtype=torch.float64, device=x.device) / dim))
    freqs = torch.einsum("t,d->td", positions.to(torch.float64), inv_freq)
    emb = torch.cat([freqs, freqs], dim=-1).to(x.dtype)
    return x * emb.cos() + _rotate_half(x) * emb.sin()


def alibi_slopes(n_heads: int) -> torch.Tensor:
    h = torch.arange(1, n_heads + 1, dtype=torch.float64)
    return 2.0 ** (-8.0 * h / n_heads)


def alibi_bias_from_positions(
    q_pos: torch.Tensor, k_pos: torch.Tensor, slopes: torch.Tensor
) -> torch.Tensor:
    """``[H, nq, nk]`` bias -slope * (q - k) on visible pairs, 0 elsewhere."""
    dist = (q_pos[:, None] - k_pos[None, :]).to(slopes.dtype)
    bias = -slopes[:, None, None] * dist.clamp(min=0)
    return bias


def alibi_bias(n: int, slope: float) -> torch.Tensor:
    if slope <= 0:
        raise ConfigError(f"alibi slope must be positive, got {slope}")
    pos = torch.arange(n)
    return alibi_bias_from_positions(pos, pos, torch.tensor([slope], dtype=torch.float64))[0]


def sinusoidal_table(max_len: int, dim: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(max_len, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return table.to(dtype)


def ape_embed(positions: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    positions = torch.as_tensor(positions, device=table.device)
    if positions.numel() and int(positions.max()) >= table.shape[0]:
        raise ShapeError(f"position {int(positions.max())} beyond a table of {table.shape[0]} rows")
    return table[positions]


class AbsolutePositionEmbedding(nn.Module):
    def __init__(self, kind: str, max_len: int, dim: int) -> None:
        super().__init__()
        self.kind = kind
        if kind == "ape-learn":
            self.table = nn.Parameter(torch.zeros(max_len, dim))
        elif kind == "ape-sin":
            self.register_buffer("table", sinusoidal_table(max_len, dim), persistent=False)
        else:
            raise ConfigError(f"not an absolute position encoding: {kind!r}")

    def forward(self, positions: torch.Tensor) -> torch.Tensor:
        return ape_embed(positions, self.table)
