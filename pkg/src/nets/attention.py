"""Multi-head causal self-attention, the dense reference path.

The mask is either vanilla causal (``mask=None``) or StableMask described by a
``MaskSpec``. Logits are scaled by 1/sqrt(head_dim) and ALiBi bias is added
before any masking.
"""
import json
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from masks import MaskMode, MaskSpec, apply_stablemask, build_infer_row, masks_for, resolve_tau
from numerics import matmul, scale, softmax_rows
from utils.errors import ShapeError

from .position import PEConfig, alibi_bias_from_positions, rope_rotate


@dataclass
class AttnTrace:
    """Post-softmax attention ``probs[B, H, n, n]`` and mask ratio ``alpha[B, H, n]``."""

    probs: torch.Tensor
    alpha: torch.Tensor
    logits: Optional[torch.Tensor] = None

    def to_dict(self) -> Dict[str, Any]:
        d = {"probs": self.probs.tolist(), "alpha": self.alpha.tolist()}
        if self.logits is not None:
            d["logits"] = self.logits.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class HeadWeights:
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_o: torch.Tensor
    n_heads: int

    def __post_init__(self) -> None:
        inner, d = self.w_q.shape
        if inner % self.n_heads:
            raise ShapeError(f"{inner} projected dims do not split over {self.n_heads} heads")
        for name in ("w_k", "w_v"):
            if getattr(self, name).shape != self.w_q.shape:
                raise ShapeError(f"{name} shape {tuple(getattr(self, name).shape)} != w_q {tuple(self.w_q.shape)}")
        if self.w_o.shape != (d, inner):
            raise ShapeError(f"w_o shape {tuple(self.w_o.shape)} != {(d, inner)}")

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[0] // self.n_heads


def project(x: torch.Tensor, weights: HeadWeights) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Raw (un-rotated) q, k, v as ``[B, H, n, head_dim]``."""
    return tuple(
        rearrange(F.linear(x, w), "b n (h e) -> b h n e", h=weights.n_heads)
        for w in (weights.w_q, weights.w_k, weights.w_v)
    )


def attention_logits(
    q: torch.Tensor,
    k: torch.Tensor,
    q_pos: torch.Tensor,
    k_pos: torch.Tensor,
    pe: PEConfig,
) -> torch.Tensor:
    if pe.kind == "rope":
        q = rope_rotate(q, q_pos, pe.rope_base)
        k = rope_rotate(k, k_pos, pe.rope_base)
    logits = scale(matmul(q, k.transpose(-1, -2)), q.shape[-1] ** -0.5)
    if pe.kind == "alibi":
        slopes = pe.slopes(q.shape[1]).to(logits.dtype)
        logits = logits + alibi_bias_from_positions(q_pos, k_pos, slopes)
    return logits


def mix(probs: torch.Tensor, v: torch.Tensor, w_o: torch.Tensor) -> torch.Tensor:
    out = matmul(probs, v)
    return F.linear(rearrange(out, "b h n e -> b n (h e)"), w_o)


def mha_forward(
    x: torch.Tensor,
    weights: HeadWeights,
    pe: PEConfig,
    mask: Optional[MaskSpec],
    positions: Optional[torch.Tensor] = None,
    mode: Optional[Union[MaskMode, str]] = None,
    return_trace: bool = False,
) -> Tuple[torch.Tensor, Optional[AttnTrace]]:
    """Causal self-attention over ``x[B, n, d]`` (or ``[n, d]``)."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    n = x.shape[1]
    if positions is None:
        positions = torch.arange(n, device=x.device)

    q, k, v = project(x, weights)
    logits = attention_logits(q, k, positions, positions, pe)

    if mask is None:
        causal = torch.ones(n, n, dtype=torch.bool, device=x.device).tril()
        probs = softmax_rows(logits.masked_fill(~causal, float("-inf")))
        alpha = probs.sum(dim=-1)
    else:
        if mask.n_heads != weights.n_heads:
            raise ShapeError(f"mask has {mask.n_heads} heads, attention has {weights.n_heads}")
        pair = masks_for(mask, n, dtype=logits.dtype, device=x.device)
        tau = resolve_tau(mask, n, MaskMode(mode) if mode is not None else None)
        if tau is not None:
            tau = tau.to(logits.dtype).reshape(-1, 1)
        probs, alpha = apply_stablemask(logits, pair, tau)

    y = mix(probs, v, weights.w_o)
    trace = AttnTrace(probs.detach(), alpha.detach(), logits.detach()) if return_trace else None
    if squeeze:
        y = y.squeeze(0)
    return y, trace


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, pe: PEConfig, mask: Optional[MaskSpec]) -> None:
        super().__init__()
        if dim % n_heads:
            raise ShapeError(f"model dim {dim} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.pe = pe
        self.mask = mask

        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)
        self.o_proj = nn.Linear(dim, dim, bias=False)

    @property
    def head_dim(self) -> int:
        return self.q_proj.weight.shape[0] // self.n_heads

    def head_weights(self) -> HeadWeights:
        return HeadWeights(
            self.q_proj.weight, self.k_proj.weight, self.v_proj.weight, self.o_proj.weight, self.n_heads
        )

    def forward(
        self,
        x: torch.Tensor,
        positions: Optional[torch.Tensor] = None,
        mode: Optional[Union[MaskMode, str]] = None,
        return_trace: bool = False,
    ) -> Tuple[torch.Tensor, Optional[AttnTrace]]:
        return mha_forward(x, self.head_weights(), self.pe, self.mask, positions, mode, return_trace)

    def project(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return project(x, self.head_weights())

    def attend_row(
        self,
        q: torch.Tensor,
        keys: torch.Tensor,
        values: torch.Tensor,
        q_pos: torch.Tensor,
        k_pos: torch.Tensor,
        n: int,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Newest query row ``q[B, H, 1, e]`` against cached keys and values.

        ``n`` is the total sequence length so far, which may exceed the number of
        cached keys under a sliding window. Returns (output ``[B, 1, d]``, probs).
        """
        logits = attention_logits(q, keys, q_pos, k_pos, self.pe)
        if self.mask is None:
            probs = softmax_rows(logits)
        else:
            spec = self.mask
            mode = MaskMode.INFER if n <= spec.max_train_len else MaskMode.EXTRAPOLATE
            gammas = spec.gammas(logits.dtype, logits.device).reshape(-1, 1)
            probs, _ = build_infer_row(
                logits, n, spec.max_train_len, gammas, row=n - 1,
                pseudo=spec.pseudo, pseudo_value=spec.pseudo_value, mode=mode,
            )
        return mix(probs, values, self.o_proj.weight), probs
