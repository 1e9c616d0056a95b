"""Blocked online-softmax forward pass for StableMask attention.

Each query block i walks every key block j, including blocks above the causal
diagonal: pseudo scores live there and feed the softmax denominator. For a tile

    S = (Q_i K_j^T * scale) * C_ij + P_ij
    m' = max(m, rowmax(S)),  Pt = exp(S - m')
    l' = exp(m - m') * l + rowsum(Pt)
    O' = exp(m - m') * O + (Pt * C_ij) V_j

and finally O / l with L = m + log l. The re-mask ``Pt * C_ij`` keeps pseudo mass
in the denominator only. Forward only; training uses the dense path.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import pandas as pd
import torch
from einops import einsum

from masks import apply_stablemask, build_masks, causal_ones, pseudo_scores
from numerics import exp, log
from utils.errors import ShapeError

logger = logging.getLogger(__name__)

ACC_DTYPE = torch.float64

Gamma = Union[float, torch.Tensor]


@dataclass(frozen=True)
class BlockPlan:
    br: int
    bc: int
    n: int

    def __post_init__(self) -> None:
        if self.br < 1 or self.bc < 1:
            raise ShapeError(f"block sizes must be >= 1, got Br={self.br}, Bc={self.bc}")
        if self.n < 1:
            raise ShapeError(f"sequence length must be >= 1, got {self.n}")

    @property
    def tr(self) -> int:
        return math.ceil(self.n / self.br)

    @property
    def tc(self) -> int:
        return math.ceil(self.n / self.bc)

    def rows(self, i: int) -> range:
        return range(i * self.br, min((i + 1) * self.br, self.n))

    def cols(self, j: int) -> range:
        return range(j * self.bc, min((j + 1) * self.bc, self.n))


@dataclass
class RowState:
    m: torch.Tensor
    l: torch.Tensor
    o: torch.Tensor
    L: Optional[torch.Tensor] = None


BlockHook = Callable[[int, int, RowState], None]


def block_mask_tiles(
    i: int,
    j: int,
    plan: BlockPlan,
    gamma: Gamma,
    pseudo: str = "decay",
    pseudo_value: float = 1e-2,
    dtype: torch.dtype = ACC_DTYPE,
) -> Tuple[torch.Tensor, torch.Tensor]:
    if not (0 <= i < plan.tr and 0 <= j < plan.tc):
        raise ShapeError(f"block ({i}, {j}) outside a {plan.tr}x{plan.tc} grid")
    rows = torch.tensor(plan.rows(i))[:, None]
    cols = torch.tensor(plan.cols(j))[None, :]
    return causal_ones(rows, cols, dtype), pseudo_scores(rows, cols, gamma, pseudo, pseudo_value, dtype)


def _row_block(
    i: int,
    Q: torch.Tensor,
    K: torch.Tensor,
    V: torch.Tensor,
    plan: BlockPlan,
    gamma: Gamma,
    pseudo: str,
    pseudo_value: float,
    scale: float,
    on_block: Optional[BlockHook],
) -> Tuple[torch.Tensor, torch.Tensor]:
    rows = plan.rows(i)
    q = Q[..., rows.start : rows.stop, :]
    lead = q.shape[:-1]
    state = RowState(
        m=torch.full(lead, -math.inf, dtype=ACC_DTYPE),
        l=torch.zeros(lead, dtype=ACC_DTYPE),
        o=torch.zeros(q.shape[:-1] + V.shape[-1:], dtype=ACC_DTYPE),
    )

    for j in range(plan.tc):
        cols = plan.cols(j)
        k = K[..., cols.start : cols.stop, :]
        v = V[..., cols.start : cols.stop, :]
        c_tile, p_tile = block_mask_tiles(i, j, plan, gamma, pseudo, pseudo_value)

        s = einsum(q, k, "... r e, ... c e -> ... r c") * scale * c_tile + p_tile
        m_new = torch.maximum(state.m, s.amax(dim=-1))
        p_t = exp(s - m_new[..., None])
        rescale = exp(state.m - m_new)
        state = RowState(
            m=m_new,
            l=rescale * state.l + p_t.sum(dim=-1),
            o=rescale[..., None] * state.o + einsum(p_t * c_tile, v, "... r c, ... c e -> ... r e"),
        )
        if on_block is not None:
            on_block(i, j, state)

    state.L = state.m + log(state.l)
    return state.o / state.l[..., None], state.L


def streamed_forward(
    Q: torch.Tensor,
    K: torch.Tensor,
    V: torch.Tensor,
    plan: BlockPlan,
    gamma: Gamma,
    pseudo: str = "decay",
    pseudo_value: float = 1e-2,
    scale: Optional[float] = None,
    parallel: bool = False,
    max_workers: Optional[int] = None,
    on_block: Optional[BlockHook] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Blocked StableMask attention over ``Q, K, V[..., n, e]``; returns (O, L).

    A tensor gamma of shape ``[H]`` must match the axis right before ``n``.
    Row blocks are independent. With ``parallel=True`` they run on a thread pool
    and every block performs the same ops on the same data, so the result is
    bitwise identical to the sequential loop.
    """
    n = Q.shape[-2]
    if K.shape[-2] != n or V.shape[-2] != n or Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"inconsistent shapes Q{tuple(Q.shape)} K{tuple(K.shape)} V{tuple(V.shape)}")
    if plan.n != n:
        raise ShapeError(f"plan built for n={plan.n}, inputs have n={n}")
    if scale is None:
        scale = Q.shape[-1] ** -0.5
    if isinstance(gamma, torch.Tensor):
        gamma = gamma.to(ACC_DTYPE)

    out_dtype = Q.dtype
    Q, K, V = (t.to(ACC_DTYPE) for t in (Q, K, V))

    def run(i: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return _row_block(i, Q, K, V, plan, gamma, pseudo, pseudo_value, scale, on_block)

    if parallel:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            blocks: List[Tuple[torch.Tensor, torch.Tensor]] = list(pool.map(run, range(plan.tr)))
    else:
        blocks = [run(i) for i in range(plan.tr)]

    O = torch.cat([b[0] for b in blocks], dim=-2).to(out_dtype)
    L = torch.cat([b[1] for b in blocks], dim=-1)
    return O, L


def reference_forward(
    Q: torch.Tensor,
    K: torch.Tensor,
    V: torch.Tensor,
    gamma: Gamma,
    pseudo: str = "decay",
    pseudo_value: float = 1e-2,
    scale: Optional[float] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Dense path: (probs @ V, logsumexp of the remasked scores)."""
    n = Q.shape[-2]
    if scale is None:
        scale = Q.shape[-1] ** -0.5
    masks = build_masks(n, gamma, pseudo, pseudo_value, dtype=Q.dtype)
    A = einsum(Q, K, "... i e, ... j e -> ... i j") * scale
    probs, _ = apply_stablemask(A, masks)
    L = torch.logsumexp(A * masks.C + masks.P, dim=-1)
    return einsum(probs, V, "... i j, ... j e -> ... i e"), L


def benchmark(
    ns: Sequence[int],
    block_sizes: Sequence[Tuple[int, int]],
    head_dim: int = 16,
    gamma: float = 0.5,
    seed: int = 0,
    repeats: int = 3,
) -> pd.DataFrame:
    """Wall time and max |streamed - dense| per (n, Br, Bc)."""
    gen = torch.Generator().manual_seed(seed)
    records = []
    for n in ns:
        Q, K, V = (torch.randn(n, head_dim, generator=gen, dtype=torch.float64) for _ in range(3))
        dense_start = time.perf_counter()
        for _ in range(repeats):
            ref, _ = reference_forward(Q, K, V, gamma)
        dense_ms = (time.perf_counter() - dense_start) * 1000 / repeats

        for br, bc in block_sizes:
            plan = BlockPlan(min(br, n), min(bc, n), n)
            start = time.perf_counter()
            for _ in range(repeats):
                out, _ = streamed_forward(Q, K, V, plan, gamma)
            wall_ms = (time.perf_counter() - start) * 1000 / repeats
            records.append(
                {
                    "n": n,
                    "Br": plan.br,
                    "Bc": plan.bc,
                    "wall_ms": wall_ms,
                    "dense_ms": dense_ms,
                    "max_diff": (out - ref).abs().max().item(),
                }
            )
            logger.info("bench n=%d Br=%d Bc=%d %.2fms diff=%.2e", n, plan.br, plan.bc, wall_ms, records[-1]["max_diff"])
    return pd.DataFrame.from_records(records)
