"""StableMask algebra.

Scores of a length-n sequence are remasked as ``softmax(A * C + P) * C`` where C is
the causal 0/1 mask and P holds pseudo-attention scores in the strict upper
triangle. With the ``decay`` schedule the pseudo score at 0-based column c is
``-c * gamma``, so every row except the last keeps some probability mass away
from real tokens and the real mass (the mask ratio) grows with the row index.

At inference a single extra column with score tau stands in for the pseudo
columns a row would have seen at the training length N.

Indices are 0-based throughout: row r, column c, pseudo entries where c > r.
"""
import logging
import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import torch

from numerics import elementwise, neg, softmax_rows
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

PSEUDO_SCHEDULES = ("decay", "zero", "constant", "none")

Gamma = Union[float, torch.Tensor]


class MaskMode(str, Enum):
    TRAIN = "train"
    INFER = "infer"
    EXTRAPOLATE = "extrapolate"


@dataclass(frozen=True)
class MaskSpec:
    gamma_per_head: Tuple[float, ...]
    max_train_len: int
    mode: MaskMode = MaskMode.TRAIN
    pseudo: str = "decay"
    pseudo_value: float = 1e-2

    def __post_init__(self) -> None:
        object.__setattr__(self, "gamma_per_head", tuple(float(g) for g in self.gamma_per_head))
        object.__setattr__(self, "mode", MaskMode(self.mode))
        if not self.gamma_per_head:
            raise ConfigError("MaskSpec needs at least one head")
        if any(g <= 0 or not math.isfinite(g) for g in self.gamma_per_head):
            raise ConfigError(f"gamma must be positive and finite, got {self.gamma_per_head}")
        if self.max_train_len < 1:
            raise ConfigError(f"max_train_len must be >= 1, got {self.max_train_len}")
        if self.pseudo not in PSEUDO_SCHEDULES:
            raise ConfigError(f"unknown pseudo schedule {self.pseudo!r}, expected one of {PSEUDO_SCHEDULES}")

    @classmethod
    def uniform(cls, n_heads: int, gamma: float, max_train_len: int, **kwargs) -> "MaskSpec":
        return cls((gamma,) * n_heads, max_train_len, **kwargs)

    @classmethod
    def geometric(cls, n_heads: int, gamma: float, max_train_len: int, **kwargs) -> "MaskSpec":
        """gamma_h = gamma * 2^(1 - 2h/H) for h = 1..H, the last head gets gamma/2."""
        gammas = tuple(gamma * 2.0 ** (1.0 - 2.0 * h / n_heads) for h in range(1, n_heads + 1))
        return cls(gammas, max_train_len, **kwargs)

    @property
    def n_heads(self) -> int:
        return len(self.gamma_per_head)

    def gammas(self, dtype: torch.dtype = torch.float64, device=None) -> torch.Tensor:
        return torch.tensor(self.gamma_per_head, dtype=dtype, device=device)

    def with_mode(self, mode: Union[MaskMode, str]) -> "MaskSpec":
        return replace(self, mode=MaskMode(mode))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["gamma_per_head"] = list(self.gamma_per_head)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "MaskSpec":
        return cls(
            gamma_per_head=tuple(d["gamma_per_head"]),
            max_train_len=int(d["max_train_len"]),
            mode=MaskMode(d.get("mode", "train")),
            pseudo=d.get("pseudo", "decay"),
            pseudo_value=float(d.get("pseudo_value", 1e-2)),
        )


@dataclass
class MaskPair:
    C: torch.Tensor
    P: torch.Tensor


def _check_gamma(gamma: Gamma) -> None:
    g = torch.as_tensor(gamma)
    if (g <= 0).any():
        raise ConfigError(f"gamma must be positive, got {gamma}")


def _broadcast_gamma(gamma: Gamma, cols: torch.Tensor) -> Union[float, torch.Tensor]:
    # per-head gammas get two trailing axes so they line up with (rows, cols)
    if isinstance(gamma, torch.Tensor) and gamma.dim() > 0:
        return gamma.to(cols.dtype).reshape(*gamma.shape, 1, 1)
    return float(gamma)


def pseudo_scores(
    rows: torch.Tensor,
    cols: torch.Tensor,
    gamma: Gamma,
    pseudo: str = "decay",
    pseudo_value: float = 1e-2,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """Pseudo scores for global (row, col) index grids.

    ``rows`` and ``cols`` broadcast against each other (typically ``[r, 1]`` and
    ``[1, c]``). A tensor gamma of shape ``[H]`` adds a leading head axis.
    Entries on or below the diagonal are 0.
    """
    rows = rows.to(dtype)
    cols = cols.to(dtype)
    above = cols > rows
    if pseudo == "decay":
        score = neg(cols * _broadcast_gamma(gamma, cols))
    elif pseudo == "zero":
        score = torch.zeros_like(cols)
    elif pseudo == "constant":
        score = torch.full_like(cols, pseudo_value)
    elif pseudo == "none":
        score = torch.full_like(cols, -math.inf)
    else:
        raise ConfigError(f"unknown pseudo schedule {pseudo!r}")
    score, above = torch.broadcast_tensors(score, above)
    return torch.where(above, score, torch.zeros((), dtype=dtype))


def causal_ones(rows: torch.Tensor, cols: torch.Tensor, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    return (cols <= rows).to(dtype)


def build_masks(
    n: int,
    gamma: Gamma,
    pseudo: str = "decay",
    pseudo_value: float = 1e-2,
    dtype: torch.dtype = torch.float64,
    device=None,
) -> MaskPair:
    if n < 1:
        raise ShapeError(f"mask length must be >= 1, got {n}")
    _check_gamma(gamma)
    idx = torch.arange(n, device=device)
    rows, cols = idx[:, None], idx[None, :]
    return MaskPair(
        C=causal_ones(rows, cols, dtype),
        P=pseudo_scores(rows, cols, gamma, pseudo, pseudo_value, dtype),
    )


def masks_for(spec: MaskSpec, n: int, dtype: torch.dtype = torch.float64, device=None) -> MaskPair:
    """Per-head masks: C is ``[n, n]``, P is ``[H, n, n]``."""
    return build_masks(n, spec.gammas(dtype, device), spec.pseudo, spec.pseudo_value, dtype, device)


def apply_stablemask(
    A: torch.Tensor,
    masks: MaskPair,
    tau: Optional[Union[float, torch.Tensor]] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Remask square scores ``A[..., n, n]``; returns (probs, mask ratio per row).

    ``tau`` appends one extra column before the softmax. It is a float or a tensor
    broadcastable to ``A.shape[:-1]`` (e.g. ``[H, 1]`` for per-head values).
    """
    n = A.shape[-1]
    if A.dim() < 2 or A.shape[-2] != n:
        raise ShapeError(f"apply_stablemask needs square scores, got {tuple(A.shape)}")
    if masks.C.shape[-1] != n:
        raise ShapeError(f"mask of size {masks.C.shape[-1]} does not fit scores of size {n}")

    scores = elementwise(elementwise(A, masks.C, "mul"), masks.P, "add")
    if tau is not None:
        tau_col = torch.as_tensor(tau, dtype=scores.dtype, device=scores.device)
        tau_col = tau_col.expand(scores.shape[:-1]).unsqueeze(-1)
        probs = softmax_rows(torch.cat([scores, tau_col], dim=-1))[..., :n]
    else:
        probs = softmax_rows(scores)

    probs = elementwise(probs, masks.C, "mul")
    return probs, probs.sum(dim=-1)


def _schedule_score(col: Union[int, torch.Tensor], gamma: float, pseudo: str, pseudo_value: float) -> torch.Tensor:
    col = torch.as_tensor(col, dtype=torch.float64)
    if pseudo == "decay":
        return -col * gamma
    if pseudo == "zero":
        return torch.zeros_like(col)
    if pseudo == "constant":
        return torch.full_like(col, pseudo_value)
    if pseudo == "none":
        return torch.full_like(col, -math.inf)
    raise ConfigError(f"unknown pseudo schedule {pseudo!r}")


def tau_infer(n: int, N: int, gamma: float, pseudo: str = "decay", pseudo_value: float = 1e-2) -> float:
    """log of the pseudo mass held by columns n..N-1; -inf when n == N."""
    if n < 1:
        raise ShapeError(f"sequence length must be >= 1, got {n}")
    if n > N:
        raise ShapeError(f"infer mode needs n <= N, got n={n} > N={N}")
    _check_gamma(gamma)
    if n == N:
        return -math.inf
    scores = _schedule_score(torch.arange(n, N), gamma, pseudo, pseudo_value)
    return torch.logsumexp(scores, dim=0).item()


def tau_extrapolate(n: int, gamma: float, pseudo: str = "decay", pseudo_value: float = 1e-2) -> float:
    """Score of the first column past the sequence, -n * gamma for the decay schedule."""
    _check_gamma(gamma)
    return _schedule_score(n, gamma, pseudo, pseudo_value).item()


def resolve_tau(spec: MaskSpec, n: int, mode: Optional[MaskMode] = None) -> Optional[torch.Tensor]:
    """Per-head suffix score for a length-n sequence, or None when no suffix applies.

    train: no suffix (n must not exceed N).
    infer: tau_infer, n <= N.
    extrapolate: tau_infer up to N, tau_extrapolate past N.
    """
    mode = MaskMode(mode or spec.mode)
    N = spec.max_train_len
    if mode is MaskMode.TRAIN:
        if n > N:
            raise ShapeError(f"train mode needs n <= N, got n={n} > N={N}")
        return None
    if mode is MaskMode.INFER or n <= N:
        taus = [tau_infer(n, N, g, spec.pseudo, spec.pseudo_value) for g in spec.gamma_per_head]
    else:
        taus = [tau_extrapolate(n, g, spec.pseudo, spec.pseudo_value) for g in spec.gamma_per_head]
    return torch.tensor(taus, dtype=torch.float64)


def build_infer_row(
    real_logits: torch.Tensor,
    n: int,
    N: int,
    gamma: Gamma,
    row: Optional[int] = None,
    pseudo: str = "decay",
    pseudo_value: float = 1e-2,
    mode: Union[MaskMode, str] = MaskMode.INFER,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """One attention row of a length-n sequence as it would look at length N.

    ``real_logits[..., m]`` are the visible scores. The row's global 0-based index
    is ``row`` (default ``m - 1``); pseudo columns row+1..n-1 follow the real ones,
    then the tau column. With a sliding window m is smaller than row + 1.
    A tensor gamma of shape ``[H]`` must line up with the axis before the last.
    """
    m = real_logits.shape[-1]
    row = m - 1 if row is None else row
    if m > n or row >= n:
        raise ShapeError(f"row {row} with {m} keys does not fit a length-{n} sequence")
    mode = MaskMode(mode)

    g = gamma if isinstance(gamma, torch.Tensor) else torch.tensor(float(gamma), dtype=torch.float64)
    per_head = g.reshape(-1).tolist()
    if mode is MaskMode.INFER:
        taus = [tau_infer(n, N, gh, pseudo, pseudo_value) for gh in per_head]
    elif mode is MaskMode.EXTRAPOLATE:
        taus = [
            tau_infer(n, N, gh, pseudo, pseudo_value) if n <= N else tau_extrapolate(n, gh, pseudo, pseudo_value)
            for gh in per_head
        ]
    else:
        raise ShapeError("build_infer_row is only defined for infer and extrapolate modes")

    dtype = real_logits.dtype
    lead = real_logits.shape[:-1]
    pieces = [real_logits]
    if row + 1 < n:
        cols = torch.arange(row + 1, n, device=real_logits.device)
        rows = torch.tensor([row], device=real_logits.device)
        extra = pseudo_scores(rows[:, None], cols[None, :], g.to(dtype) if g.dim() else g.item(), pseudo, pseudo_value, dtype)
        extra = extra.squeeze(-2)
        pieces.append(extra.expand(*lead, n - row - 1))
    tau = torch.tensor(taus, dtype=dtype, device=real_logits.device).reshape(g.shape)
    pieces.append(tau.expand(lead).unsqueeze(-1) if tau.dim() else tau.expand(*lead, 1))

    probs = softmax_rows(torch.cat(pieces, dim=-1))[..., :m]
    return probs, probs.sum(dim=-1)


def closed_form_mask_ratio(n: int, gamma: float) -> torch.Tensor:
    """xi_i = i / (i + sum_{j=i}^{n-1} e^{-j gamma}) for i = 1..n under constant scores."""
    i = torch.arange(1, n + 1, dtype=torch.float64)
    decay = torch.exp(-gamma * torch.arange(n, dtype=torch.float64))
    # suffix[i-1] = sum of decay[j] for j >= i
    suffix = torch.flip(torch.cumsum(torch.flip(decay, [0]), 0), [0])
    tail = torch.cat([suffix[1:], torch.zeros(1, dtype=torch.float64)])
    return i / (i + tail)
