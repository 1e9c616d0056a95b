"""Read-only diagnostics over a frozen model's attention.

Query row ``q`` (0-based) predicts the token at ``q + 1``. A prefix ending at
column ``p`` covers keys ``0..p``. The disproportional-attention test flags the
pair (p, q) when the prefix holds more attention than its share of the mutual
information about the next token allows:

    sum_{j<=p} A[q, j] > ratio(p, q) * sum_{j<=q} A[q, j] + eps
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
import torch

from datasets import mutual_info_ratio
from masks import MaskMode
from nets import AttnTrace, DecoderLM
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_EPS = 0.05


def mutual_info_table(n: int, vocab_size: int = 16) -> torch.Tensor:
    """``[n, n]`` table of softCopyLast information ratios; entry (q, p) is set for p < q."""
    table = torch.full((n, n), float("nan"), dtype=torch.float64)
    for q in range(1, n):
        for p in range(q):
            table[q, p] = mutual_info_ratio(p + 1, q + 1, vocab_size)
    return table


def da_flags(probs: torch.Tensor, ratios: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Boolean ``[..., n, n]`` flags, true at (q, p) where the prefix ending at p is over-attended.

    ``probs`` are post-softmax rows ``[..., n, n]``; only p < q can be set.
    """
    n = probs.shape[-1]
    if probs.shape[-2] != n or ratios.shape != (n, n):
        raise ShapeError(f"attention {tuple(probs.shape[-2:])} and ratios {tuple(ratios.shape)} disagree")
    prefix = probs.to(torch.float64).cumsum(dim=-1)
    total = prefix.diagonal(dim1=-2, dim2=-1).unsqueeze(-1)
    valid = torch.ones(n, n, dtype=torch.bool).tril(-1)
    bound = torch.nan_to_num(ratios, nan=0.0) * total + eps
    return (prefix > bound) & valid


@dataclass
class DAReport:
    eps: float
    n_inputs: int
    # fraction of inputs with at least one flagged pair in any layer or head
    union_rate: float
    pair_rates: pd.DataFrame
    head_union_rates: pd.DataFrame
    first_token_mass: pd.DataFrame
    class_mass: pd.DataFrame

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eps": self.eps,
            "n_inputs": self.n_inputs,
            "union_rate": self.union_rate,
            "pair_rates": self.pair_rates.to_dict(orient="records"),
            "head_union_rates": self.head_union_rates.to_dict(orient="records"),
            "first_token_mass": self.first_token_mass.to_dict(orient="records"),
            "class_mass": self.class_mass.to_dict(orient="records"),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _as_batch(sequences: Union[torch.Tensor, Sequence[Sequence[int]]]) -> torch.Tensor:
    tokens = torch.as_tensor(sequences)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if tokens.dim() != 2 or tokens.shape[0] == 0:
        raise ShapeError(f"expected a non-empty [count, n] batch of sequences, got {tuple(tokens.shape)}")
    return tokens


def _traces(model: DecoderLM, tokens: torch.Tensor, mode: MaskMode) -> List[AttnTrace]:
    model.eval()
    with torch.no_grad():
        return model(tokens, mode, return_trace=True).traces


def da_scan(
    model: DecoderLM,
    sequences: Union[torch.Tensor, Sequence[Sequence[int]]],
    eps: float = DEFAULT_EPS,
    vocab_size: int = 16,
    mode: MaskMode = MaskMode.TRAIN,
    sentinel_tokens: Sequence[int] = (),
    batch_size: int = 64,
) -> DAReport:
    """Disproportional-attention scan of softCopyLast ``sequences``."""
    if eps < 0:
        raise ConfigError(f"eps must be >= 0, got {eps}")
    tokens = _as_batch(sequences)
    count, n = tokens.shape
    ratios = mutual_info_table(n, vocab_size)
    sentinel = torch.zeros(model.config.vocab_size, dtype=torch.bool)
    if sentinel_tokens:
        sentinel[list(sentinel_tokens)] = True

    pair_counts = None
    head_hits = None
    input_hit = torch.zeros(count, dtype=torch.bool)
    first_mass = None
    class_sums = None

    for start in range(0, count, batch_size):
        chunk = tokens[start : start + batch_size]
        traces = _traces(model, chunk, mode)
        # [B, layers, H, n, n]
        probs = torch.stack([t.probs for t in traces], dim=1).to(torch.float64)
        flags = da_flags(probs, ratios, eps)

        hits = flags.flatten(-2).any(-1)
        input_hit[start : start + chunk.shape[0]] = hits.flatten(1).any(-1)
        pair_counts = flags.sum(0) if pair_counts is None else pair_counts + flags.sum(0)
        head_hits = hits.sum(0) if head_hits is None else head_hits + hits.sum(0)

        first = probs[..., 0].sum(0)
        first_mass = first if first_mass is None else first_mass + first

        # token classes: initial position, sentinel ids elsewhere, everything else
        is_sentinel = sentinel[chunk].clone()
        is_sentinel[:, 0] = False
        initial = probs[..., 0].sum(-1)
        sent = (probs * is_sentinel[:, None, None, None, :]).sum(-1).sum(-1)
        other = probs.sum(-1).sum(-1) - initial - sent
        sums = torch.stack([initial, sent, other], dim=-1).sum(0)
        class_sums = sums if class_sums is None else class_sums + sums

    n_layers, n_heads = head_hits.shape
    pair_rows, head_rows, first_rows, class_rows = [], [], [], []
    for layer in range(n_layers):
        for head in range(n_heads):
            head_rows.append({"layer": layer, "head": head, "rate": head_hits[layer, head].item() / count})
            for q in range(n):
                first_rows.append(
                    {"layer": layer, "head": head, "position": q, "mass": first_mass[layer, head, q].item() / count}
                )
                for p in range(q):
                    pair_rows.append(
                        {
                            "layer": layer,
                            "head": head,
                            "query": q,
                            "prefix_end": p,
                            "ratio": ratios[q, p].item(),
                            "rate": pair_counts[layer, head, q, p].item() / count,
                        }
                    )
            for k, name in enumerate(("initial", "sentinel", "other")):
                class_rows.append(
                    {"layer": layer, "head": head, "token_class": name, "mass": class_sums[layer, head, k].item() / (count * n)}
                )

    union_rate = input_hit.double().mean().item()
    logger.info("DA scan over %d inputs: union rate %.4f at eps=%.3f", count, union_rate, eps)
    return DAReport(
        eps=eps,
        n_inputs=count,
        union_rate=union_rate,
        pair_rates=pd.DataFrame.from_records(
            pair_rows, columns=["layer", "head", "query", "prefix_end", "ratio", "rate"]
        ),
        head_union_rates=pd.DataFrame.from_records(head_rows),
        first_token_mass=pd.DataFrame.from_records(first_rows),
        class_mass=pd.DataFrame.from_records(class_rows),
    )


def mask_ratio_curve(
    model: DecoderLM, tokens: Union[torch.Tensor, Sequence[int]], mode: MaskMode = MaskMode.TRAIN
) -> pd.DataFrame:
    """Per-position mask ratio averaged over layers, heads and the batch."""
    traces = _traces(model, _as_batch(tokens), mode)
    alpha = torch.stack([t.alpha for t in traces]).mean(dim=(0, 1, 2))
    return pd.DataFrame({"position": range(alpha.shape[0]), "alpha": alpha.tolist()})


def first_token_trend(
    model: DecoderLM,
    sequences: Union[torch.Tensor, Sequence[Sequence[int]]],
    mode: MaskMode = MaskMode.TRAIN,
    layer: Optional[int] = None,
) -> pd.DataFrame:
    """Mean attention on the initial token by query position, averaged over heads.

    With ``layer=None`` the average also runs over layers.
    """
    traces = _traces(model, _as_batch(sequences), mode)
    if layer is not None:
        traces = [traces[layer]]
    mass = torch.stack([t.probs[..., 0] for t in traces]).mean(dim=(0, 1, 2))
    return pd.DataFrame({"position": range(mass.shape[0]), "mass": mass.tolist()})


def dump_attention(trace: Union[AttnTrace, Sequence[AttnTrace]], path, batch: int = 0) -> pd.DataFrame:
    """Write every layer/head matrix as CSV rows ``layer, head, row, k0..k{n-1}, row_sum``."""
    traces = [trace] if isinstance(trace, AttnTrace) else list(trace)
    frames = []
    for layer, t in enumerate(traces):
        probs = t.probs[batch].to(torch.float64)
        n_heads, n, _ = probs.shape
        for head in range(n_heads):
            df = pd.DataFrame(probs[head].tolist(), columns=[f"k{j}" for j in range(n)])
            df.insert(0, "row", range(n))
            df.insert(0, "head", head)
            df.insert(0, "layer", layer)
            df["row_sum"] = t.alpha[batch, head].to(torch.float64).tolist()
            frames.append(df)
    out = pd.concat(frames, ignore_index=True)
    out.to_csv(path, index=False, float_format="%.17g")
    return out


def load_attention_dump(path) -> Dict[Tuple[int, int], torch.Tensor]:
    df = pd.read_csv(path, float_precision="round_trip")
    cols = [c for c in df.columns if c.startswith("k")]
    mats = {}
    for (layer, head), group in df.groupby(["layer", "head"], sort=True):
        group = group.sort_values("row")
        mats[(int(layer), int(head))] = torch.tensor(group[cols].to_numpy(), dtype=torch.float64)
    return mats
