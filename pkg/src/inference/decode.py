"""Incremental decoding.

Each step appends the new token's keys and values to the cache and computes only
the newest attention row. Under StableMask that row carries the inference suffix
column, so a prefix of length n < N reproduces the rows a length-N training pass
would have produced.
"""
import copy
import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import pandas as pd
import torch
import torch.nn.functional as F

from masks import MaskMode
from nets import DecoderLM
from utils.errors import ConfigError

from .kv_cache import KVCache

logger = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    max_new_tokens: int = 32
    sampling: str = "greedy"
    temperature: float = 1.0
    window: Optional[int] = None
    reindex_positions: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.max_new_tokens < 0:
            raise ConfigError(f"max_new_tokens must be >= 0, got {self.max_new_tokens}")
        if self.sampling not in ("greedy", "temperature"):
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if self.sampling == "temperature" and self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.window is not None and self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")


@torch.no_grad()
def decode_step(
    model: DecoderLM, cache: KVCache, token: int, reindex_positions: bool = False
) -> Tuple[torch.Tensor, KVCache]:
    """Feed one token; returns the next-token logits ``[vocab]`` and the cache."""
    cache.validate()
    n = cache.length + 1
    tokens = model._check_tokens(torch.tensor([[token]]))
    h = model.embed_tokens(tokens, torch.tensor([n - 1]))

    for li, block in enumerate(model.blocks):
        q, k, v = block.attn.project(block.attn_norm(h))
        cache.append(li, k, v)
        keys, values = cache.layer(li)
        q_pos, k_pos = cache.positions(keys.shape[2], reindex_positions)
        out, _ = block.attn.attend_row(q, keys, values, q_pos, k_pos, n)
        h = h + out
        h = h + block.ffn(block.ffn_norm(h))

    cache.commit()
    return model.lm_head(model.norm(h))[0, -1], cache


def sample_next(logits: torch.Tensor, cfg: DecodeConfig, generator: torch.Generator) -> int:
    if cfg.sampling == "greedy":
        return int(logits.argmax())
    probs = F.softmax(logits / cfg.temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator))


def generate(model: DecoderLM, prompt: Sequence[int], cfg: DecodeConfig = DecodeConfig()) -> List[int]:
    cfg.validate()
    if not prompt:
        raise ConfigError("generation needs a non-empty prompt")
    model.eval()
    cache = KVCache(len(model.blocks), cfg.window)
    gen = torch.Generator().manual_seed(cfg.seed)

    for t in prompt:
        logits, cache = decode_step(model, cache, t, cfg.reindex_positions)
    out = list(prompt)
    for i in range(cfg.max_new_tokens):
        nxt = sample_next(logits, cfg, gen)
        out.append(nxt)
        if i + 1 < cfg.max_new_tokens:
            logits, cache = decode_step(model, cache, nxt, cfg.reindex_positions)
    return out


@torch.no_grad()
def windowed_ppl(
    model: DecoderLM, sequence: Sequence[int], window: int, reindex_positions: bool = False
) -> torch.Tensor:
    """Per-token negative log-likelihood of ``sequence[1:]`` under sliding-window decoding."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    if len(sequence) < 2:
        raise ConfigError("windowed_ppl needs at least two tokens")
    if len(sequence) <= model.config.max_len:
        logger.debug("sequence of %d does not extrapolate past N=%d", len(sequence), model.config.max_len)

    model.eval()
    cache = KVCache(len(model.blocks), window)
    losses = []
    for t, token in enumerate(sequence[:-1]):
        logits, cache = decode_step(model, cache, token, reindex_positions)
        losses.append(-F.log_softmax(logits, dim=-1)[sequence[t + 1]])
    return torch.stack(losses)


def _vanilla_twin(model: DecoderLM) -> DecoderLM:
    """Same weights, plain causal softmax in every layer."""
    twin = copy.deepcopy(model)
    twin.mask_spec = None
    for block in twin.blocks:
        block.attn.mask = None
    return twin


def _cached_ms(model: DecoderLM, seq: torch.Tensor) -> float:
    start = time.perf_counter()
    cache = KVCache(len(model.blocks))
    for token in seq.tolist():
        _, cache = decode_step(model, cache, token)
    return (time.perf_counter() - start) * 1000.0


@torch.no_grad()
def bench_decode(model: DecoderLM, n: int, seed: int = 0) -> pd.DataFrame:
    """Wall time to produce n positions by full recompute versus cached decoding.

    A StableMask model also gets a cached row for its vanilla-mask twin, the
    baseline the suffix-column bookkeeping is measured against.
    """
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    seq = torch.randint(0, model.config.vocab_size, (n,), generator=gen)
    mask = "vanilla" if model.mask_spec is None else "stablemask"

    start = time.perf_counter()
    for t in range(1, n + 1):
        model(seq[:t], MaskMode.EXTRAPOLATE)
    full_ms = (time.perf_counter() - start) * 1000.0

    rows = [
        {"mode": "full_recompute", "mask": mask, "n": n, "wall_ms": full_ms},
        {"mode": "kv_cache", "mask": mask, "n": n, "wall_ms": _cached_ms(model, seq)},
    ]
    if model.mask_spec is not None:
        rows.append({"mode": "kv_cache", "mask": "vanilla", "n": n, "wall_ms": _cached_ms(_vanilla_twin(model), seq)})

    logger.info("decode n=%d %s", n, ", ".join(f"{r['mode']}/{r['mask']}={r['wall_ms']:.1f}ms" for r in rows))
    return pd.DataFrame.from_records(rows)
