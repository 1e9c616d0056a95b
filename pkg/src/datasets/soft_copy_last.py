"""softCopyLast: a causally isotropic sequence distribution.

The first token is uniform over the vocabulary. The token at 0-based position t
copies its predecessor with probability 1 - e^{-t} and is otherwise uniform, so
the exponent starts at 1 for the first transition.
"""
import math
from typing import Iterator

import torch

from utils.errors import ConfigError

from .synthetic import TaskSample


def soft_copy_prob(t: int) -> float:
    if t < 0:
        raise ConfigError(f"position must be >= 0, got {t}")
    return 1.0 - math.exp(-t)


def soft_copy_last_batch(n: int, count: int, vocab_size: int, generator: torch.Generator) -> torch.Tensor:
    """``count`` independent sequences of length ``n`` as a ``[count, n]`` long tensor."""
    if vocab_size < 2:
        raise ConfigError(f"softCopyLast needs a vocabulary of at least 2, got {vocab_size}")
    seqs = torch.randint(0, vocab_size, (count, n), generator=generator)
    for t in range(1, n):
        copy = torch.rand(count, generator=generator, dtype=torch.float64) < soft_copy_prob(t)
        seqs[:, t] = torch.where(copy, seqs[:, t - 1], seqs[:, t])
    return seqs


def gen_soft_copy_last(n: int, seed: int, vocab_size: int = 16) -> Iterator[TaskSample]:
    """Endless stream of next-token samples over ``n`` positions."""
    gen = torch.Generator().manual_seed(seed)
    while True:
        seq = soft_copy_last_batch(n + 1, 1, vocab_size, gen)[0].tolist()
        yield TaskSample(seq[:n], seq[1:])


def _symmetric_channel_information(rho: float, vocab_size: int) -> float:
    # mutual information of "keep with prob rho, else uniform" under a uniform source
    p = rho + (1.0 - rho) / vocab_size
    q = (1.0 - rho) / vocab_size
    info = math.log(vocab_size) + p * math.log(p)
    if q > 0:
        info += (vocab_size - 1) * q * math.log(q)
    return info


def mutual_info_ratio(i: int, n: int, vocab_size: int = 16) -> float:
    """I(X_{<=i}; X_{n+1}) / I(X_{<=n}; X_{n+1}) for 1-based i <= n.

    The chain is Markov so both terms reduce to a single source symbol, and
    X_i reaches X_{n+1} unchanged with probability prod_{t=i}^{n} (1 - e^{-t}).
    """
    if n < 1:
        raise ConfigError("mutual information ratio is undefined for n = 0")
    if not 1 <= i <= n:
        raise ConfigError(f"prefix end must satisfy 1 <= i <= n, got i={i}, n={n}")
    if vocab_size < 2:
        raise ConfigError(f"softCopyLast needs a vocabulary of at least 2, got {vocab_size}")

    rho = math.prod(soft_copy_prob(t) for t in range(i, n + 1))
    denom = _symmetric_channel_information(soft_copy_prob(n), vocab_size)
    return _symmetric_channel_information(rho, vocab_size) / denom
