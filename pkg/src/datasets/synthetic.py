"""Absolute-position tasks.

Vocabulary: 0 is the filler symbol, 1..n_max are position labels (odd-even uses
1 and 2), n_max + 1 is spare, then the ABE marker and the AT slot.
"""
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import torch

from nets import IGNORE_INDEX
from utils.errors import ConfigError, VocabularyError


@dataclass(frozen=True)
class TaskVocab:
    n_max: int = 32

    @property
    def abe(self) -> int:
        return self.n_max + 2

    @property
    def at(self) -> int:
        return self.n_max + 3

    @property
    def size(self) -> int:
        return self.n_max + 4


@dataclass
class TaskSample:
    input_tokens: List[int]
    target_tokens: List[int]
    eval_mask: List[bool] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.eval_mask:
            self.eval_mask = [t != IGNORE_INDEX for t in self.target_tokens]
        if not (len(self.input_tokens) == len(self.target_tokens) == len(self.eval_mask)):
            raise ConfigError(
                f"sample lengths differ: {len(self.input_tokens)}, {len(self.target_tokens)}, {len(self.eval_mask)}"
            )
        if not any(self.eval_mask):
            raise ConfigError("sample has no scored position")

    def __len__(self) -> int:
        return len(self.input_tokens)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "TaskSample":
        return cls(**json.loads(line))

    def tensors(self):
        return (
            torch.tensor(self.input_tokens, dtype=torch.long),
            torch.tensor(self.target_tokens, dtype=torch.long),
            torch.tensor(self.eval_mask, dtype=torch.bool),
        )


def _check_length(n: int, vocab: TaskVocab) -> None:
    if n < 1:
        raise ConfigError(f"sequence length must be >= 1, got {n}")
    if n > vocab.n_max:
        raise VocabularyError(f"length {n} needs labels beyond n_max={vocab.n_max}")


def gen_pos_mapping(n: int, vocab: TaskVocab = TaskVocab()) -> TaskSample:
    _check_length(n, vocab)
    return TaskSample([0] * n, list(range(1, n + 1)))


def gen_pos_identify(n: int, k: int, vocab: TaskVocab = TaskVocab(), score_all: bool = False) -> TaskSample:
    """ABE at 1-based position k; the target there is k, zeros elsewhere."""
    _check_length(n, vocab)
    if not 1 <= k <= n:
        raise ConfigError(f"marker position must satisfy 1 <= k <= {n}, got {k}")
    inputs = [0] * n
    targets = [0] * n
    inputs[k - 1] = vocab.abe
    targets[k - 1] = k
    mask = [True] * n if score_all else [i == k - 1 for i in range(n)]
    return TaskSample(inputs, targets, mask)


def sample_pos_identify(
    n: int, generator: torch.Generator, vocab: TaskVocab = TaskVocab(), score_all: bool = False
) -> TaskSample:
    k = int(torch.randint(1, n + 1, (1,), generator=generator))
    return gen_pos_identify(n, k, vocab, score_all)


def gen_odd_even(n: int, vocab: TaskVocab = TaskVocab()) -> TaskSample:
    _check_length(n, vocab)
    return TaskSample([0] * n, [1 + (i % 2) for i in range(n)])


def gen_at_baseline(sample: TaskSample, k_tokens: int, vocab: TaskVocab = TaskVocab()) -> TaskSample:
    """Prepend ``k_tokens`` artificial tokens that are never trained on nor scored."""
    if k_tokens < 0:
        raise ConfigError(f"k_tokens must be >= 0, got {k_tokens}")
    return TaskSample(
        [vocab.at] * k_tokens + list(sample.input_tokens),
        [IGNORE_INDEX] * k_tokens + list(sample.target_tokens),
        [False] * k_tokens + list(sample.eval_mask),
    )
