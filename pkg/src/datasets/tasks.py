import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import lightning as L
import torch
from lightning.pytorch.utilities.types import EVAL_DATALOADERS, TRAIN_DATALOADERS
from torch.utils.data import DataLoader, Dataset
from torchmetrics.classification import MulticlassAccuracy

from masks import MaskMode
from nets import IGNORE_INDEX, DecoderLM
from utils.errors import ConfigError

from .char_corpus import BYTE_VOCAB, ingest_char_corpus
from .soft_copy_last import gen_soft_copy_last, soft_copy_last_batch
from .synthetic import (
    TaskSample,
    TaskVocab,
    gen_at_baseline,
    gen_odd_even,
    gen_pos_mapping,
    sample_pos_identify,
)

logger = logging.getLogger(__name__)

TASK_KINDS = ("pos_mapping", "pos_identify", "odd_even", "soft_copy_last", "char_lm")


@dataclass
class TaskSpec:
    kind: str = "pos_mapping"
    seq_len: int = 32
    # position tasks: held out from training and evaluated on their own
    eval_lengths: List[int] = field(default_factory=lambda: [7, 15, 23, 31])
    min_train_len: int = 4
    # masks for scoring held-out lengths: "train" (n x n) or "infer" (suffix up to seq_len)
    eval_mode: str = "train"
    n_max: int = 32
    n_train: int = 512
    n_eval: int = 64
    seed: int = 0
    at_tokens: int = 0
    soft_copy_vocab: int = 16
    corpus_path: Optional[str] = None
    eval_fraction: float = 0.1

    @property
    def vocab(self) -> TaskVocab:
        return TaskVocab(self.n_max)

    def vocab_size(self) -> int:
        if self.kind == "char_lm":
            return BYTE_VOCAB
        if self.kind == "soft_copy_last":
            return self.soft_copy_vocab
        return self.vocab.size

    def train_lengths(self) -> List[int]:
        """Lengths in [min_train_len, seq_len] that are not held out."""
        held_out = set(self.eval_lengths)
        return [n for n in range(self.min_train_len, self.seq_len + 1) if n not in held_out]

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task {self.kind!r}, expected one of {TASK_KINDS}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.kind == "char_lm" and not self.corpus_path:
            raise ConfigError("char_lm needs task.corpus_path")
        if self.at_tokens < 0:
            raise ConfigError("at_tokens must be >= 0")
        if self.eval_mode not in ("train", "infer"):
            raise ConfigError(f"eval_mode must be \"train\" or \"infer\", got {self.eval_mode!r}")
        if self.position_task:
            if self.seq_len > self.n_max:
                raise ConfigError(f"seq_len {self.seq_len} exceeds n_max={self.n_max}")
            if not self.eval_lengths:
                raise ConfigError("position tasks need at least one held-out eval length")
            bad = [n for n in self.eval_lengths if not 1 <= n <= self.seq_len]
            if bad:
                raise ConfigError(f"eval lengths {bad} fall outside [1, seq_len={self.seq_len}]")
            if not 1 <= self.min_train_len <= self.seq_len:
                raise ConfigError(f"min_train_len must lie in [1, {self.seq_len}], got {self.min_train_len}")
            if not self.train_lengths():
                raise ConfigError(
                    f"every length in [{self.min_train_len}, {self.seq_len}] is held out for evaluation"
                )

    @property
    def position_task(self) -> bool:
        return self.kind in ("pos_mapping", "pos_identify", "odd_even")


def _position_sample(spec: TaskSpec, n: int, gen: torch.Generator) -> TaskSample:
    if spec.kind == "pos_mapping":
        return gen_pos_mapping(n, spec.vocab)
    if spec.kind == "pos_identify":
        return sample_pos_identify(n, gen, spec.vocab)
    return gen_odd_even(n, spec.vocab)


def build_task_samples(spec: TaskSpec) -> Tuple[List[TaskSample], List[TaskSample]]:
    """(train, eval) samples; a pure function of the TaskSpec and its seed."""
    spec.validate()
    gen = torch.Generator().manual_seed(spec.seed)

    if spec.position_task:
        lengths = spec.train_lengths()
        picks = torch.randint(len(lengths), (spec.n_train,), generator=gen).tolist()
        train = [_position_sample(spec, lengths[i], gen) for i in picks]
        evals = [_position_sample(spec, n, gen) for n in spec.eval_lengths for _ in range(spec.n_eval)]
    elif spec.kind == "soft_copy_last":
        stream = gen_soft_copy_last(spec.seq_len, spec.seed, spec.soft_copy_vocab)
        train = list(itertools.islice(stream, spec.n_train))
        evals = list(itertools.islice(stream, spec.n_eval))
    else:
        samples = ingest_char_corpus(spec.corpus_path, spec.seq_len)
        n_eval = max(1, int(len(samples) * spec.eval_fraction)) if len(samples) > 1 else 0
        train, evals = samples[: len(samples) - n_eval], samples[len(samples) - n_eval :]
        if not evals:
            evals = list(train)

    if spec.at_tokens:
        train = [gen_at_baseline(s, spec.at_tokens, spec.vocab) for s in train]
        evals = [gen_at_baseline(s, spec.at_tokens, spec.vocab) for s in evals]
    logger.info("task %s: %d train / %d eval samples", spec.kind, len(train), len(evals))
    return train, evals


class TaskDataset(Dataset):
    def __init__(self, samples: Sequence[TaskSample]) -> None:
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int):
        return self.samples[idx].tensors()


def length_batches(samples: Sequence[TaskSample], batch_size: int) -> List[List[int]]:
    """Index batches in which every sample has the same length."""
    by_len: Dict[int, List[int]] = {}
    for idx, s in enumerate(samples):
        by_len.setdefault(len(s), []).append(idx)
    return [
        idxs[k : k + batch_size]
        for _, idxs in sorted(by_len.items())
        for k in range(0, len(idxs), batch_size)
    ]


class TaskDataModule(L.LightningDataModule):
    def __init__(self, task: Optional[TaskSpec] = None, batch_size: int = 32, num_workers: int = 0) -> None:
        super().__init__()
        self.task = task if task is not None else TaskSpec()
        self.batch_size = batch_size
        self.num_workers = num_workers

    def setup(self, stage: str) -> None:
        train, evals = build_task_samples(self.task)
        self.train_dataset = TaskDataset(train)
        self.val_dataset = TaskDataset(evals)

    def _loader_kwargs(self):
        if self.num_workers > 0:
            return {"num_workers": self.num_workers, "prefetch_factor": 2, "persistent_workers": True}
        return {}

    def train_dataloader(self) -> TRAIN_DATALOADERS:
        gen = torch.Generator().manual_seed(self.task.seed)
        return DataLoader(
            self.train_dataset,
            batch_sampler=_ShuffledLengthBatches(self.train_dataset.samples, self.batch_size, gen),
            **self._loader_kwargs(),
        )

    def val_dataloader(self) -> EVAL_DATALOADERS:
        return DataLoader(
            self.val_dataset,
            batch_sampler=length_batches(self.val_dataset.samples, self.batch_size),
            **self._loader_kwargs(),
        )


class _ShuffledLengthBatches:
    def __init__(self, samples: Sequence[TaskSample], batch_size: int, generator: torch.Generator) -> None:
        self.samples = samples
        self.batch_size = batch_size
        self.generator = generator

    def __iter__(self):
        order = torch.randperm(len(self.samples), generator=self.generator).tolist()
        shuffled = [self.samples[i] for i in order]
        for batch in length_batches(shuffled, self.batch_size):
            yield [order[i] for i in batch]

    def __len__(self) -> int:
        return len(length_batches(self.samples, self.batch_size))


def eval_mode_for(task: TaskSpec) -> MaskMode:
    return MaskMode(task.eval_mode) if task.position_task else MaskMode.TRAIN


@torch.no_grad()
def eval_accuracy(
    model: DecoderLM,
    samples: Sequence[TaskSample],
    mode: Optional[MaskMode] = None,
    task: Optional[TaskSpec] = None,
) -> float:
    """Greedy argmax exact match over every sample's eval_mask positions."""
    metric = MulticlassAccuracy(
        num_classes=model.config.vocab_size, average="micro", ignore_index=IGNORE_INDEX
    )
    for idxs in length_batches(samples, 64):
        batch = [samples[i] for i in idxs]
        tokens = torch.stack([s.tensors()[0] for s in batch])
        targets = torch.stack([s.tensors()[1] for s in batch])
        scored = torch.stack([s.tensors()[2] for s in batch])
        if mode is not None:
            run_mode = mode
        elif task is not None:
            run_mode = eval_mode_for(task)
        else:
            run_mode = MaskMode.TRAIN
        logits = model(tokens, run_mode).logits
        metric.update(logits.argmax(-1).flatten(), targets.masked_fill(~scored, IGNORE_INDEX).flatten())
    return metric.compute().item()


def write_samples(samples: Sequence[TaskSample], path) -> None:
    """One JSON object per line."""
    with open(path, "w") as f:
        for s in samples:
            f.write(s.to_json() + "\n")


def read_samples(path) -> List[TaskSample]:
    with open(path) as f:
        return [TaskSample.from_json(line) for line in f if line.strip()]


def long_sequences(spec: TaskSpec, length: int, count: int) -> torch.Tensor:
    """``[count, length]`` token sequences for evaluation past the training length."""
    if spec.kind == "soft_copy_last":
        gen = torch.Generator().manual_seed(spec.seed)
        return soft_copy_last_batch(length, count, spec.soft_copy_vocab, gen)
    if spec.kind == "char_lm":
        with open(spec.corpus_path, "rb") as f:
            data = list(f.read())
        if len(data) < length:
            raise ConfigError(f"corpus of {len(data)} bytes is shorter than {length}")
        count = min(count, len(data) // length)
        return torch.tensor(data[: count * length], dtype=torch.long).reshape(count, length)
    raise ConfigError(f"{spec.kind} has no sequences beyond n_max={spec.n_max}")
