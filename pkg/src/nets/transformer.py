import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn

from masks import MaskMode, MaskSpec
from utils.errors import ConfigError, ShapeError, VocabularyError

from .attention import AttnTrace, CausalSelfAttention
from .layers import RMSNorm, SwiGLU
from .position import AbsolutePositionEmbedding, PEConfig

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100

DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass
class MaskConfig:
    kind: str = "stablemask"
    gamma: float = 0.5
    headwise_gamma: bool = False
    pseudo: str = "decay"
    pseudo_value: float = 1e-2


@dataclass
class ModelConfig:
    vocab_size: int = 36
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ffn_expansion: float = 4.0
    pe: PEConfig = field(default_factory=PEConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    max_len: int = 32
    tie_embeddings: bool = False
    norm_eps: float = 1e-6
    init_std: float = 0.02
    dtype: str = "float64"
    # artificial-token slot; None disables it
    at_token: Optional[int] = None
    at_embedding: str = "learnable"

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return max(1, int(round(self.ffn_expansion * self.model_dim)))

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def validate(self) -> None:
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by n_heads {self.n_heads}")
        for name in ("vocab_size", "model_dim", "n_layers", "n_heads", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.mask.kind not in ("vanilla", "stablemask"):
            raise ConfigError(f"unknown mask kind {self.mask.kind!r}")
        if self.mask.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.mask.gamma}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"unknown dtype {self.dtype!r}")
        if self.at_embedding not in ("learnable", "fixed"):
            raise ConfigError(f"unknown at_embedding {self.at_embedding!r}")
        if self.at_token is not None and not 0 <= self.at_token < self.vocab_size:
            raise ConfigError(f"at_token {self.at_token} outside vocab of {self.vocab_size}")
        self.pe.validate(self.n_heads, self.head_dim)

    def mask_spec(self) -> Optional[MaskSpec]:
        if self.mask.kind == "vanilla":
            return None
        build = MaskSpec.geometric if self.mask.headwise_gamma else MaskSpec.uniform
        return build(
            self.n_heads, self.mask.gamma, self.max_len,
            pseudo=self.mask.pseudo, pseudo_value=self.mask.pseudo_value,
        )


@dataclass
class ModelOutput:
    logits: torch.Tensor
    traces: List[AttnTrace] = field(default_factory=list)
    # residual stream right after each layer's attention
    hidden: List[torch.Tensor] = field(default_factory=list)


class DecoderBlock(nn.Module):
    def __init__(self, config: ModelConfig, mask: Optional[MaskSpec]) -> None:
        super().__init__()
        self.attn_norm = RMSNorm(config.model_dim, config.norm_eps)
        self.attn = CausalSelfAttention(config.model_dim, config.n_heads, config.pe, mask)
        self.ffn_norm = RMSNorm(config.model_dim, config.norm_eps)
        self.ffn = SwiGLU(config.model_dim, config.ffn_dim)

    def forward(self, x, positions=None, mode=None, return_trace=False):
        a, trace = self.attn(self.attn_norm(x), positions, mode, return_trace)
        x = x + a
        mid = x
        x = x + self.ffn(self.ffn_norm(x))
        return x, trace, mid


class DecoderLM(nn.Module):
    """Pre-norm decoder-only transformer."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        self.mask_spec = config.mask_spec()

        self.embed = nn.Embedding(config.vocab_size, config.model_dim)
        self.ape = (
            AbsolutePositionEmbedding(config.pe.kind, config.max_len, config.model_dim)
            if config.pe.is_absolute
            else None
        )
        self.blocks = nn.ModuleList([DecoderBlock(config, self.mask_spec) for _ in range(config.n_layers)])
        self.norm = RMSNorm(config.model_dim, config.norm_eps)
        self.lm_head = nn.Linear(config.model_dim, config.vocab_size, bias=True)

        self.apply(self._init_weights)
        if config.tie_embeddings:
            self.lm_head.weight = self.embed.weight
        if self.ape is not None and isinstance(self.ape.table, nn.Parameter):
            nn.init.normal_(self.ape.table, mean=0.0, std=config.init_std)
        self.to(config.torch_dtype)

        self.fixed_at: Optional[int] = None
        if config.at_token is not None and config.at_embedding == "fixed":
            # AT inputs read this zero buffer; a tied lm_head row still trains
            self.fixed_at = config.at_token
            self.register_buffer("at_vector", torch.zeros(config.model_dim, dtype=config.torch_dtype))

    def _init_weights(self, module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=self.config.init_std)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=self.config.init_std)

    def _check_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise VocabularyError(
                f"token ids must lie in [0, {self.config.vocab_size}), got [{int(tokens.min())}, {int(tokens.max())}]"
            )
        return tokens

    def embed_tokens(self, tokens: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        x = self.embed(tokens)
        if self.fixed_at is not None:
            x = torch.where((tokens == self.fixed_at).unsqueeze(-1), self.at_vector, x)
        if self.ape is not None:
            x = x + self.ape(positions)
        return x

    def forward(
        self,
        tokens: torch.Tensor,
        mode: Union[MaskMode, str] = MaskMode.TRAIN,
        return_trace: bool = False,
        return_hidden: bool = False,
    ) -> ModelOutput:
        tokens = self._check_tokens(tokens)
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        mode = MaskMode(mode)

        x = self.embed_tokens(tokens, positions)
        traces, hidden = [], []
        for block in self.blocks:
            x, trace, mid = block(x, positions, mode, return_trace)
            if trace is not None:
                traces.append(trace)
            if return_hidden:
                hidden.append(mid)
        return ModelOutput(self.lm_head(self.norm(x)), traces, hidden)

    def forward_logits(self, tokens: torch.Tensor, mode: Union[MaskMode, str] = MaskMode.TRAIN) -> torch.Tensor:
        return self(tokens, mode).logits


def loss_lm(model: DecoderLM, tokens: torch.Tensor) -> torch.Tensor:
    """Next-token cross-entropy averaged over the n-1 predicted positions."""
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if tokens.shape[1] < 2:
        raise ShapeError(f"loss_lm needs at least two tokens per sequence, got {tokens.shape[1]}")
    logits = model(tokens).logits
    return F.cross_entropy(logits[:, :-1].flatten(0, 1), tokens[:, 1:].flatten())


def task_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over every position whose target is not IGNORE_INDEX."""
    return F.cross_entropy(logits.flatten(0, 1), targets.flatten(), ignore_index=IGNORE_INDEX)


@dataclass
class ProbeAssignment:
    head: int
    input_dim: int
    output_dim: int


def construct_position_probe_weights(model: DecoderLM) -> ProbeAssignment:
    """Set the first layer so that hidden dim 1 after attention holds the mask ratio.

    Every token embeds to e_0 and the first norm leaves dim 0 at exactly 1. Head 0
    has zero query/key weights, so its scores are constant, reads dim 0 as its value
    and writes its output to dim 1; the other heads are kept out of dims 0 and 1.
    Under StableMask the value at row i then equals i / (i + sum_{j=i}^{n-1} e^{-j gamma}).
    """
    config = model.config
    if model.mask_spec is None:
        raise ConfigError("position probe construction needs a StableMask model")
    if config.pe.kind == "alibi" or config.pe.is_absolute:
        raise ConfigError(f"position probe construction is undefined with {config.pe.kind!r} encoding")
    if config.model_dim < 2:
        raise ConfigError("position probe construction needs two reserved model dims")

    d, e = config.model_dim, config.head_dim
    block = model.blocks[0]
    attn = block.attn
    with torch.no_grad():
        model.embed.weight.zero_()
        model.embed.weight[:, 0] = 1.0

        block.attn_norm.weight.fill_(1.0)
        block.attn_norm.weight[0] = math.sqrt(1.0 / d + block.attn_norm.eps)

        attn.q_proj.weight[:e].zero_()
        attn.k_proj.weight[:e].zero_()
        attn.v_proj.weight[:e].zero_()
        attn.v_proj.weight[0, 0] = 1.0

        attn.o_proj.weight[:, :e].zero_()
        attn.o_proj.weight[:2, :].zero_()
        attn.o_proj.weight[1, 0] = 1.0

    logger.debug("position probe weights set on head 0 of layer 0")
    return ProbeAssignment(head=0, input_dim=0, output_dim=1)
