from .position import PEConfig
from .attention import AttnTrace, CausalSelfAttention, HeadWeights, mha_forward
from .streamed_attention import BlockPlan, RowState, block_mask_tiles, streamed_forward
from .transformer import (
    IGNORE_INDEX,
    DecoderLM,
    MaskConfig,
    ModelConfig,
    ModelOutput,
    construct_position_probe_weights,
    loss_lm,
    task_loss,
)
