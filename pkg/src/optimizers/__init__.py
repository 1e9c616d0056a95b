from .adamw import AdamW, adamw_step
from .linear_warmup import WarmupDecayLR, lr_at
