from .lm import CHECKPOINT_FORMAT, StableMaskLM, TrainConfig
from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from .fit import FIT_SUBDIR, TRAINER_DEFAULTS, TrainResult, finish_run, train, trainer_overrides
