import pytest
import torch

from nets import DecoderLM, MaskConfig, ModelConfig, PEConfig


def tiny_config(**overrides) -> ModelConfig:
    kwargs = dict(vocab_size=11, model_dim=16, n_layers=2, n_heads=2, max_len=8)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture
def make_model():
    def _make(seed: int = 0, **overrides) -> DecoderLM:
        torch.manual_seed(seed)
        return DecoderLM(tiny_config(**overrides)).eval()

    return _make


@pytest.fixture
def stablemask_model(make_model):
    return make_model()


@pytest.fixture
def vanilla_model(make_model):
    return make_model(mask=MaskConfig(kind="vanilla"))


@pytest.fixture
def alibi_model(make_model):
    return make_model(pe=PEConfig(kind="alibi"))
