import math

import pytest
import torch

from datasets import TaskSpec
from models import StableMaskLM, TrainConfig
from nets import ModelConfig
from optimizers import AdamW, WarmupDecayLR, adamw_step, lr_at
from utils.errors import ConfigError, NumericalError


def quadratic_params(seed=0):
    gen = torch.Generator().manual_seed(seed)
    return [torch.randn(4, 3, generator=gen, dtype=torch.float64), torch.randn(5, generator=gen, dtype=torch.float64)]


class TestAdamW:
    @pytest.mark.parametrize("weight_decay", [0.0, 0.1])
    def test_matches_torch(self, weight_decay):
        ours = [torch.nn.Parameter(p.clone()) for p in quadratic_params()]
        ref = [torch.nn.Parameter(p.clone()) for p in quadratic_params()]
        opt = AdamW(ours, lr=1e-2, betas=(0.9, 0.98), eps=1e-8, weight_decay=weight_decay)
        ref_opt = torch.optim.AdamW(ref, lr=1e-2, betas=(0.9, 0.98), eps=1e-8, weight_decay=weight_decay)
        for _ in range(5):
            for params, o in ((ours, opt), (ref, ref_opt)):
                o.zero_grad()
                sum((p**2).sum() + p.sin().sum() for p in params).backward()
                o.step()
        for a, b in zip(ours, ref):
            torch.testing.assert_close(a, b, rtol=0, atol=1e-12)

    def test_functional_step_initialises_state(self):
        p = torch.ones(3, dtype=torch.float64)
        state = {}
        adamw_step([p], [torch.full((3,), 2.0, dtype=torch.float64)], [state], lr=0.1)
        assert state["step"] == 1
        # first bias-corrected step moves by lr * g / |g|
        torch.testing.assert_close(p, torch.full((3,), 0.9, dtype=torch.float64), rtol=0, atol=1e-7)

    def test_nan_gradient(self):
        p = torch.zeros(2, dtype=torch.float64)
        with pytest.raises(NumericalError) as info:
            adamw_step([p], [torch.tensor([0.0, float("nan")], dtype=torch.float64)], [{}], lr=0.1)
        assert info.value.diagnostics["nan"] == 1

    def test_rejects_bad_hyperparameters(self):
        with pytest.raises(ValueError):
            AdamW([torch.nn.Parameter(torch.zeros(1))], lr=-1.0)
        with pytest.raises(ValueError):
            AdamW([torch.nn.Parameter(torch.zeros(1))], betas=(1.0, 0.9))


def tiny_module(clip_norm=1.0):
    task = TaskSpec(kind="pos_mapping", seq_len=4, eval_lengths=[3], min_train_len=2, n_max=8, n_train=4, n_eval=2)
    model = ModelConfig(vocab_size=task.vocab_size(), model_dim=8, n_layers=1, n_heads=2, max_len=4)
    return StableMaskLM(model, TrainConfig(clip_norm=clip_norm), task)


def set_grads(module, value):
    for p in module.parameters():
        p.grad = torch.full_like(p, value)


def grad_norm(module):
    return torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad) for p in module.parameters()])).item()


class TestClipping:
    def test_large_gradients_are_scaled_to_the_limit(self):
        module = tiny_module(clip_norm=1.0)
        set_grads(module, 1.0)
        before = grad_norm(module)
        module.on_before_optimizer_step(None)
        assert module.last_grad_norm == pytest.approx(before)
        assert grad_norm(module) == pytest.approx(1.0, rel=1e-5)

    def test_small_gradients_are_left_alone(self):
        module = tiny_module(clip_norm=1e6)
        set_grads(module, 1e-3)
        before = [p.grad.clone() for p in module.parameters()]
        module.on_before_optimizer_step(None)
        for p, g in zip(module.parameters(), before):
            torch.testing.assert_close(p.grad, g, rtol=0, atol=0)

    @pytest.mark.parametrize("bad", [math.inf, math.nan])
    def test_non_finite_gradient_is_a_numerical_error(self, bad):
        module = tiny_module()
        set_grads(module, 0.5)
        next(module.parameters()).grad[0] = bad
        with pytest.raises(NumericalError) as info:
            module.on_before_optimizer_step(None)
        assert info.value.diagnostics["params"] == 1


class TestSchedule:
    @pytest.mark.parametrize(
        "step,decay,expected",
        [
            (0, "cosine", 0.0),
            (5, "cosine", 5e-4),
            (10, "cosine", 1e-3),
            (60, "cosine", 5e-4),
            (110, "cosine", 0.0),
            (500, "cosine", 0.0),
            (60, "linear", 5e-4),
            (85, "linear", 2.5e-4),
        ],
    )
    def test_values(self, step, decay, expected):
        assert lr_at(step, 1e-3, 10, 110, decay=decay) == pytest.approx(expected, abs=1e-15)

    def test_begin_lr(self):
        assert lr_at(0, 1e-3, 10, 110, begin_lr=1e-4) == pytest.approx(1e-4)

    def test_unknown_decay(self):
        with pytest.raises(ConfigError):
            lr_at(0, 1e-3, 10, 110, decay="step")

    def test_scheduler_follows_closed_form(self):
        opt = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=1e-3)
        sched = WarmupDecayLR(opt, warmup_steps=4, total_steps=20)
        for step in range(1, 25):
            opt.step()
            sched.step()
            assert sched.get_last_lr()[0] == pytest.approx(lr_at(step, 1e-3, 4, 20), abs=1e-15)

    def test_scheduler_rejects_long_warmup(self):
        opt = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=1e-3)
        with pytest.raises(ConfigError):
            WarmupDecayLR(opt, warmup_steps=30, total_steps=20)

    def test_get_lr_outside_step_warns(self):
        opt = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=1e-3)
        sched = WarmupDecayLR(opt, warmup_steps=4, total_steps=20)
        with pytest.warns(UserWarning, match="get_last_lr"):
            assert sched.get_lr() == [pytest.approx(0.0)]
