import math

import pytest
import torch

from nets.position import (
    AbsolutePositionEmbedding,
    PEConfig,
    alibi_bias,
    alibi_slopes,
    ape_embed,
    rope_rotate,
    sinusoidal_table,
)
from utils.errors import ConfigError, ShapeError


class TestRope:
    def test_position_zero_is_identity(self):
        x = torch.randn(1, 8, dtype=torch.float64)
        torch.testing.assert_close(rope_rotate(x, torch.tensor([0])), x)

    def test_preserves_norm(self):
        x = torch.randn(5, 16, dtype=torch.float64)
        y = rope_rotate(x, torch.arange(5))
        torch.testing.assert_close(y.norm(dim=-1), x.norm(dim=-1))

    def test_dot_product_depends_on_offset_only(self):
        q = torch.randn(1, 8, dtype=torch.float64)
        k = torch.randn(1, 8, dtype=torch.float64)
        near = rope_rotate(q, torch.tensor([5])) @ rope_rotate(k, torch.tensor([3])).T
        far = rope_rotate(q, torch.tensor([105])) @ rope_rotate(k, torch.tensor([103])).T
        torch.testing.assert_close(near, far, rtol=0, atol=1e-10)

    def test_first_pair_rotation(self):
        x = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        y = rope_rotate(x, torch.tensor([1]))
        torch.testing.assert_close(y, torch.tensor([[math.cos(1.0), math.sin(1.0)]], dtype=torch.float64))

    def test_rejects_odd_dim(self):
        with pytest.raises(ShapeError):
            rope_rotate(torch.zeros(2, 3), torch.arange(2))

    def test_rejects_position_count_mismatch(self):
        with pytest.raises(ShapeError):
            rope_rotate(torch.zeros(3, 4), torch.arange(2))


class TestAlibi:
    def test_bias_values(self):
        bias = alibi_bias(4, 0.5)
        expected = torch.tensor(
            [[0.0, 0.0, 0.0, 0.0], [-0.5, 0.0, 0.0, 0.0], [-1.0, -0.5, 0.0, 0.0], [-1.5, -1.0, -0.5, 0.0]],
            dtype=torch.float64,
        )
        torch.testing.assert_close(bias, expected)

    def test_default_slopes(self):
        torch.testing.assert_close(
            alibi_slopes(4), torch.tensor([2.0**-2, 2.0**-4, 2.0**-6, 2.0**-8], dtype=torch.float64)
        )

    def test_explicit_slopes(self):
        cfg = PEConfig(kind="alibi", alibi_slopes=[0.5, 0.25])
        cfg.validate(n_heads=2, head_dim=4)
        torch.testing.assert_close(cfg.slopes(2), torch.tensor([0.5, 0.25], dtype=torch.float64))

    def test_rejects_bad_slopes(self):
        with pytest.raises(ConfigError):
            alibi_bias(4, 0.0)
        with pytest.raises(ConfigError):
            PEConfig(kind="alibi", alibi_slopes=[0.5]).validate(n_heads=2, head_dim=4)
        with pytest.raises(ConfigError):
            PEConfig(kind="alibi", alibi_slopes=[0.5, -1.0]).validate(n_heads=2, head_dim=4)


class TestAbsolute:
    def test_sinusoidal_table(self):
        table = sinusoidal_table(6, 4)
        assert table.shape == (6, 4)
        torch.testing.assert_close(table[0], torch.tensor([0.0, 1.0, 0.0, 1.0], dtype=torch.float64))
        assert table[3, 0].item() == pytest.approx(math.sin(3.0))
        assert table[3, 2].item() == pytest.approx(math.sin(3.0 / 100.0))

    def test_lookup_beyond_table(self):
        table = sinusoidal_table(4, 2)
        torch.testing.assert_close(ape_embed(torch.tensor([1, 3]), table), table[[1, 3]])
        with pytest.raises(ShapeError):
            ape_embed(torch.tensor([4]), table)

    def test_learned_table_is_a_parameter(self):
        module = AbsolutePositionEmbedding("ape-learn", 8, 4)
        assert isinstance(module.table, torch.nn.Parameter)
        assert module(torch.arange(3)).shape == (3, 4)

    def test_rejects_relative_kind(self):
        with pytest.raises(ConfigError):
            AbsolutePositionEmbedding("rope", 8, 4)

    def test_config_rejects_unknown_kind(self):
        with pytest.raises(ConfigError):
            PEConfig(kind="xpos").validate(2, 4)
        with pytest.raises(ConfigError):
            PEConfig(kind="rope").validate(2, 3)
        assert PEConfig(kind="ape-sin").is_absolute
        assert not PEConfig(kind="rope").is_absolute
