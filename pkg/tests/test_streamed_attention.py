import itertools

import pytest
import torch

from masks import build_masks
from nets import BlockPlan, block_mask_tiles, streamed_forward
from nets.streamed_attention import benchmark, reference_forward
from utils.errors import ShapeError


def qkv(n, e=8, lead=(2,), seed=0):
    gen = torch.Generator().manual_seed(seed)
    return tuple(torch.randn(*lead, n, e, generator=gen, dtype=torch.float64) for _ in range(3))


STREAM_LENGTHS = (1, 2, 7, 32, 50, 128)
STREAM_GAMMAS = (0.1, 0.5, 1.0)


def stream_grid():
    """Block sizes {1, 3, 8, n} squared for every length, one gamma per seed."""
    for n in STREAM_LENGTHS:
        sizes = sorted({1, 3, 8, n})
        for (br, bc), (seed, gamma) in itertools.product(
            itertools.product(sizes, sizes), enumerate(STREAM_GAMMAS)
        ):
            marks = [pytest.mark.slow] if n == 128 else []
            yield pytest.param(n, min(br, n), min(bc, n), seed, gamma, marks=marks, id=f"n{n}-{br}x{bc}-s{seed}")


class TestStreamedForward:
    @pytest.mark.parametrize("n,br,bc,seed,gamma", list(stream_grid()))
    def test_matches_dense(self, n, br, bc, seed, gamma):
        Q, K, V = qkv(n, seed=seed)
        O, L = streamed_forward(Q, K, V, BlockPlan(br, bc, n), gamma)
        O_ref, L_ref = reference_forward(Q, K, V, gamma)
        torch.testing.assert_close(O, O_ref, rtol=0, atol=1e-10)
        torch.testing.assert_close(L, L_ref, rtol=0, atol=1e-10)

    def test_uneven_blocks(self):
        Q, K, V = qkv(13)
        O, _ = streamed_forward(Q, K, V, BlockPlan(5, 3, 13), 0.5)
        O_ref, _ = reference_forward(Q, K, V, 0.5)
        torch.testing.assert_close(O, O_ref, rtol=0, atol=1e-10)

    def test_parallel_is_bitwise_sequential(self):
        Q, K, V = qkv(40)
        plan = BlockPlan(8, 8, 40)
        seq, _ = streamed_forward(Q, K, V, plan, 0.5)
        par, _ = streamed_forward(Q, K, V, plan, 0.5, parallel=True, max_workers=4)
        assert torch.equal(seq, par)

    def test_per_head_gamma(self):
        Q, K, V = qkv(12)
        gammas = torch.tensor([0.25, 1.0], dtype=torch.float64)
        O, _ = streamed_forward(Q, K, V, BlockPlan(4, 4, 12), gammas)
        O_ref, _ = reference_forward(Q, K, V, gammas)
        torch.testing.assert_close(O, O_ref, rtol=0, atol=1e-10)

    def test_hook_sees_every_tile(self):
        Q, K, V = qkv(10)
        seen = []
        streamed_forward(Q, K, V, BlockPlan(4, 3, 10), 0.5, on_block=lambda i, j, s: seen.append((i, j)))
        assert sorted(seen) == [(i, j) for i in range(3) for j in range(4)]

    def test_upper_blocks_still_contribute_to_the_denominator(self):
        Q, K, V = qkv(8)
        _, L = streamed_forward(Q, K, V, BlockPlan(2, 2, 8), 0.5)
        A = torch.einsum("...ie,...je->...ij", Q, K) * 8**-0.5
        causal_only = torch.logsumexp(A.masked_fill(~torch.ones(8, 8, dtype=torch.bool).tril(), float("-inf")), -1)
        assert (L[..., :-1] > causal_only[..., :-1]).all()

    def test_shape_errors(self):
        Q, K, V = qkv(6)
        with pytest.raises(ShapeError):
            streamed_forward(Q, K, V, BlockPlan(2, 2, 5), 0.5)
        with pytest.raises(ShapeError):
            streamed_forward(Q, K[..., :5, :], V, BlockPlan(2, 2, 6), 0.5)


class TestBlockPlan:
    def test_grid(self):
        plan = BlockPlan(4, 3, 10)
        assert (plan.tr, plan.tc) == (3, 4)
        assert list(plan.rows(2)) == [8, 9]
        assert list(plan.cols(3)) == [9]

    @pytest.mark.parametrize("br,bc,n", [(0, 1, 4), (1, 0, 4), (2, 2, 0)])
    def test_rejects_degenerate(self, br, bc, n):
        with pytest.raises(ShapeError):
            BlockPlan(br, bc, n)

    def test_tiles_match_full_masks(self):
        plan = BlockPlan(3, 2, 7)
        full = build_masks(7, 0.5)
        C, P = block_mask_tiles(1, 2, plan, 0.5)
        torch.testing.assert_close(C, full.C[3:6, 4:6])
        torch.testing.assert_close(P, full.P[3:6, 4:6])
        with pytest.raises(ShapeError):
            block_mask_tiles(3, 0, plan, 0.5)


def test_benchmark_table():
    df = benchmark([8, 16], [(4, 4), (32, 32)], head_dim=4, repeats=1)
    assert list(df.columns) == ["n", "Br", "Bc", "wall_ms", "dense_ms", "max_diff"]
    assert len(df) == 4
    assert (df["max_diff"] < 1e-10).all()
    assert df.loc[df["n"] == 8, "Br"].max() == 8
