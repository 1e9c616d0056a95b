import math

import pytest
import torch
import torch.nn.functional as F

import inference.decode as decode_module
from inference import DecodeConfig, KVCache, bench_decode, decode_step, generate, sample_next, windowed_ppl
from inference.decode import _vanilla_twin
from masks import MaskMode
from nets import MaskConfig, PEConfig
from utils.errors import CacheCorruptedError, ConfigError, VocabularyError


def sequence(n, vocab=11, seed=0):
    return torch.randint(0, vocab, (n,), generator=torch.Generator().manual_seed(seed)).tolist()


def decode_all(model, tokens, window=None, reindex=False):
    cache = KVCache(len(model.blocks), window)
    rows = []
    for t in tokens:
        logits, cache = decode_step(model, cache, t, reindex)
        rows.append(logits)
    return torch.stack(rows), cache


class TestDecodeStep:
    @pytest.mark.parametrize("pe", ["rope", "alibi", "ape-sin", "none"])
    def test_matches_full_training_length_pass(self, make_model, pe):
        model = make_model(pe=PEConfig(kind=pe))
        seq = sequence(8)
        with torch.no_grad():
            full = model(torch.tensor([seq])).logits[0]
        decoded, cache = decode_all(model, seq)
        assert cache.length == 8
        torch.testing.assert_close(decoded, full, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("N", [8, 32, pytest.param(64, marks=pytest.mark.slow)])
    def test_every_prompt_length_matches_training_rows(self, make_model, N):
        model = make_model(max_len=N, n_heads=2, model_dim=8)
        seq = sequence(N, seed=N)
        with torch.no_grad():
            full = model(torch.tensor([seq])).logits[0]
        decoded, _ = decode_all(model, seq)
        torch.testing.assert_close(decoded, full, rtol=0, atol=1e-10)
        for n in range(1, N):
            with torch.no_grad():
                prefix = model(torch.tensor([seq[:n]]), MaskMode.INFER).logits[0]
            torch.testing.assert_close(prefix, full[:n], rtol=0, atol=1e-10)

    def test_vanilla_matches_full_pass(self, vanilla_model):
        seq = sequence(12)
        with torch.no_grad():
            full = vanilla_model(torch.tensor([seq]), MaskMode.EXTRAPOLATE).logits[0]
        decoded, _ = decode_all(vanilla_model, seq)
        torch.testing.assert_close(decoded, full, rtol=0, atol=1e-10)

    def test_past_training_length_single_layer(self, make_model):
        model = make_model(n_layers=1)
        seq = sequence(14)
        decoded, _ = decode_all(model, seq)
        for n in (9, 14):
            with torch.no_grad():
                full = model(torch.tensor([seq[:n]]), MaskMode.EXTRAPOLATE).logits[0, -1]
            torch.testing.assert_close(decoded[n - 1], full, rtol=0, atol=1e-10)

    def test_out_of_vocabulary(self, stablemask_model):
        with pytest.raises(VocabularyError):
            decode_step(stablemask_model, KVCache(2), 11)

    def test_corrupted_cache(self, stablemask_model):
        _, cache = decode_all(stablemask_model, [1, 2])
        cache.length = 5
        with pytest.raises(CacheCorruptedError):
            decode_step(stablemask_model, cache, 3)

    def test_mismatched_values(self, stablemask_model):
        _, cache = decode_all(stablemask_model, [1, 2])
        cache.values[1] = cache.values[1][:, :1]
        with pytest.raises(CacheCorruptedError):
            cache.validate()


class TestWindow:
    def test_cache_holds_window(self, stablemask_model):
        _, cache = decode_all(stablemask_model, sequence(10), window=3)
        assert cache.length == 10
        assert all(cache.entries(layer) == 3 for layer in range(2))
        assert cache.positions(3)[1].tolist() == [8, 9, 10]
        assert cache.positions(3, reindex=True)[1].tolist() == [0, 1, 2]

    def test_full_window_equals_unwindowed(self, stablemask_model):
        seq = sequence(8)
        full, _ = decode_all(stablemask_model, seq)
        windowed, _ = decode_all(stablemask_model, seq, window=8)
        torch.testing.assert_close(windowed, full, rtol=0, atol=1e-14)

    def test_rope_is_blind_to_reindexing(self, stablemask_model):
        seq = sequence(20)
        a = windowed_ppl(stablemask_model, seq, 4)
        b = windowed_ppl(stablemask_model, seq, 4, reindex_positions=True)
        torch.testing.assert_close(a, b, rtol=0, atol=1e-10)

    def test_ppl_at_training_length_is_cross_entropy(self, stablemask_model):
        seq = sequence(8)
        nll = windowed_ppl(stablemask_model, seq, window=8)
        with torch.no_grad():
            logits = stablemask_model(torch.tensor([seq])).logits[0]
        expected = F.cross_entropy(logits[:-1], torch.tensor(seq[1:]), reduction="none")
        torch.testing.assert_close(nll, expected, rtol=0, atol=1e-10)

    def test_ppl_far_past_training_length_is_finite(self, stablemask_model):
        nll = windowed_ppl(stablemask_model, sequence(32), window=4)
        assert nll.shape == (31,)
        assert torch.isfinite(nll).all()

    def test_bad_window(self, stablemask_model):
        with pytest.raises(ConfigError):
            windowed_ppl(stablemask_model, sequence(4), 0)
        with pytest.raises(ConfigError):
            KVCache(2, window=0)
        with pytest.raises(ConfigError):
            windowed_ppl(stablemask_model, [1], 4)


class TestGenerate:
    def test_zero_new_tokens_echoes_prompt(self, stablemask_model):
        assert generate(stablemask_model, [1, 2, 3], DecodeConfig(max_new_tokens=0)) == [1, 2, 3]

    def test_greedy_is_deterministic(self, stablemask_model):
        cfg = DecodeConfig(max_new_tokens=6)
        out = generate(stablemask_model, [4, 5], cfg)
        assert len(out) == 8
        assert out == generate(stablemask_model, [4, 5], cfg)

    def test_greedy_follows_argmax(self, stablemask_model):
        out = generate(stablemask_model, [4, 5], DecodeConfig(max_new_tokens=1))
        with torch.no_grad():
            logits = stablemask_model(torch.tensor([[4, 5]]), MaskMode.INFER).logits[0, -1]
        assert out[-1] == int(logits.argmax())

    def test_temperature_is_seeded(self, stablemask_model):
        cfg = DecodeConfig(max_new_tokens=10, sampling="temperature", temperature=2.0, seed=7)
        assert generate(stablemask_model, [1], cfg) == generate(stablemask_model, [1], cfg)

    def test_windowed_generation_runs_past_training_length(self, stablemask_model):
        out = generate(stablemask_model, [1, 2], DecodeConfig(max_new_tokens=20, window=4))
        assert len(out) == 22

    def test_no_step_after_the_last_token(self, make_model, monkeypatch):
        model = make_model(pe=PEConfig(kind="ape-sin"))
        calls = []
        real = decode_module.decode_step

        def counting(*args, **kwargs):
            calls.append(args[2])
            return real(*args, **kwargs)

        monkeypatch.setattr(decode_module, "decode_step", counting)
        # the absolute table holds max_len=8 positions; 4 + 4 fills it exactly
        out = generate(model, [1, 2, 3, 4], DecodeConfig(max_new_tokens=4))
        assert len(out) == 8
        assert len(calls) == 7

    @pytest.mark.parametrize(
        "cfg",
        [
            DecodeConfig(max_new_tokens=-1),
            DecodeConfig(sampling="beam"),
            DecodeConfig(sampling="temperature", temperature=0.0),
            DecodeConfig(window=0),
        ],
    )
    def test_rejected_configs(self, stablemask_model, cfg):
        with pytest.raises(ConfigError):
            generate(stablemask_model, [1], cfg)

    def test_empty_prompt(self, stablemask_model):
        with pytest.raises(ConfigError):
            generate(stablemask_model, [], DecodeConfig())


def test_temperature_sampling_distribution():
    logits = torch.tensor([0.0, 1.0, 2.0], dtype=torch.float64)
    cfg = DecodeConfig(sampling="temperature", temperature=0.5)
    gen = torch.Generator().manual_seed(0)
    draws = 10000
    counts = torch.bincount(torch.tensor([sample_next(logits, cfg, gen) for _ in range(draws)]), minlength=3)
    expected = torch.softmax(logits / 0.5, -1)
    for k in range(3):
        p = expected[k].item()
        sigma = math.sqrt(p * (1 - p) / draws)
        assert abs(counts[k].item() / draws - p) < 4 * sigma


def test_bench_decode(stablemask_model):
    df = bench_decode(stablemask_model, 6)
    assert list(df.columns) == ["mode", "mask", "n", "wall_ms"]
    assert list(zip(df["mode"], df["mask"])) == [
        ("full_recompute", "stablemask"),
        ("kv_cache", "stablemask"),
        ("kv_cache", "vanilla"),
    ]
    assert (df["wall_ms"] > 0).all()


def test_bench_decode_vanilla_model_has_no_twin(vanilla_model):
    df = bench_decode(vanilla_model, 4)
    assert df["mask"].tolist() == ["vanilla", "vanilla"]


def test_vanilla_twin_decodes_like_a_vanilla_model(make_model):
    seq = sequence(6)
    twin = _vanilla_twin(make_model())
    plain = make_model(mask=MaskConfig(kind="vanilla"))
    torch.testing.assert_close(decode_all(twin, seq)[0], decode_all(plain, seq)[0], rtol=0, atol=1e-12)
