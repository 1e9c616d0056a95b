from .decode import DecodeConfig, bench_decode, decode_step, generate, sample_next, windowed_ppl
from .kv_cache import KVCache
