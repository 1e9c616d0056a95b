from typing import List, Optional, Tuple

import torch

from utils.errors import CacheCorruptedError, ConfigError


class KVCache:
    """Raw (un-rotated) keys and values per layer, ``[B, H, m, head_dim]``.

    With a window only the most recent ``window`` entries are kept and nothing
    is pinned at the start of the sequence. ``length`` counts every token seen.
    """

    def __init__(self, n_layers: int, window: Optional[int] = None) -> None:
        if window is not None and window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        self.n_layers = n_layers
        self.window = window
        self.length = 0
        self.keys: List[Optional[torch.Tensor]] = [None] * n_layers
        self.values: List[Optional[torch.Tensor]] = [None] * n_layers

    def _held(self, length: int) -> int:
        return length if self.window is None else min(length, self.window)

    def entries(self, layer: int) -> int:
        k = self.keys[layer]
        return 0 if k is None else k.shape[2]

    def append(self, layer: int, k: torch.Tensor, v: torch.Tensor) -> None:
        if self.entries(layer) != self._held(self.length):
            raise CacheCorruptedError(
                f"layer {layer} holds {self.entries(layer)} entries, expected {self._held(self.length)}"
            )
        keys = k if self.keys[layer] is None else torch.cat([self.keys[layer], k], dim=2)
        values = v if self.values[layer] is None else torch.cat([self.values[layer], v], dim=2)
        if self.window is not None:
            keys, values = keys[:, :, -self.window :], values[:, :, -self.window :]
        self.keys[layer], self.values[layer] = keys, values

    def layer(self, layer: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.keys[layer], self.values[layer]

    def positions(self, held: int, reindex: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
        """(query, key) positions for the token being decoded, before ``commit``."""
        if reindex:
            k_pos = torch.arange(held)
        else:
            n = self.length + 1
            k_pos = torch.arange(n - held, n)
        return k_pos[-1:], k_pos

    def commit(self) -> None:
        expected = self._held(self.length + 1)
        for layer in range(self.n_layers):
            if self.entries(layer) != expected:
                raise CacheCorruptedError(f"layer {layer} holds {self.entries(layer)} entries after a step, expected {expected}")
        self.length += 1

    def validate(self) -> None:
        expected = self._held(self.length)
        for layer in range(self.n_layers):
            if self.entries(layer) != expected:
                raise CacheCorruptedError(f"layer {layer} holds {self.entries(layer)} entries, expected {expected}")
            k, v = self.keys[layer], self.values[layer]
            if k is not None and k.shape[:3] != v.shape[:3]:
                raise CacheCorruptedError(f"layer {layer} keys {tuple(k.shape)} and values {tuple(v.shape)} disagree")
