"""Per-morphology reward scaling by an EMA of the 5th-95th percentile range."""

from __future__ import annotations

import json
from typing import Hashable

import numpy as np


class UnknownId(KeyError):
    pass


class _Ring:
    __slots__ = ("data", "size", "head")

    def __init__(self, capacity: int):
        self.data = np.zeros(capacity)
        self.size = 0
        self.head = 0

    def extend(self, values: np.ndarray) -> None:
        cap = len(self.data)
        if len(values) >= cap:
            self.data[:] = values[-cap:]
            self.size, self.head = cap, 0
            return
        idx = (self.head + np.arange(len(values))) % cap
        self.data[idx] = values
        self.head = int((self.head + len(values)) % cap)
        self.size = min(cap, self.size + len(values))

    def values(self) -> np.ndarray:
        """Contents in insertion order (oldest first)."""
        if self.size < len(self.data):
            return self.data[: self.size].copy()
        return np.roll(self.data, -self.head)


class RewardNormalizer:
    """Tracks a robust reward scale per id and divides by ``max(1, sigma)``."""

    def __init__(self, alpha: float = 0.99, capacity: int = 4096, init_sigma: float = 1.0,
                 low_pct: float = 5.0, high_pct: float = 95.0):
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
        self.alpha = alpha
        self.capacity = capacity
        self.init_sigma = init_sigma
        self.low_pct = low_pct
        self.high_pct = high_pct
        self._sigma: dict = {}
        self._buffers: dict = {}

    def register(self, key: Hashable) -> None:
        if key not in self._sigma:
            self._sigma[key] = float(self.init_sigma)
            self._buffers[key] = _Ring(self.capacity)

    @property
    def ids(self) -> list:
        return list(self._sigma)

    def sigma(self, key: Hashable) -> float:
        if key not in self._sigma:
            raise UnknownId(key)
        return self._sigma[key]

    def divisor(self, key: Hashable) -> float:
        return max(1.0, self.sigma(key))

    def observe(self, key: Hashable, rewards) -> None:
        values = np.asarray(rewards, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise ValueError("rewards must be finite")
        self.register(key)
        buf = self._buffers[key]
        if values.size:
            buf.extend(values)
        if buf.size == 0:
            return
        lo, hi = np.percentile(buf.values(), [self.low_pct, self.high_pct])
        self._sigma[key] = self.alpha * self._sigma[key] + (1.0 - self.alpha) * float(hi - lo)

    def normalize_reward(self, key: Hashable, r):
        d = self.divisor(key)
        if np.ndim(r):
            return np.asarray(r, dtype=np.float64) / d
        return float(r) / d

    # persistence ------------------------------------------------------------

    def state_dict(self) -> dict:
        return {str(k): {"sigma": self._sigma[k], "buffer_len": self._buffers[k].size,
                         "buffer": self._buffers[k].values().tolist()}
                for k in self._sigma}

    def load_state_dict(self, state: dict, key_type=int) -> None:
        self._sigma.clear()
        self._buffers.clear()
        for raw, entry in state.items():
            key = key_type(raw)
            self.register(key)
            self._sigma[key] = float(entry["sigma"])
            values = np.asarray(entry.get("buffer", []), dtype=np.float64)
            if len(values) != int(entry["buffer_len"]):
                raise ValueError(f"id {raw}: buffer_len {entry['buffer_len']} "
                                 f"does not match {len(values)} stored values")
            if values.size:
                self._buffers[key].extend(values)

    def dumps(self) -> str:
        return json.dumps(self.state_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str, key_type=int, **kwargs) -> "RewardNormalizer":
        out = cls(**kwargs)
        out.load_state_dict(json.loads(text), key_type=key_type)
        return out


def observe(normalizer: RewardNormalizer, morphology_id, rewards) -> None:
    normalizer.observe(morphology_id, rewards)


def normalize_reward(normalizer: RewardNormalizer, morphology_id, r):
    return normalizer.normalize_reward(morphology_id, r)
