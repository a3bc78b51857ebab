"""Recommendation episodes and their padded batch form."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Episode:
    """One instance: history ``(concept, mastery)`` pairs, candidates, targets, path length."""

    history: tuple
    candidates: tuple
    targets: tuple
    n: int

    def __post_init__(self):
        object.__setattr__(self, "history", tuple((int(c), float(y)) for c, y in self.history))
        object.__setattr__(self, "candidates", tuple(int(c) for c in self.candidates))
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidate set contains duplicates")
        if not self.targets:
            raise ValueError("target set is empty")
        if len(set(self.targets)) != len(self.targets):
            raise ValueError("target set contains duplicates")
        if not 1 <= self.n <= len(self.candidates):
            raise ValueError(f"path length {self.n} must lie in [1, {len(self.candidates)}]")
        for _, y in self.history:
            if not 0.0 <= y <= 1.0:
                raise ValueError(f"history mastery {y} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "history": [list(h) for h in self.history],
            "candidates": list(self.candidates),
            "targets": list(self.targets),
            "n": self.n,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(tuple(map(tuple, d["history"])), tuple(d["candidates"]), tuple(d["targets"]), int(d["n"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def episodes_digest(episodes: Sequence[Episode]) -> str:
    h = hashlib.sha256()
    for ep in episodes:
        h.update(ep.digest().encode())
    return h.hexdigest()[:16]


@dataclass
class Batch:
    candidates: np.ndarray  # (B, m) concept ids
    hist_concepts: np.ndarray  # (B, L)
    hist_y: np.ndarray  # (B, L)
    hist_mask: np.ndarray  # (B, L) bool, True where a record exists
    target_weights: np.ndarray  # (B, N) rows average the target embeddings
    n: int

    @property
    def size(self) -> int:
        return self.candidates.shape[0]


def make_batch(episodes: Sequence[Episode], num_concepts: int) -> Batch:
    """Stack episodes that share candidate-set size and path length."""
    if not episodes:
        raise ValueError("empty batch")
    m, n = len(episodes[0].candidates), episodes[0].n
    if any(len(ep.candidates) != m or ep.n != n for ep in episodes):
        raise ValueError("episodes in a batch must share candidate count and path length")
    B = len(episodes)
    L = max(len(ep.history) for ep in episodes)
    cand = np.array([ep.candidates for ep in episodes], dtype=np.intp)
    hc = np.zeros((B, L), dtype=np.intp)
    hy = np.zeros((B, L))
    hm = np.zeros((B, L), dtype=bool)
    tw = np.zeros((B, num_concepts))
    for b, ep in enumerate(episodes):
        for t, (c, y) in enumerate(ep.history):
            hc[b, t], hy[b, t], hm[b, t] = c, y, True
        for t in ep.targets:
            if not 0 <= t < num_concepts:
                raise IndexError(f"target concept {t} out of range")
            tw[b, t] = 1.0 / len(ep.targets)
    return Batch(cand, hc, hy, hm, tw, n)
