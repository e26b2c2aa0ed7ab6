"""Per-class batch sampler: ``n`` items from every class per batch, no replacement.

All class pools are reshuffled together as soon as any pool holds fewer than
``n`` unseen items, i.e. whenever the smallest class has been traversed.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np


class SamplerError(ValueError):
    pass


def epoch_length(class_counts: dict, n: int) -> int:
    """Batches emitted before the smallest class is exhausted."""
    if n < 1:
        raise SamplerError("n must be >= 1")
    small = {c: k for c, k in class_counts.items() if k < n}
    if small:
        raise SamplerError(f"classes with fewer than n={n} members: {small}")
    return min(class_counts.values()) // n


class PerClassSampler:
    def __init__(self, labels, n: int = 6, seed: int = 0):
        pools = defaultdict(list)
        for idx, label in enumerate(labels):
            pools[int(label)].append(idx)
        if not pools:
            raise SamplerError("no labels to sample from")
        self.classes = sorted(pools)
        self.members = {c: np.array(pools[c]) for c in self.classes}
        self.n = n
        self.epoch_length = epoch_length({c: len(v) for c, v in self.members.items()}, n)
        self.rng = np.random.default_rng(seed)
        self.batches_emitted = 0
        self.resets = 0
        self._pools: dict[int, list[int]] = {}
        self._reset()

    def _reset(self):
        self._pools = {c: list(self.rng.permutation(self.members[c])) for c in self.classes}
        self._in_epoch = 0

    def next_batch(self) -> list[tuple[int, int]]:
        """Return ``n * C`` ``(index, label)`` pairs grouped by class."""
        if any(len(p) < self.n for p in self._pools.values()):
            self._reset()
            self.resets += 1
        batch = []
        for c in self.classes:
            pool = self._pools[c]
            take, self._pools[c] = pool[: self.n], pool[self.n:]
            batch.extend((int(i), c) for i in take)
        self.batches_emitted += 1
        self._in_epoch += 1
        return batch

    def epoch(self) -> list[list[tuple[int, int]]]:
        """Emit the remainder of the current epoch (a full one right after a reset)."""
        out = [self.next_batch()]
        while all(len(p) >= self.n for p in self._pools.values()):
            out.append(self.next_batch())
        return out

    def __iter__(self):
        while True:
            yield self.next_batch()

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "pools": {c: list(map(int, p)) for c, p in self._pools.items()},
            "batches_emitted": self.batches_emitted,
            "resets": self.resets,
            "in_epoch": self._in_epoch,
        }

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._pools = {int(c): list(p) for c, p in state["pools"].items()}
        self.batches_emitted = state["batches_emitted"]
        self.resets = state["resets"]
        self._in_epoch = state["in_epoch"]
