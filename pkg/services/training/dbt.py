"""Domain Balanced Training (DBT) batches and the uniform baseline sampler.

DBT keeps one shuffled queue per (domain, class) pair and draws the same number
of cycles from every queue for each mini-batch. A queue reshuffles the moment it
runs dry, independently of the others and of epoch boundaries.
"""
import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..data.cycles import CardiacCycle, Label
from ..errors import ConfigurationError

logger = logging.getLogger(__name__)

QueueKey = Tuple[int, Label]


def effective_batch_size(batch_size: int, n_queues: int) -> int:
    """Largest multiple of n_queues not exceeding batch_size; 0 when batch_size < n_queues."""
    if batch_size < 1 or n_queues < 1:
        raise ConfigurationError(f"batch size and queue count must be >= 1, got B={batch_size}, queues={n_queues}")
    return n_queues * (batch_size // n_queues)


def require_effective_batch_size(batch_size: int, n_queues: int) -> int:
    b_eff = effective_batch_size(batch_size, n_queues)
    if b_eff == 0:
        raise ConfigurationError(
            f"batch size {batch_size} is smaller than the {n_queues} DBT queues (B_eff=0); use --batch >= {n_queues}"
        )
    return b_eff


def iterations_per_epoch(reference_cycle_count: int, b_eff: int) -> int:
    if b_eff <= 0:
        raise ConfigurationError(f"B_eff must be positive, got {b_eff}")
    return max(1, reference_cycle_count // b_eff)


class _Queue:
    def __init__(self, indices: Sequence[int], rng: np.random.Generator):
        self.indices = np.asarray(indices, dtype=np.intp)
        self.rng = rng
        self.reshuffles = 0
        self._shuffle()

    def _shuffle(self):
        self.order = self.rng.permutation(self.indices)
        self.cursor = 0

    def draw(self, n: int) -> List[int]:
        out = []
        for _ in range(n):
            if self.cursor == self.order.size:
                self._shuffle()
                self.reshuffles += 1
            out.append(int(self.order[self.cursor]))
            self.cursor += 1
        return out


class DomainQueueSet:
    """One independently seeded queue per (domain, class) pair."""

    def __init__(self, queues: Dict[QueueKey, Sequence[int]], seed: int = 0):
        empty = [key for key, idx in queues.items() if len(idx) == 0]
        if empty:
            pairs = ", ".join(f"(domain {d}, {label.value})" for d, label in sorted(empty, key=_key_order))
            raise ConfigurationError(f"DBT needs every (domain, class) pair populated; empty: {pairs}")
        if not queues:
            raise ConfigurationError("DBT needs at least one queue")
        self.keys: List[QueueKey] = sorted(queues, key=_key_order)
        self.seed = seed
        self._queues = {
            key: _Queue(queues[key], np.random.default_rng(np.random.SeedSequence([seed, q])))
            for q, key in enumerate(self.keys)
        }

    @classmethod
    def from_cycles(cls, cycles: Sequence[CardiacCycle], seed: int = 0) -> "DomainQueueSet":
        """Queues for every observed domain crossed with both classes."""
        domains = sorted({c.domain_id for c in cycles})
        queues: Dict[QueueKey, List[int]] = {(d, label): [] for d in domains for label in Label}
        for i, c in enumerate(cycles):
            queues[(c.domain_id, c.label)].append(i)
        return cls(queues, seed)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def n_queues(self) -> int:
        return len(self.keys)

    def queue_size(self, key: QueueKey) -> int:
        return self._queues[key].indices.size

    def reshuffle_count(self, key: QueueKey) -> int:
        return self._queues[key].reshuffles

    def draw(self, key: QueueKey, n: int) -> List[int]:
        return self._queues[key].draw(n)

    def next_batch(self, batch_size: int) -> List[int]:
        """B_eff indices, B_eff / n_queues from every queue, queue by queue."""
        per_queue = require_effective_batch_size(batch_size, self.n_queues) // self.n_queues
        batch: List[int] = []
        for key in self.keys:
            batch.extend(self._queues[key].draw(per_queue))
        return batch


def _key_order(key: QueueKey):
    return key[0], key[1].index


def next_batch(qs: DomainQueueSet, batch_size: int) -> List[int]:
    return qs.next_batch(batch_size)


class UniformSampler:
    """Baseline: uniform sampling with replacement over every cycle, class-unbalanced."""

    def __init__(self, n_cycles: int, seed: int = 0):
        if n_cycles < 1:
            raise ConfigurationError("cannot sample from an empty dataset")
        self.n_cycles = n_cycles
        self.rng = np.random.default_rng(seed)

    def next_batch(self, batch_size: int) -> List[int]:
        if batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {batch_size}")
        return self.rng.integers(0, self.n_cycles, batch_size).tolist()
