"""Bounded store of oracle-labeled samples with class-balanced eviction."""

from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional

import numpy as np
import torch

from . import adapter, util
from .config import EvictionPolicy


@dataclass(eq=False)
class BufferEntry:
    """A labeled sample held in the buffer.

    >>> BufferEntry

    """

    sample_id: int
    input: np.ndarray
    label: int
    inserted_at: int
    last_ce: float = 0.0

    def __post_init__(self):
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")
        if self.last_ce < 0:
            raise ValueError(f"cross-entropy must be non-negative, got {self.last_ce}")


class LabelBuffer:
    """Capacity-bounded buffer with per-class counts.

    The buffer is mutated in place by a single stream; ``insert`` returns the
    evicted entry, if any.

    >>> LabelBuffer

    """

    def __init__(self, capacity: int, k_classes: int):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        if k_classes < 1:
            raise ValueError(f"k_classes must be positive, got {k_classes}")
        self.capacity = capacity
        self.k_classes = k_classes
        self.entries: List[BufferEntry] = []
        self.class_counts: List[int] = [0] * k_classes
        self._members: List[List[BufferEntry]] = [[] for _ in range(k_classes)]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def full(self) -> bool:
        """Whether the next insert evicts."""
        return len(self.entries) >= self.capacity

    def balance_measure(self) -> float:
        """Total absolute deviation of the class counts from ``capacity / K``."""
        share, remainder = divmod(self.capacity, self.k_classes)
        if remainder:
            share = Fraction(self.capacity, self.k_classes)
        return float(sum(abs(count - share) for count in self.class_counts))

    def select_victim(self) -> BufferEntry:
        """Lowest-loss entry of the most populated class.

        Among equally populated classes the one with the lowest average loss
        is chosen, then the lowest class index. Loss ties go to the earliest
        inserted entry.
        """
        if not self.full:
            raise ValueError("eviction only at capacity")
        top = max(self.class_counts)
        candidates = [c for c, count in enumerate(self.class_counts) if count == top]
        if len(candidates) == 1:
            victim_class = candidates[0]
        else:
            victim_class = min(candidates, key=lambda c: (self._mean_ce(c), c))
        return min(
            self._members[victim_class],
            key=lambda entry: (entry.last_ce, entry.inserted_at),
        )

    def select_random_victim(self, rng: np.random.Generator) -> BufferEntry:
        """Uniform non-empty class, then a uniform entry within it."""
        if not self.full:
            raise ValueError("eviction only at capacity")
        populated = [c for c, count in enumerate(self.class_counts) if count]
        victim_class = populated[int(rng.integers(len(populated)))]
        members = self._members[victim_class]
        return members[int(rng.integers(len(members)))]

    def _mean_ce(self, label: int) -> float:
        losses = [entry.last_ce for entry in self._members[label]]
        return sum(losses) / len(losses)

    def remove(self, entry: BufferEntry) -> None:
        """Drops ``entry`` and updates the class counts."""
        self.entries.remove(entry)
        self._members[entry.label].remove(entry)
        self.class_counts[entry.label] -= 1

    def insert(
        self,
        entry: BufferEntry,
        policy: EvictionPolicy = EvictionPolicy.class_balanced,
        rng: Optional[np.random.Generator] = None,
    ) -> Optional[BufferEntry]:
        """Adds ``entry``, evicting one entry first when the buffer is full.

        Args:
            entry: New labeled sample.
            policy: Victim selection rule.
            rng: Required for random eviction.

        Returns:
            Optional[BufferEntry]:
            The evicted entry, if any.
        """
        if not 0 <= entry.label < self.k_classes:
            raise ValueError(f"label {entry.label} outside [0, {self.k_classes})")
        evicted = None
        if self.full:
            if policy == EvictionPolicy.random:
                if rng is None:
                    raise ValueError("random eviction needs a random generator")
                evicted = self.select_random_victim(rng)
            else:
                evicted = self.select_victim()
            self.remove(evicted)
        self.entries.append(entry)
        self._members[entry.label].append(entry)
        self.class_counts[entry.label] += 1
        return evicted

    def refresh_ce(self, model: adapter.PromptModel) -> "LabelBuffer":
        """Recomputes every entry's cross-entropy under the current prompt."""
        if not self.entries:
            return self
        with torch.no_grad():
            losses = adapter.cross_entropy_losses(
                model,
                np.stack([entry.input for entry in self.entries]),
                [entry.label for entry in self.entries],
            )
        for entry, loss in zip(self.entries, losses.tolist()):
            entry.last_ce = max(loss, 0.0)
        return self

    def sample_minibatch(self, m: int, rng: np.random.Generator) -> List[BufferEntry]:
        """Uniform draw of ``min(m, len)`` entries without replacement."""
        if m < 1:
            raise ValueError(f"minibatch size must be positive, got {m}")
        if not self.entries:
            return []
        picks = rng.choice(len(self.entries), size=min(m, len(self.entries)), replace=False)
        return [self.entries[int(index)] for index in picks]

    def recount(self) -> List[int]:
        """Class counts recomputed from the entries."""
        counts = [0] * self.k_classes
        for entry in self.entries:
            counts[entry.label] += 1
        return counts

    def to_csv(self, filepath: str) -> str:
        """Writes ``sample_id, label, inserted_at, last_ce`` rows."""
        columns = ["sample_id", "label", "inserted_at", "last_ce"]
        return util.write_table(
            filepath,
            columns,
            ({column: getattr(entry, column) for column in columns} for entry in self.entries),
        )
