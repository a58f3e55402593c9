"""Bounded FIFO store of recent projection vectors used as contrastive negatives."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import torch


@dataclass
class BankEntry:
    vector: torch.Tensor        # (P,), gradient-severed
    pseudo_label: int
    confidence: float
    step: int


class MemoryBank:
    """FIFO of BankEntry with strict oldest-first eviction. Single-writer."""

    def __init__(self, capacity: int = 1200):
        if capacity < 1:
            raise ValueError("bank capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[BankEntry] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> list[BankEntry]:
        return list(self._entries)

    def push(self, projections: torch.Tensor, pseudo_labels: torch.Tensor,
             confidences: torch.Tensor, step: int, sample_cap: int = 256,
             rng: torch.Generator | None = None) -> None:
        """Append up to sample_cap uniformly subsampled entries, evicting oldest.

        Stored vectors are detached clones, so later training steps never
        touch them.
        """
        m = projections.shape[0]
        if not (m == pseudo_labels.shape[0] == confidences.shape[0]):
            raise ValueError("projections, pseudo_labels and confidences must have equal length")
        if m == 0:
            return
        if m > sample_cap:
            order = torch.randperm(m, generator=rng)[:sample_cap]
        else:
            order = torch.arange(m)
        vecs = projections.detach()
        for i in order.tolist():
            self._entries.append(BankEntry(
                vector=vecs[i].clone(),
                pseudo_label=int(pseudo_labels[i]),
                confidence=float(confidences[i]),
                step=step,
            ))
        while len(self._entries) > self.capacity:
            self._entries.popleft()

    def sample_negatives(self, positive_label: int, count: int,
                         rng: torch.Generator | None = None) -> list[BankEntry]:
        """Uniform sample without replacement among entries with a different label.

        Returns fewer than count (possibly none) when the bank can't supply them.
        """
        if count <= 0:
            return []
        pool = [e for e in self._entries if e.pseudo_label != positive_label]
        if len(pool) <= count:
            return pool
        order = torch.randperm(len(pool), generator=rng)[:count]
        return [pool[i] for i in order.tolist()]

    def sample(self, count: int, rng: torch.Generator | None = None) -> list[BankEntry]:
        """Uniform label-agnostic draw; per-pixel label filtering happens in the loss."""
        if count <= 0 or not self._entries:
            return []
        if len(self._entries) <= count:
            return list(self._entries)
        order = torch.randperm(len(self._entries), generator=rng)[:count]
        seq = list(self._entries)
        return [seq[i] for i in order.tolist()]

    def state_dict(self) -> dict:
        if not self._entries:
            return {"capacity": self.capacity, "vectors": None, "labels": [],
                    "confidences": [], "steps": []}
        return {
            "capacity": self.capacity,
            "vectors": torch.stack([e.vector for e in self._entries]),
            "labels": [e.pseudo_label for e in self._entries],
            "confidences": [e.confidence for e in self._entries],
            "steps": [e.step for e in self._entries],
        }

    def load_state_dict(self, state: dict) -> None:
        self.capacity = int(state["capacity"])
        self._entries.clear()
        if state["vectors"] is None:
            return
        for vec, label, conf, step in zip(state["vectors"], state["labels"],
                                          state["confidences"], state["steps"]):
            self._entries.append(BankEntry(vec.clone(), int(label), float(conf), int(step)))


def entries_as_tensors(entries: list[BankEntry]) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    """Stack entries into (vectors (Q, P), labels (Q,)); (None, None) when empty."""
    if not entries:
        return None, None
    vectors = torch.stack([e.vector for e in entries])
    labels = torch.tensor([e.pseudo_label for e in entries], dtype=torch.long)
    return vectors, labels
