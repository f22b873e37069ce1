"""
FIFO memory queue of unit-norm key embeddings used as contrastive negatives
"""

from __future__ import annotations
from typing import Optional, Union

import logging

import numpy as np

from ..autodiff import Tensor, ShapeError
from ..nn import PROJ_DIM

logger = logging.getLogger(__name__)
if (logger.hasHandlers()):
    logger.handlers.clear()


class MemoryQueue(object):
    '''
    Ring buffer of key embeddings

    Attributes:
        capacity: Number of slots, the training-set size
        dim: Embedding dimension
        entries: [capacity, dim] storage, valid rows are unit norm
        ids: Image id stored in each slot, -1 when empty
        write_ptr: Slot the next key is written to
        filled: Number of valid slots
    '''
    def __init__(self, capacity: int, dim: int = PROJ_DIM) -> None:
        if capacity < 1:
            raise ValueError(f"Queue capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.entries = np.zeros((capacity, dim))
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.write_ptr = 0
        self.filled = 0

    def __len__(self) -> int:
        return self.filled

    def push(self,
             keys: Union[Tensor, np.ndarray],
             ids: Optional[np.ndarray] = None) -> None:
        '''
        Append keys, renormalizing each row and evicting the oldest entries
        once the queue is full

        Args:
            keys: [N, dim] key embeddings
            ids: Image ids of the keys

        Raises:
            ShapeError: If the key dimension differs from the queue's
        '''
        keys = keys.data if isinstance(keys, Tensor) else np.asarray(keys)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            logger.error(f"Cannot enqueue keys of shape {keys.shape}")
            raise ShapeError(f"Queue stores {self.dim}-d keys, "
                             f"got {keys.shape}")
        n = keys.shape[0]
        ids = np.full(n, -1) if ids is None else np.asarray(ids)

        keys = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        # Only the newest `capacity` keys can survive
        if n > self.capacity:
            self.write_ptr = (self.write_ptr + n - self.capacity) % self.capacity
            keys, ids = keys[-self.capacity:], ids[-self.capacity:]
            n = self.capacity

        slots = (self.write_ptr + np.arange(n)) % self.capacity
        self.entries[slots] = keys
        self.ids[slots] = ids
        self.write_ptr = int((self.write_ptr + n) % self.capacity)
        self.filled = min(self.capacity, self.filled + n)

    def contents(self) -> np.ndarray:
        '''
        Valid entries, oldest first
        '''
        return self.entries[self._order()]

    def stored_ids(self) -> np.ndarray:
        return self.ids[self._order()]

    def _order(self) -> np.ndarray:
        start = (self.write_ptr - self.filled) % self.capacity
        return (start + np.arange(self.filled)) % self.capacity

    def negatives(self) -> np.ndarray:
        '''[filled, dim] array of the negatives currently held'''
        return self.entries[:self.filled] if self.filled < self.capacity \
            else self.entries

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.entries": self.entries.copy(),
            f"{prefix}.ids": self.ids.copy(),
            f"{prefix}.pointer": np.array([self.write_ptr, self.filled])
        }

    def load_state_dict(self, state: dict[str, np.ndarray],
                        prefix: str) -> None:
        entries = np.asarray(state[f"{prefix}.entries"])
        if entries.shape != self.entries.shape:
            raise ShapeError(f"Queue state of shape {entries.shape} does not "
                             f"match {self.entries.shape}")
        self.entries = entries.astype(np.float64).copy()
        self.ids = np.asarray(state[f"{prefix}.ids"]).astype(np.int64).copy()
        self.write_ptr, self.filled = (int(v)
                                       for v in state[f"{prefix}.pointer"])


def queue_push(queue: MemoryQueue,
               keys: Union[Tensor, np.ndarray],
               ids: Optional[np.ndarray] = None) -> MemoryQueue:
    queue.push(keys, ids)
    return queue
