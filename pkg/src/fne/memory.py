"""Momentum-fed FIFO feature queues."""

from __future__ import annotations

import numpy as np

from fne.errors import MalformedInputError


class MemoryBank:
    """Fixed-capacity queue of ``(item id, embedding)`` rows.

    Rows are kept oldest first. Enqueuing past capacity evicts exactly the
    oldest overflow.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.ids = np.zeros(0, dtype=np.int64)
        self.embeddings = np.zeros((0, self.dim))

    def __len__(self) -> int:
        return self.ids.size

    def enqueue_batch(self, ids, embeddings) -> MemoryBank:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != ids.size:
            raise MalformedInputError("need one embedding row per id")
        if emb.shape[1] != self.dim:
            raise MalformedInputError(f"bank dim is {self.dim}, batch has {emb.shape[1]}")
        if ids.size > self.capacity:
            raise MalformedInputError(
                f"batch of {ids.size} exceeds bank capacity {self.capacity}"
            )
        self.ids = np.concatenate([self.ids, ids])[-self.capacity:]
        self.embeddings = np.concatenate([self.embeddings, emb])[-self.capacity:]
        return self

    def entries(self) -> list[tuple[int, np.ndarray]]:
        return [(int(i), e) for i, e in zip(self.ids, self.embeddings)]

    def clear(self) -> None:
        self.ids = self.ids[:0]
        self.embeddings = self.embeddings[:0]


def candidates(bank: MemoryBank, batch_ids, batch_embeddings, exclude_ids=()):
    """Negative candidates for one anchor: the batch, then the bank.

    Returns ``(ids, embeddings, from_bank)`` with rows whose id is in
    ``exclude_ids`` removed. Batch rows come first, then bank rows oldest to
    newest.
    """
    batch_ids = np.asarray(batch_ids, dtype=np.int64).ravel()
    batch_embeddings = np.asarray(batch_embeddings, dtype=np.float64).reshape(
        batch_ids.size, -1 if batch_ids.size else bank.dim
    )
    ids = np.concatenate([batch_ids, bank.ids])
    emb = np.concatenate([batch_embeddings, bank.embeddings])
    from_bank = np.concatenate(
        [np.zeros(batch_ids.size, dtype=bool), np.ones(len(bank), dtype=bool)]
    )
    keep = ~np.isin(ids, np.fromiter(exclude_ids, dtype=np.int64))
    return ids[keep], emb[keep], from_bank[keep]


def momentum_update(key_params, query_params, m: float):
    """Return ``m * key + (1 - m) * query`` for one array or a list of them."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {m}")
    if isinstance(key_params, (list, tuple)):
        if len(key_params) != len(query_params):
            raise MalformedInputError("parameter lists differ in length")
        return [momentum_update(k, q, m) for k, q in zip(key_params, query_params)]
    k = np.asarray(key_params, dtype=np.float64)
    q = np.asarray(query_params, dtype=np.float64)
    if k.shape != q.shape:
        raise MalformedInputError(f"shape mismatch: {k.shape} vs {q.shape}")
    return m * k + (1.0 - m) * q
