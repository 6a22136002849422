"""Bounded FIFO store of normalized wild pixel embeddings with exact nearest-neighbour lookup."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataIntegrityError, EmptyStoreError, ParameterError, ShapeError

_HEADER = struct.Struct("<4Q")  # dim, size, capacity, generation
UNIT_TOL = 1e-5


class ContentStore:
    """Ring buffer of ``capacity`` embeddings of width ``dim``.

    Logical store index 0 is the oldest surviving entry. Entries are kept
    detached from any autograd graph.
    """

    def __init__(self, dim: int, capacity: int, dtype=torch.float32):
        if dim < 1 or capacity < 1:
            raise ParameterError("dim and capacity must be positive")
        self.dim = dim
        self.capacity = capacity
        self._buf = torch.zeros(capacity, dim, dtype=dtype)
        self.write_cursor = 0
        self.generation = 0  # total entries ever pushed

    def __len__(self) -> int:
        return min(self.generation, self.capacity)

    @property
    def full(self) -> bool:
        return self.generation >= self.capacity

    def entries(self) -> torch.Tensor:
        """Stored rows ``[len, dim]`` in push order (oldest first)."""
        if not self.full:
            return self._buf[: self.write_cursor].clone()
        return torch.roll(self._buf, -self.write_cursor, dims=0)

    def push(self, batch: torch.Tensor) -> "ContentStore":
        """Append rows of ``batch`` (``[n, dim]``, unit norm or zero), evicting the oldest when full."""
        batch = torch.as_tensor(batch).detach()
        if batch.dim() != 2 or batch.shape[1] != self.dim:
            raise ShapeError(f"expected [n, {self.dim}] entries, got {tuple(batch.shape)}")
        norms = batch.double().norm(dim=1)
        if not torch.isfinite(norms).all():
            raise DataIntegrityError("non-finite store entries")
        if ((norms - 1).abs() > UNIT_TOL).logical_and(norms != 0).any():
            raise DataIntegrityError("store entries must be L2-normalized")
        n = batch.shape[0]
        if n > self.capacity:
            self.generation += n - self.capacity
            self.write_cursor = (self.write_cursor + n - self.capacity) % self.capacity
            batch = batch[-self.capacity :]
            n = self.capacity
        batch = batch.to(self._buf.dtype)
        end = self.write_cursor + n
        if end <= self.capacity:
            self._buf[self.write_cursor : end] = batch
        else:
            split = self.capacity - self.write_cursor
            self._buf[self.write_cursor :] = batch[:split]
            self._buf[: end - self.capacity] = batch[split:]
        self.write_cursor = end % self.capacity
        self.generation += n
        return self

    def nearest(self, query: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Entry with the largest dot product for each query row.

        ``query`` is ``[dim]`` or ``[q, dim]``. Returns ``(entries, indices)``
        where indices are logical store indices; ties go to the lowest index.
        """
        if len(self) == 0:
            raise EmptyStoreError("nearest() on an empty content store")
        query = torch.as_tensor(query).detach()
        single = query.dim() == 1
        q = query[None] if single else query
        if q.shape[-1] != self.dim:
            raise ShapeError(f"query width {q.shape[-1]} != store width {self.dim}")
        stored = self.entries()
        # torch.argmax returns the first maximal index
        idx = (q.to(stored.dtype) @ stored.T).argmax(dim=1)
        out = stored[idx]
        return (out[0], idx[0]) if single else (out, idx)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "buffer": self._buf.numpy().copy(),
            "counters": np.array([self.write_cursor, self.generation], dtype=np.int64),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        buf = torch.from_numpy(np.asarray(arrays["buffer"])).to(self._buf.dtype)
        if buf.shape != self._buf.shape:
            raise ShapeError(f"store buffer shape {tuple(buf.shape)} != {tuple(self._buf.shape)}")
        self._buf = buf.clone()
        self.write_cursor, self.generation = (int(v) for v in arrays["counters"])

    def save(self, path) -> None:
        """Debug snapshot: little-endian uint64 header then ``[dim, size]`` row-major float32."""
        payload = self.entries().T.contiguous().numpy().astype("<f4")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(self.dim, len(self), self.capacity, self.generation))
            fh.write(payload.tobytes())

    @classmethod
    def load(cls, path) -> "ContentStore":
        raw = Path(path).read_bytes()
        dim, size, capacity, generation = _HEADER.unpack_from(raw)
        payload = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
        if payload.size != dim * size:
            raise DataIntegrityError(f"snapshot {path} truncated")
        store = cls(dim, capacity)
        store._buf[:size] = torch.from_numpy(payload.reshape(dim, size).T.copy())
        store.write_cursor = size % capacity
        store.generation = generation
        return store
