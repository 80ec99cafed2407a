"""Raw-token replay: a recent ring buffer plus a long-term reservoir of fixed-length chunks."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Rng


def chunk_tokens(x: np.ndarray, l_r: int) -> np.ndarray:
    """Split each row into floor(T / l_r) non-overlapping chunks, dropping the tail."""
    if l_r < 2:
        raise ValueError(f"chunk length must be >= 2, got {l_r}")
    x = np.asarray(x)
    b, t = x.shape
    m = t // l_r
    return x[:, : m * l_r].reshape(b * m, l_r).copy()


def _assign_last_wins(dst: np.ndarray, slots: np.ndarray, rows: np.ndarray) -> None:
    """dst[slots] = rows where, for repeated slots, the latest row is kept."""
    if slots.size == 0:
        return
    rev_slots = slots[::-1]
    uniq, first = np.unique(rev_slots, return_index=True)
    dst[uniq] = rows[::-1][first]


class ReplayStores:
    def __init__(self, l_r: int, n_recent: int, n_long: int, rng: Rng):
        self.l_r = l_r
        self.n_recent = n_recent
        self.n_long = n_long
        self.recent = np.zeros((n_recent, l_r), dtype=np.int64)
        self.long = np.zeros((n_long, l_r), dtype=np.int64)
        self.recent_ptr = 0
        self.recent_count = 0
        self.seen = 0
        self.rng = rng
        # set by push_chunks, cleared by begin_step; sampling after a push in the same step is refused
        self._pushed_this_step = False

    @property
    def long_count(self) -> int:
        return min(self.seen, self.n_long)

    def push_chunks(self, chunks: np.ndarray) -> None:
        """Append to the ring and offer each chunk, in order, to the reservoir.

        While the reservoir has room chunks fill it in arrival order. After that the
        chunk seen as number n (0-based) draws r ~ Unif{0..n} and replaces slot r if r < N_long.
        """
        chunks = np.asarray(chunks)
        k = chunks.shape[0]
        if k == 0:
            return
        ring_slots = (self.recent_ptr + np.arange(k)) % self.n_recent
        _assign_last_wins(self.recent, ring_slots, chunks)
        self.recent_ptr = int((self.recent_ptr + k) % self.n_recent)
        self.recent_count = min(self.n_recent, self.recent_count + k)

        n = self.seen + np.arange(k)
        fill = n < self.n_long
        if fill.any():
            self.long[n[fill]] = chunks[fill]
        rest = np.nonzero(~fill)[0]
        if rest.size:
            r = self.rng.generator.integers(0, n[rest] + 1)
            hit = r < self.n_long
            _assign_last_wins(self.long, r[hit], chunks[rest[hit]])
        self.seen += k
        self._pushed_this_step = True

    def begin_step(self) -> None:
        self._pushed_this_step = False

    def sample(self, b_r: int, rho_long: float) -> np.ndarray:
        """Draw ``b_r`` chunks with replacement, ``round(b_r * rho_long)`` from the reservoir.

        A store that is empty hands its share to the other one; both empty gives zero rows.
        """
        if self._pushed_this_step:
            raise ContractError("replay sampling must precede pushing the current batch")
        b_long = int(round(b_r * rho_long))
        b_recent = b_r - b_long
        n_l, n_r = self.long_count, self.recent_count
        if n_l == 0:
            b_long, b_recent = 0, b_r
        if n_r == 0:
            b_long, b_recent = b_long + b_recent, 0
        if n_l == 0 and n_r == 0:
            return np.zeros((0, self.l_r), dtype=np.int64)
        gen = self.rng.generator
        parts = []
        if b_long:
            parts.append(self.long[gen.integers(0, n_l, size=b_long)])
        if b_recent:
            parts.append(self.recent[gen.integers(0, n_r, size=b_recent)])
        return np.concatenate(parts, axis=0)

    def counts(self) -> tuple[int, int]:
        return self.recent_count, self.long_count

    def arrays(self) -> dict[str, np.ndarray]:
        return {"recent": self.recent, "long": self.long}

    def state(self) -> dict:
        return dict(recent_ptr=self.recent_ptr, recent_count=self.recent_count, seen=self.seen,
                    rng=self.rng.get_state())

    def load_state(self, st: dict, arrays: dict) -> None:
        self.recent[...] = arrays["recent"]
        self.long[...] = arrays["long"]
        self.recent_ptr = int(st["recent_ptr"])
        self.recent_count = int(st["recent_count"])
        self.seen = int(st["seen"])
        self.rng.set_state(st["rng"])
