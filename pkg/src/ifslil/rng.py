"""Counter-based random streams.

Every uniform is a pure function of ``(master_seed, stream_id, replica,
draw_index)``.  The generator is Philox4x64-10, laid out so that replica ``r``
of a :class:`SeededStream` reproduces ``numpy.random.Philox(key=[master_seed,
stream_id], counter=[0, r, 0, 0])`` word for word.  Because draws are addressed
rather than consumed, a whole block of replicas and steps can be generated in
one vectorized call, and the result never depends on how work is split across
workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_ROUNDS = 10
NATIVE_MIN_BLOCKS = 8
_U64 = (1 << 64) - 1


def _mulhilo(a: np.ndarray, m: np.uint64) -> tuple[np.ndarray, np.ndarray]:
    # 64x64 -> 128 bit product through 32-bit limbs
    m_lo = m & _MASK32
    m_hi = m >> _SHIFT32
    a_lo = a & _MASK32
    a_hi = a >> _SHIFT32
    p0 = a_lo * m_lo
    p1 = a_lo * m_hi
    p2 = a_hi * m_lo
    p3 = a_hi * m_hi
    mid = (p0 >> _SHIFT32) + (p1 & _MASK32) + (p2 & _MASK32)
    hi = p3 + (p1 >> _SHIFT32) + (p2 >> _SHIFT32) + (mid >> _SHIFT32)
    lo = a * m
    return hi, lo


def philox4x64(counter: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Philox4x64-10 block function.

    ``counter`` has shape ``(..., 4)`` of uint64; returns the same shape.
    """
    c = np.asarray(counter, dtype=np.uint64)
    c0, c1, c2, c3 = (c[..., i].copy() for i in range(4))
    k0 = np.uint64(key[0] & _U64)
    k1 = np.uint64(key[1] & _U64)
    with np.errstate(over="ignore"):
        for r in range(_ROUNDS):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(c0, _M0)
            hi1, lo1 = _mulhilo(c2, _M1)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1)


def _mix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SeededStream:
    """A keyed family of substreams; one substream per replica index."""

    master_seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) <= _U64):
                raise ValueError(f"{name} must fit in 64 bits, got {v}")

    def child(self, tag: int | str) -> "SeededStream":
        """Derive an independent stream for a named sub-task."""
        if isinstance(tag, str):
            h = 0
            for ch in tag.encode():
                h = _mix64(h ^ ch)
            tag = h
        return SeededStream(self.master_seed, _mix64(self.stream_id ^ _mix64(int(tag) & _U64)))

    def raw(self, replicas, draw_index) -> np.ndarray:
        """uint64 words for every (replica, draw_index) pair (broadcast)."""
        rep = np.asarray(replicas, dtype=np.uint64)
        idx = np.asarray(draw_index, dtype=np.uint64)
        rep, idx = np.broadcast_arrays(rep, idx)
        block = idx // np.uint64(4) + np.uint64(1)
        word = (idx % np.uint64(4)).astype(np.intp)
        ctr = np.zeros(rep.shape + (4,), dtype=np.uint64)
        ctr[..., 0] = block
        ctr[..., 1] = rep
        out = philox4x64(ctr, (self.master_seed, self.stream_id))
        return np.take_along_axis(out, word[..., None], axis=-1)[..., 0]

    def uniforms(self, replicas, draw_index) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits, numpy's ``random()`` mapping."""
        w = self.raw(replicas, draw_index)
        return (w >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def block(self, replicas: np.ndarray, first_draw: int, count: int) -> np.ndarray:
        """Uniforms of shape ``(count, len(replicas))`` for consecutive draws.

        Consecutive draws share Philox blocks, so this generates four words per
        block function call instead of one.
        """
        rep = np.asarray(replicas, dtype=np.uint64)
        lo = first_draw // 4
        hi = (first_draw + count + 3) // 4
        if hi - lo >= NATIVE_MIN_BLOCKS:
            words = self._native_words(rep, lo, hi)
        else:
            blocks = np.arange(lo, hi, dtype=np.uint64) + np.uint64(1)
            ctr = np.zeros((hi - lo, rep.size, 4), dtype=np.uint64)
            ctr[..., 0] = blocks[:, None]
            ctr[..., 1] = rep[None, :]
            out = philox4x64(ctr, (self.master_seed, self.stream_id))
            words = out.transpose(0, 2, 1).reshape(-1, rep.size)
        off = first_draw - 4 * lo
        words = words[off:off + count]
        return (words >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def _native_words(self, rep: np.ndarray, lo: int, hi: int) -> np.ndarray:
        # numpy's Philox increments its counter before each block, so starting it
        # at block ``lo`` reproduces our counter ``lo + 1`` onwards.
        key = np.array([self.master_seed, self.stream_id], dtype=np.uint64)
        out = np.empty((rep.size, 4 * (hi - lo)), dtype=np.uint64)
        bg = np.random.Philox(key=key)
        state = bg.state
        for i, r in enumerate(rep):
            state["state"]["counter"] = np.array([lo, r, 0, 0], dtype=np.uint64)
            state["buffer_pos"] = 4
            bg.state = state
            out[i] = bg.random_raw(4 * (hi - lo))
        return out.T

    def generator(self, replica: int = 0) -> np.random.Generator:
        """A numpy Generator over the same substream (for non-vectorized use)."""
        bg = np.random.Philox(
            key=np.array([self.master_seed, self.stream_id], dtype=np.uint64),
            counter=np.array([0, replica, 0, 0], dtype=np.uint64),
        )
        return np.random.Generator(bg)
