"""Mini-batch secure aggregation with pairwise cancelling masks.

Each party encodes its slab into 64-bit fixed point and adds, modulo 2**64,
one pseudo-random mask per peer: ``+PRG(s_ij, batch)`` towards peers with a
larger index and ``-PRG(s_ij, batch)`` towards smaller ones. The masks cancel
in the modular sum, so the aggregator only learns the total.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetTooSmall, DimensionMismatch, MissingParty, OverflowRisk
from .prng import SeededGaussianStream, derive_seed


@dataclass(frozen=True)
class FixedPointCodec:
    frac_bits: int = 40
    kind: str = field(default="fixed", init=False)

    def __post_init__(self):
        if not 0 <= self.frac_bits <= 62:
            raise ValueError("frac_bits must be in [0, 62]")

    @property
    def scale(self) -> float:
        return float(2 ** self.frac_bits)

    @property
    def bound(self) -> float:
        return float(2 ** (63 - self.frac_bits))

    def check(self, x: np.ndarray) -> None:
        if not np.all(np.isfinite(x)):
            raise OverflowRisk("slab contains non-finite values")
        if x.size and float(np.max(np.abs(x))) >= self.bound:
            raise OverflowRisk(
                f"|entry| {float(np.max(np.abs(x))):.3e} exceeds 2^{63 - self.frac_bits}"
            )

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self.check(x)
        return np.rint(x * self.scale).astype(np.int64).view(np.uint64)

    def decode(self, words: np.ndarray) -> np.ndarray:
        out = np.asarray(words, dtype=np.uint64).view(np.int64).astype(np.float64)
        out /= self.scale
        return out

    def add(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a + b  # uint64 arithmetic wraps modulo 2**64

    def sub(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a - b

    def mask_words(self, raw: np.ndarray) -> np.ndarray:
        return raw


@dataclass(frozen=True)
class FloatCodec:
    """Additive float masking; masks cancel only up to rounding."""

    mask_scale: float = 1.0
    kind: str = field(default="float", init=False)

    def check(self, x: np.ndarray) -> None:
        if not np.all(np.isfinite(x)):
            raise OverflowRisk("slab contains non-finite values")

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self.check(x)
        return x.copy().view(np.uint64)

    def decode(self, words: np.ndarray) -> np.ndarray:
        return np.asarray(words, dtype=np.uint64).view(np.float64).copy()

    def add(self, a, b):
        return (a.view(np.float64) + b.view(np.float64)).view(np.uint64)

    def sub(self, a, b):
        return (a.view(np.float64) - b.view(np.float64)).view(np.uint64)

    def mask_words(self, raw: np.ndarray) -> np.ndarray:
        u = (raw >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return ((u - 0.5) * self.mask_scale).view(np.uint64)


def codec_from_name(name: str, frac_bits: int = 40):
    if name == "fixed":
        return FixedPointCodec(frac_bits)
    if name == "float":
        return FloatCodec()
    raise ValueError(f"unknown codec {name!r}")


@dataclass(frozen=True)
class PairwiseMaskPlan:
    """Shared seeds ``s_ij`` for every unordered pair of the k parties."""

    k: int
    seeds: dict  # (i, j) with i < j -> 64-bit seed

    @classmethod
    def from_stream(cls, k: int, stream: SeededGaussianStream) -> "PairwiseMaskPlan":
        seeds = {}
        for i in range(k):
            for j in range(i + 1, k):
                seeds[(i, j)] = int(stream.next_u64(1)[0])
        return cls(k, seeds)

    def seeds_for(self, party: int) -> dict[int, int]:
        """Peer index -> pair seed, as delivered to one party."""
        out = {}
        for (i, j), s in self.seeds.items():
            if i == party:
                out[j] = s
            elif j == party:
                out[i] = s
        return out

    @classmethod
    def for_party(cls, k: int, party: int, peer_seeds: dict[int, int]) -> "PairwiseMaskPlan":
        seeds = {(min(party, p), max(party, p)): s for p, s in peer_seeds.items()}
        return cls(k, seeds)


def pair_mask(seed: int, batch: int, size: int) -> np.ndarray:
    return SeededGaussianStream(derive_seed(seed, batch)).next_u64(size)


def minibatch_schedule(rows: int, cols: int, budget_bytes: int) -> list[tuple[int, int]]:
    """Contiguous row ranges whose float64 payload fits in ``budget_bytes``."""
    row_bytes = 8 * max(cols, 1)
    per = budget_bytes // row_bytes
    if per < 1:
        raise BudgetTooSmall(f"budget {budget_bytes} B is below one row ({row_bytes} B)")
    return [(lo, min(lo + per, rows)) for lo in range(0, rows, per)]


def batch_count(rows: int, cols: int, budget_bytes: int) -> int:
    per = budget_bytes // (8 * max(cols, 1))
    return math.ceil(rows / per) if per else 0


def mask_batch(plan: PairwiseMaskPlan, party: int, batch: int, slab, codec) -> np.ndarray:
    """Encode one slab and add this party's share of the pairwise masks."""
    slab = np.asarray(slab, dtype=np.float64)
    words = codec.encode(slab).reshape(-1)
    for (i, j), seed in sorted(plan.seeds.items()):
        if party not in (i, j):
            continue
        mask = codec.mask_words(pair_mask(seed, batch, words.size))
        words = codec.add(words, mask) if party == i else codec.sub(words, mask)
    return words.reshape(slab.shape)


def aggregate_batches(slabs, codec) -> np.ndarray:
    """Sum the masked slabs of all parties and decode the total.

    ``slabs`` may be a generator; each slab is folded into the running sum
    as it arrives, so at most one incoming slab is held next to the sum.
    """
    acc, shape, count = None, None, 0
    for i, s in enumerate(slabs):
        count += 1
        if s is None:
            raise MissingParty(f"no slab from party {i}")
        if acc is None:
            shape = s.shape
            acc = np.array(s, dtype=np.uint64, copy=True)
            continue
        if s.shape != shape:
            raise DimensionMismatch(f"slab shape {s.shape} != {shape}")
        acc = codec.add(acc, s)
    if acc is None:
        raise MissingParty("no slabs to aggregate")
    return codec.decode(acc)
