"""Payload encodings for every protocol message (little-endian throughout)."""
from __future__ import annotations

import struct

import numpy as np

from .errors import MalformedFrame
from .masks import MaskedStripT, QStrip, Segment
from .transport import Frame, MsgType

U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")
F64 = np.dtype("<f8")
U64W = np.dtype("<u8")

STEP_INIT, STEP_AGGREGATE, STEP_FACTORIZE, STEP_RECOVER = 1, 2, 3, 4


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise MalformedFrame("payload shorter than its declared contents")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return U64.unpack(self.take(8))[0]

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype=F64).astype(np.float64)

    def matrix(self) -> np.ndarray:
        rows, cols = self.u64(), self.u64()
        return self.f64(rows * cols).reshape(rows, cols)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedFrame(f"{len(self.data) - self.pos} trailing payload bytes")


def _matrix(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    return U64.pack(x.shape[0]) + U64.pack(x.shape[1]) + np.ascontiguousarray(x, dtype=F64).tobytes()


def _vector(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return U64.pack(x.shape[0]) + np.ascontiguousarray(x, dtype=F64).tobytes()


def _frame(sid: int, step: int, kind: MsgType, payload: bytes) -> Frame:
    return Frame(sid, step, kind, payload)


def expect(frame: Frame, kind: MsgType) -> Frame:
    if frame.msg_type == MsgType.ABORT:
        from .errors import ProtocolAborted

        raise ProtocolAborted(decode_abort(frame))
    if frame.msg_type != kind:
        raise MalformedFrame(f"expected {kind.name}, got {frame.msg_type.name}")
    return frame


# SeedP: seed u64 | m u64 | block u64  (24 bytes whatever the size of P)
def encode_seed_p(sid: int, seed: int, m: int, block: int) -> Frame:
    return _frame(sid, STEP_INIT, MsgType.SEED_P, U64.pack(seed) + U64.pack(m) + U64.pack(block))


def decode_seed_p(frame: Frame) -> tuple[int, int, int]:
    r = _Reader(frame.payload)
    out = r.u64(), r.u64(), r.u64()
    r.done()
    return out


# StripQ: owner u64 | col_start u64 | col_end u64 | dim u64 | count u64 |
#         per segment: q_block u64 | q_offset u64 | row_lo u64 | rows u64 | q_size u64 | data
def encode_strip(sid: int, strip: QStrip) -> Frame:
    parts = [U64.pack(v) for v in (strip.owner, *strip.col_range, strip.dim, len(strip.segments))]
    for seg in strip.segments:
        parts += [U64.pack(v) for v in (seg.q_block, seg.q_offset, seg.row_lo, *seg.data.shape)]
        parts.append(np.ascontiguousarray(seg.data, dtype=F64).tobytes())
    return _frame(sid, STEP_INIT, MsgType.STRIP_Q, b"".join(parts))


def decode_strip(frame: Frame) -> QStrip:
    r = _Reader(frame.payload)
    owner, start, end, dim, count = (r.u64() for _ in range(5))
    segs = []
    for _ in range(count):
        q_block, q_offset, row_lo, rows, q_size = (r.u64() for _ in range(5))
        segs.append(Segment(q_block, q_offset, row_lo, r.f64(rows * q_size).reshape(rows, q_size)))
    r.done()
    return QStrip(owner, (start, end), dim, tuple(segs))


# PairSeeds: k u32 | count u32 | per peer: peer u32 | seed u64
def encode_pair_seeds(sid: int, k: int, peer_seeds: dict[int, int]) -> Frame:
    parts = [U32.pack(k), U32.pack(len(peer_seeds))]
    for peer in sorted(peer_seeds):
        parts += [U32.pack(peer), U64.pack(peer_seeds[peer])]
    return _frame(sid, STEP_INIT, MsgType.PAIR_SEEDS, b"".join(parts))


def decode_pair_seeds(frame: Frame) -> tuple[int, dict[int, int]]:
    r = _Reader(frame.payload)
    k, count = r.u32(), r.u32()
    seeds = {}
    for _ in range(count):
        peer = r.u32()
        seeds[peer] = r.u64()
    r.done()
    return k, seeds


# MaskedBatch: batch u32 | row_lo u64 | row_hi u64 | u64 words row-major
def encode_masked_batch(sid: int, batch: int, rows: tuple[int, int], words: np.ndarray) -> Frame:
    payload = U32.pack(batch) + U64.pack(rows[0]) + U64.pack(rows[1])
    payload += np.ascontiguousarray(words, dtype=U64W).tobytes()
    return _frame(sid, STEP_AGGREGATE, MsgType.MASKED_BATCH, payload)


def decode_masked_batch(frame: Frame, cols: int) -> tuple[int, tuple[int, int], np.ndarray]:
    r = _Reader(frame.payload)
    batch, lo, hi = r.u32(), r.u64(), r.u64()
    n_words = (hi - lo) * cols
    words = np.frombuffer(r.take(8 * n_words), dtype=U64W).astype(np.uint64, copy=False).reshape(hi - lo, cols)
    r.done()
    return batch, (lo, hi), words


# MaskedLabel / MaskedWeights: one vector
def encode_vector(sid: int, step: int, kind: MsgType, v: np.ndarray) -> Frame:
    return _frame(sid, step, kind, _vector(v))


def decode_vector(frame: Frame) -> np.ndarray:
    r = _Reader(frame.payload)
    v = r.f64(r.u64())
    r.done()
    return v


# ResultUSigma: U' matrix | sigma vector (possibly empty)
def encode_result(sid: int, u: np.ndarray, sigma: np.ndarray) -> Frame:
    return _frame(sid, STEP_FACTORIZE, MsgType.RESULT_U_SIGMA, _matrix(u) + _vector(sigma))


def decode_result(frame: Frame) -> tuple[np.ndarray, np.ndarray]:
    r = _Reader(frame.payload)
    u = r.matrix()
    sigma = r.f64(r.u64())
    r.done()
    return u, sigma


# MaskedQiR: rows u64 | cols u64 | count u64 | per piece: row_off u64 | col_off u64 | matrix
def encode_masked_qir(sid: int, m: MaskedStripT) -> Frame:
    parts = [U64.pack(m.shape[0]), U64.pack(m.shape[1]), U64.pack(len(m.pieces))]
    for r0, c0, blk in m.pieces:
        parts += [U64.pack(r0), U64.pack(c0), _matrix(blk)]
    return _frame(sid, STEP_RECOVER, MsgType.MASKED_QIR, b"".join(parts))


def decode_masked_qir(frame: Frame) -> MaskedStripT:
    r = _Reader(frame.payload)
    rows, cols, count = r.u64(), r.u64(), r.u64()
    pieces = []
    for _ in range(count):
        r0, c0 = r.u64(), r.u64()
        pieces.append((r0, c0, r.matrix()))
    r.done()
    return MaskedStripT((rows, cols), tuple(pieces))


def encode_masked_vir(sid: int, vt: np.ndarray) -> Frame:
    return _frame(sid, STEP_RECOVER, MsgType.MASKED_VIR, _matrix(vt))


def decode_masked_vir(frame: Frame) -> np.ndarray:
    r = _Reader(frame.payload)
    out = r.matrix()
    r.done()
    return out


def encode_abort(sid: int, step: int, reason: str) -> Frame:
    return _frame(sid, step, MsgType.ABORT, reason.encode("utf-8"))


def decode_abort(frame: Frame) -> str:
    return frame.payload.decode("utf-8", errors="replace")
