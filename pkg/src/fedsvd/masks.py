"""Removable random masks: orthogonal P and Q, user strips of Q, and the
block-diagonal recovery masks R_i."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    RankDeficient,
    SingularBlock,
    WidthMismatch,
)
from .linalg import BlockDiagMatrix, blockdiag_mul_right, gram_schmidt_qr
from .prng import SeededGaussianStream

MAX_RESAMPLES = 3
R_COND_LIMIT = 1e8


def random_orthogonal(n: int, stream: SeededGaussianStream) -> np.ndarray:
    """Haar-style random orthogonal matrix: Gram-Schmidt of a Gaussian draw."""
    if n < 1:
        raise ValueError("n must be >= 1")
    for attempt in range(MAX_RESAMPLES + 1):
        draw = stream.normal_matrix(n, n)
        try:
            q, _ = gram_schmidt_qr(draw)
            return q
        except RankDeficient:
            if attempt == MAX_RESAMPLES:
                raise
    raise AssertionError("unreachable")


def efficient_orthogonal(n: int, b: int, stream: SeededGaussianStream) -> BlockDiagMatrix:
    """Orthogonal matrix built from b x b random orthogonal blocks on the diagonal.

    The final block has size ``min(b, remaining)``.
    """
    if n < 1 or b < 1:
        raise ValueError("n and b must be >= 1")
    blocks, i = [], 0
    while i < n:
        size = min(b, n - i)
        blocks.append((i, random_orthogonal(size, stream)))
        i += size
    return BlockDiagMatrix(n, tuple(blocks), orthogonal=True)


def generate_P(seed: int, m: int, b: int) -> BlockDiagMatrix:
    """Regenerate the left mask from its broadcast seed."""
    return efficient_orthogonal(m, b, SeededGaussianStream(seed))


@dataclass(frozen=True)
class Segment:
    """Nonzero rectangle of a strip: global rows [row_lo, row_hi) of Q
    intersected with diagonal block ``q_block`` (columns at ``q_offset``)."""

    q_block: int
    q_offset: int
    row_lo: int
    data: np.ndarray  # (row_hi - row_lo) x q_size

    @property
    def row_hi(self) -> int:
        return self.row_lo + self.data.shape[0]

    @property
    def width(self) -> int:
        # column width of this segment inside Q_i^T
        return self.data.shape[0]

    @property
    def q_size(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class QStrip:
    owner: int
    col_range: tuple[int, int]
    dim: int
    segments: tuple[Segment, ...]

    @property
    def width(self) -> int:
        return self.col_range[1] - self.col_range[0]

    def to_dense(self) -> np.ndarray:
        start, end = self.col_range
        out = np.zeros((end - start, self.dim))
        for seg in self.segments:
            out[seg.row_lo - start:seg.row_hi - start, seg.q_offset:seg.q_offset + seg.q_size] = seg.data
        return out

    def right_multiply(self, x: np.ndarray) -> np.ndarray:
        """``x @ dense(strip)`` for x with ``width`` columns; untouched columns stay zero."""
        start = self.col_range[0]
        if x.shape[1] != self.width:
            raise DimensionMismatch(f"strip expects {self.width} columns, got {x.shape[1]}")
        out = np.zeros((x.shape[0], self.dim))
        for seg in self.segments:
            lo = seg.row_lo - start
            out[:, seg.q_offset:seg.q_offset + seg.q_size] = x[:, lo:lo + seg.width] @ seg.data
        return out

    def apply(self, w: np.ndarray) -> np.ndarray:
        """``dense(strip) @ w`` for a length-``dim`` vector."""
        start = self.col_range[0]
        out = np.zeros(self.width)
        for seg in self.segments:
            lo = seg.row_lo - start
            out[lo:lo + seg.width] += seg.data @ w[seg.q_offset:seg.q_offset + seg.q_size]
        return out


def split_Q(q: BlockDiagMatrix, widths) -> list[QStrip]:
    """Cut Q into horizontal strips, one per user, keeping only nonzero rectangles."""
    widths = [int(w) for w in widths]
    if any(w < 1 for w in widths) or sum(widths) != q.dim:
        raise WidthMismatch(f"widths {widths} do not partition dimension {q.dim}")
    strips, start = [], 0
    for owner, w in enumerate(widths):
        end = start + w
        segs = []
        for idx, (off, blk) in enumerate(q.blocks):
            size = blk.shape[0]
            lo, hi = max(start, off), min(end, off + size)
            if lo < hi:
                segs.append(Segment(idx, off, lo, np.ascontiguousarray(blk[lo - off:hi - off])))
        strips.append(QStrip(owner, (start, end), q.dim, tuple(segs)))
        start = end
    return strips


def _condition(block: np.ndarray) -> float:
    s = np.linalg.svd(block, compute_uv=False)
    return float("inf") if s[-1] == 0 else float(s[0] / s[-1])


def generate_R(strip: QStrip, stream: SeededGaussianStream) -> BlockDiagMatrix:
    """Random invertible block-diagonal mask whose block sizes follow the strip segments."""
    blocks = []
    for seg in strip.segments:
        w = seg.width
        for attempt in range(MAX_RESAMPLES + 1):
            blk = stream.normal_matrix(w, w)
            if _condition(blk) <= R_COND_LIMIT:
                break
            if attempt == MAX_RESAMPLES:
                raise SingularBlock(f"could not draw a conditioned {w}x{w} block")
        blocks.append(blk)
    return BlockDiagMatrix.from_blocks(blocks)


def _gauss_jordan_inverse(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    aug = np.hstack([a.astype(np.float64, copy=True), np.eye(n)])
    for col in range(n):
        piv = col + int(np.argmax(np.abs(aug[col:, col])))
        if abs(aug[piv, col]) < 1e-12:
            raise SingularBlock(f"pivot {aug[piv, col]:.3e} below 1e-12 at column {col}")
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        aug[col] /= aug[col, col]
        factors = aug[:, col].copy()
        factors[col] = 0.0
        aug -= np.outer(factors, aug[col])
    return np.ascontiguousarray(aug[:, n:])


def invert_R(r: BlockDiagMatrix) -> BlockDiagMatrix:
    return BlockDiagMatrix(r.dim, tuple((off, _gauss_jordan_inverse(blk)) for off, blk in r.blocks))


@dataclass(frozen=True)
class MaskedStripT:
    """Block-sparse ``Q_i^T R_i`` (n x n_i): entries are (row_offset, col_offset, block)."""

    shape: tuple[int, int]
    pieces: tuple[tuple[int, int, np.ndarray], ...]

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for r0, c0, blk in self.pieces:
            out[r0:r0 + blk.shape[0], c0:c0 + blk.shape[1]] = blk
        return out

    def left_multiply(self, vt: np.ndarray) -> np.ndarray:
        """``vt @ dense(self)`` touching only the nonzero pieces."""
        if vt.shape[1] != self.shape[0]:
            raise DimensionMismatch(f"cannot multiply {vt.shape} by {self.shape}")
        out = np.zeros((vt.shape[0], self.shape[1]))
        for r0, c0, blk in self.pieces:
            out[:, c0:c0 + blk.shape[1]] = vt[:, r0:r0 + blk.shape[0]] @ blk
        return out


def mask_strip_transpose(strip: QStrip, r: BlockDiagMatrix) -> MaskedStripT:
    """``Q_i^T R_i`` computed segment by segment, keeping its block sparsity."""
    if r.dim != strip.width or len(r.blocks) != len(strip.segments):
        raise DimensionMismatch("R_i does not match the strip segmentation")
    start = strip.col_range[0]
    pieces = []
    for seg, (off, blk) in zip(strip.segments, r.blocks):
        if off != seg.row_lo - start:
            raise DimensionMismatch("R_i block offsets do not follow the strip segments")
        pieces.append((seg.q_offset, off, seg.data.T @ blk))
    return MaskedStripT((strip.dim, strip.width), tuple(pieces))


def unmask_v(masked_vt: np.ndarray, r_inv: BlockDiagMatrix) -> np.ndarray:
    """``[V_i^T]^R R_i^{-1}``."""
    return blockdiag_mul_right(masked_vt, r_inv)


def mask_row_block(p_block: np.ndarray, x_rows: np.ndarray, segments, col_start: int,
                   dim: int) -> np.ndarray:
    """Masked rows ``P_j X_rows Q_i`` for one diagonal block of P.

    Shared by the in-memory and the out-of-core paths so both perform the same
    floating-point operations in the same order.
    """
    y = p_block @ x_rows
    out = np.zeros((y.shape[0], dim))
    for seg in segments:
        lo = seg.row_lo - col_start
        out[:, seg.q_offset:seg.q_offset + seg.q_size] = y[:, lo:lo + seg.width] @ seg.data
    return out


def apply_masks(x: np.ndarray, p: BlockDiagMatrix, strip: QStrip) -> np.ndarray:
    """``P X_i Q_i`` for one user's local block, in O(m n_i b) work."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (p.dim, strip.width):
        raise DimensionMismatch(f"local data {x.shape} vs P dim {p.dim} and strip width {strip.width}")
    out = np.empty((p.dim, strip.dim))
    for off, blk in p.blocks:
        s = blk.shape[0]
        out[off:off + s] = mask_row_block(blk, x[off:off + s], strip.segments, strip.col_range[0], strip.dim)
    return out
