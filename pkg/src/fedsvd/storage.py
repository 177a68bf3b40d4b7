"""On-disk formats and out-of-core mask application.

Block file ("FSVB")::

    magic | version u16 | dim u64 | block_count u64
    per block: offset u64 | size u64 | size*size float64 (row-major)

Strip file ("FSVQ"), the same idea for one user's slice of Q::

    magic | version u16 | dim u64 | segment_count u64 | owner u64 | col_start u64 | col_end u64
    per segment: q_block u64 | q_offset u64 | row_lo u64 | rows u64 | q_size u64 | rows*q_size float64

Matrix file ("FSVM")::

    magic | version u16 | rows u64 | cols u64 | layout u8 | 2 reserved bytes | float64 payload

All integers and reals are little-endian.
"""
from __future__ import annotations

import os
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import BudgetTooSmall, CorruptHeader, DimensionMismatch, TruncatedFile
from .linalg import BlockDiagMatrix
from .masks import QStrip, Segment

VERSION = 1
F64 = np.dtype("<f8")

BLOCK_HEADER = struct.Struct("<4sHQQ")
BLOCK_ENTRY = struct.Struct("<QQ")
STRIP_HEADER = struct.Struct("<4sHQQQQQ")
STRIP_ENTRY = struct.Struct("<QQQQQ")
MATRIX_HEADER = struct.Struct("<4sHQQB2x")

ROW_MAJOR = 0
COL_MAJOR = 1


def _read(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFile(f"expected {n} bytes, got {len(data)}")
    return data


def _read_f64(f, count: int) -> np.ndarray:
    # read straight into the array: no intermediate bytes object
    out = np.empty(count, dtype=F64)
    got = f.readinto(memoryview(out).cast("B")) if count else 0
    if got != 8 * count:
        raise TruncatedFile(f"expected {8 * count} bytes, got {got}")
    return out


# -- block files -------------------------------------------------------------

def write_blocks(path, mat: BlockDiagMatrix) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(BLOCK_HEADER.pack(b"FSVB", VERSION, mat.dim, len(mat.blocks)))
        for off, blk in mat.blocks:
            f.write(BLOCK_ENTRY.pack(off, blk.shape[0]))
            f.write(np.ascontiguousarray(blk, dtype=F64).tobytes())
    return path


def _block_header(f) -> tuple[int, int]:
    magic, version, dim, count = BLOCK_HEADER.unpack(_read(f, BLOCK_HEADER.size))
    if magic != b"FSVB" or version != VERSION:
        raise CorruptHeader(f"not a block file (magic {magic!r}, version {version})")
    return dim, count


def read_block_iter(path) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(offset, block)`` one at a time; only the current block is resident."""
    with open(path, "rb") as f:
        dim, count = _block_header(f)
        pos = 0
        for _ in range(count):
            off, size = BLOCK_ENTRY.unpack(_read(f, BLOCK_ENTRY.size))
            if off != pos or off + size > dim:
                raise CorruptHeader(f"block at {off} (size {size}) breaks the diagonal layout")
            yield off, _read_f64(f, size * size).reshape(size, size)
            pos += size
        if pos != dim and count:
            raise CorruptHeader(f"blocks cover {pos} of {dim}")


def read_blocks(path, orthogonal: bool = False) -> BlockDiagMatrix:
    with open(path, "rb") as f:
        dim, _ = _block_header(f)
    return BlockDiagMatrix(dim, tuple(read_block_iter(path)), orthogonal)


def block_file_size(dim: int, sizes) -> int:
    return BLOCK_HEADER.size + sum(BLOCK_ENTRY.size + 8 * s * s for s in sizes)


# -- strip files -------------------------------------------------------------

def write_strip(path, strip: QStrip) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(STRIP_HEADER.pack(b"FSVQ", VERSION, strip.dim, len(strip.segments), strip.owner,
                                  *strip.col_range))
        for seg in strip.segments:
            f.write(STRIP_ENTRY.pack(seg.q_block, seg.q_offset, seg.row_lo, *seg.data.shape))
            f.write(np.ascontiguousarray(seg.data, dtype=F64).tobytes())
    return path


def _strip_header(f):
    magic, version, dim, count, owner, start, end = STRIP_HEADER.unpack(_read(f, STRIP_HEADER.size))
    if magic != b"FSVQ" or version != VERSION:
        raise CorruptHeader(f"not a strip file (magic {magic!r}, version {version})")
    return dim, count, owner, start, end


def read_segment_iter(path) -> Iterator[Segment]:
    with open(path, "rb") as f:
        dim, count, _, _, _ = _strip_header(f)
        for _ in range(count):
            q_block, q_offset, row_lo, rows, q_size = STRIP_ENTRY.unpack(_read(f, STRIP_ENTRY.size))
            if q_offset + q_size > dim:
                raise CorruptHeader("segment exceeds strip dimension")
            yield Segment(q_block, q_offset, row_lo, _read_f64(f, rows * q_size).reshape(rows, q_size))


def read_strip(path) -> QStrip:
    with open(path, "rb") as f:
        dim, _, owner, start, end = _strip_header(f)
    return QStrip(owner, (start, end), dim, tuple(read_segment_iter(path)))


def strip_info(path) -> tuple[int, int, int, int]:
    """(dim, owner, col_start, col_end) without reading segment data."""
    with open(path, "rb") as f:
        dim, _, owner, start, end = _strip_header(f)
    return dim, owner, start, end


# -- matrix files ------------------------------------------------------------

class MatrixFile:
    """Read access to an FSVM file; counts read calls for layout audits."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as f:
            magic, version, rows, cols, layout = MATRIX_HEADER.unpack(_read(f, MATRIX_HEADER.size))
        if magic != b"FSVM" or version != VERSION or layout not in (ROW_MAJOR, COL_MAJOR):
            raise CorruptHeader(f"not a matrix file (magic {magic!r}, version {version}, layout {layout})")
        expected = MATRIX_HEADER.size + 8 * rows * cols
        actual = os.path.getsize(self.path)
        if actual != expected:
            raise TruncatedFile(f"{self.path}: {actual} bytes, header implies {expected}")
        self.rows, self.cols, self.layout = rows, cols, layout
        self.read_calls = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @contextmanager
    def _open(self):
        with open(self.path, "rb", buffering=0) as f:
            yield f

    def _pread(self, f, index: int, count: int) -> np.ndarray:
        f.seek(MATRIX_HEADER.size + 8 * index)
        self.read_calls += 1
        return _read_f64(f, count)

    def read_rows(self, lo: int, hi: int) -> np.ndarray:
        with self._open() as f:
            if self.layout == ROW_MAJOR:
                return self._pread(f, lo * self.cols, (hi - lo) * self.cols).reshape(hi - lo, self.cols)
            out = np.empty((hi - lo, self.cols))
            for c in range(self.cols):
                out[:, c] = self._pread(f, c * self.rows + lo, hi - lo)
            return out

    def read_cols(self, lo: int, hi: int) -> np.ndarray:
        with self._open() as f:
            if self.layout == COL_MAJOR:
                return self._pread(f, lo * self.rows, (hi - lo) * self.rows).reshape(hi - lo, self.rows).T.copy()
            out = np.empty((self.rows, hi - lo))
            for r in range(self.rows):
                out[r] = self._pread(f, r * self.cols + lo, hi - lo)
            return out

    def read_all(self) -> np.ndarray:
        return self.read_rows(0, self.rows)


def write_matrix(path, x, layout: int = ROW_MAJOR) -> Path:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MATRIX_HEADER.pack(b"FSVM", VERSION, x.shape[0], x.shape[1], layout))
        body = x if layout == ROW_MAJOR else x.T
        f.write(np.ascontiguousarray(body, dtype=F64).tobytes())
    return path


def read_matrix(path) -> np.ndarray:
    return MatrixFile(path).read_all()


class RowWriter:
    """Append row slabs to a row-major matrix file of known shape."""

    def __init__(self, path, rows: int, cols: int):
        self.path = Path(path)
        self.rows, self.cols, self.written = rows, cols, 0
        self._f = open(self.path, "wb")
        self._f.write(MATRIX_HEADER.pack(b"FSVM", VERSION, rows, cols, ROW_MAJOR))

    def write(self, slab: np.ndarray) -> None:
        if slab.shape[1] != self.cols or self.written + slab.shape[0] > self.rows:
            raise DimensionMismatch(f"slab {slab.shape} does not fit {self.rows}x{self.cols}")
        self._f.write(memoryview(np.ascontiguousarray(slab, dtype=F64)).cast("B"))
        self.written += slab.shape[0]

    def close(self) -> None:
        self._f.close()
        if self.written != self.rows:
            raise TruncatedFile(f"wrote {self.written} of {self.rows} rows")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None:
            self.close()
        else:
            self._f.close()


# -- out-of-core masking -----------------------------------------------------

class ResidencyTracker:
    """Explicit accounting of matrix bytes held in memory."""

    def __init__(self, budget: int | None = None):
        self.budget = budget
        self.current = 0
        self.peak = 0

    def hold(self, *arrays: np.ndarray) -> None:
        self.current += sum(a.nbytes for a in arrays)
        self.peak = max(self.peak, self.current)
        if self.budget is not None and self.current > self.budget:
            raise BudgetTooSmall(f"resident {self.current} B exceeds budget {self.budget} B")

    def drop(self, *arrays: np.ndarray) -> None:
        self.current -= sum(a.nbytes for a in arrays)


def streamed_budget_floor(block: int, cols: int) -> int:
    return 2 * (block * block + block * cols) * 8


def streamed_mask_apply(x_path, p_path, strip_path, budget_bytes: int, out_path,
                        tracker: ResidencyTracker | None = None) -> Path:
    """``P X_i Q_i`` streamed from disk, one P block and one strip segment at a time.

    The output is row-major because the next consumer batches rows for secure
    aggregation.
    """
    xf = MatrixFile(x_path)
    dim, _, start, end = strip_info(strip_path)
    if xf.cols != end - start:
        raise DimensionMismatch(f"X has {xf.cols} columns, strip covers {end - start}")
    with open(p_path, "rb") as f:
        p_dim, _ = _block_header(f)
    if p_dim != xf.rows:
        raise DimensionMismatch(f"P dim {p_dim} vs X rows {xf.rows}")
    sizes = []
    with open(p_path, "rb") as f:
        _block_header(f)
        for _ in range(_block_count(p_path)):
            _, size = BLOCK_ENTRY.unpack(_read(f, BLOCK_ENTRY.size))
            sizes.append(size)
            f.seek(8 * size * size, os.SEEK_CUR)
    q_sizes = [seg_size for seg_size in _segment_q_sizes(strip_path)]
    largest = max(sizes + q_sizes + [1])
    floor = streamed_budget_floor(largest, max(dim, xf.cols))
    if budget_bytes < floor:
        raise BudgetTooSmall(f"budget {budget_bytes} B below {floor} B for block {largest}")
    tracker = tracker or ResidencyTracker(budget_bytes)
    with RowWriter(out_path, xf.rows, dim) as out:
        for off, blk in read_block_iter(p_path):
            s = blk.shape[0]
            x_rows = xf.read_rows(off, off + s)
            tracker.hold(blk, x_rows)
            y = blk @ x_rows
            tracker.hold(y)
            tracker.drop(x_rows)
            del x_rows
            slab = np.zeros((s, dim))
            tracker.hold(slab)
            for seg in read_segment_iter(strip_path):
                tracker.hold(seg.data)
                lo = seg.row_lo - start
                slab[:, seg.q_offset:seg.q_offset + seg.q_size] = y[:, lo:lo + seg.width] @ seg.data
                tracker.drop(seg.data)
            out.write(slab)
            tracker.drop(blk, y, slab)
            del blk, y, slab
    return Path(out_path)


def _block_count(path) -> int:
    with open(path, "rb") as f:
        return _block_header(f)[1]


def _segment_q_sizes(path) -> list[int]:
    out = []
    with open(path, "rb") as f:
        _, count, _, _, _ = _strip_header(f)
        for _ in range(count):
            _, _, _, rows, q_size = STRIP_ENTRY.unpack(_read(f, STRIP_ENTRY.size))
            out.append(q_size)
            f.seek(8 * rows * q_size, os.SEEK_CUR)
    return out
