"""Dense linear-algebra kernels used by every party of the protocol.

Matrices are plain C-contiguous ``float64`` numpy arrays. Block-diagonal
masks are stored compactly in :class:`BlockDiagMatrix` and are never
materialised on the hot paths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NoConvergence, RankDeficient

PIVOT_TOL = 1e-12
JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 60


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate external input as a finite 2-D float64 matrix."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    sigma: np.ndarray
    Vt: np.ndarray

    @property
    def rank_count(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        k = self.sigma.shape[0]
        return (self.U[:, :k] * self.sigma) @ self.Vt[:k]


@dataclass(frozen=True)
class BlockDiagMatrix:
    """Square matrix made of square blocks laid along the diagonal."""

    dim: int
    blocks: tuple = field(default_factory=tuple)  # ((offset, block), ...)
    orthogonal: bool = False

    def __post_init__(self):
        pos = 0
        for off, blk in self.blocks:
            if off != pos:
                raise DimensionMismatch(f"block offset {off} expected {pos}")
            if blk.ndim != 2 or blk.shape[0] != blk.shape[1]:
                raise DimensionMismatch(f"block at {off} is not square: {blk.shape}")
            pos += blk.shape[0]
        if pos != self.dim:
            raise DimensionMismatch(f"blocks cover {pos} of {self.dim} rows")

    @classmethod
    def from_blocks(cls, blocks, orthogonal: bool = False) -> "BlockDiagMatrix":
        out, pos = [], 0
        for blk in blocks:
            blk = np.ascontiguousarray(blk, dtype=np.float64)
            out.append((pos, blk))
            pos += blk.shape[0]
        return cls(pos, tuple(out), orthogonal)

    @classmethod
    def identity(cls, dim: int, block: int | None = None) -> "BlockDiagMatrix":
        block = block or dim
        sizes = [min(block, dim - i) for i in range(0, dim, block)]
        return cls.from_blocks([np.eye(s) for s in sizes], orthogonal=True)

    @property
    def sizes(self) -> list[int]:
        return [blk.shape[0] for _, blk in self.blocks]

    @property
    def offsets(self) -> list[int]:
        return [off for off, _ in self.blocks]

    @property
    def T(self) -> "BlockDiagMatrix":
        return BlockDiagMatrix(
            self.dim,
            tuple((off, np.ascontiguousarray(blk.T)) for off, blk in self.blocks),
            self.orthogonal,
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        for off, blk in self.blocks:
            s = blk.shape[0]
            out[off:off + s, off:off + s] = blk
        return out

    def max_orthogonality_error(self) -> float:
        err = 0.0
        for _, blk in self.blocks:
            err = max(err, float(np.max(np.abs(blk.T @ blk - np.eye(blk.shape[0])))))
        return err


def _mgs_pass(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Right-looking modified Gram-Schmidt on the rows of ``rows`` (columns of A).
    v = rows.copy()
    n = v.shape[0]
    r = np.zeros((n, n))
    for j in range(n):
        nrm = float(np.sqrt(v[j] @ v[j]))
        if nrm < PIVOT_TOL:
            raise RankDeficient(f"pivot norm {nrm:.3e} at column {j}")
        v[j] /= nrm
        r[j, j] = nrm
        if j + 1 < n:
            coef = v[j + 1:] @ v[j]
            r[j, j + 1:] = coef
            v[j + 1:] -= np.outer(coef, v[j])
    return v, r


def gram_schmidt_qr(a) -> tuple[np.ndarray, np.ndarray]:
    """QR of a square matrix by modified Gram-Schmidt plus one full reorthogonalization.

    R has a nonnegative diagonal. Raises :class:`RankDeficient` when a pivot
    norm drops below 1e-12, in which case the caller is expected to draw a new
    matrix.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"gram_schmidt_qr needs a square matrix, got {a.shape}")
    q1, r1 = _mgs_pass(np.ascontiguousarray(a.T))
    q2, r2 = _mgs_pass(q1)
    return np.ascontiguousarray(q2.T), r2 @ r1


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle-method tournament: every pair meets once per sweep, pairs in a
    # round are disjoint so one round is a single vectorised rotation.
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        left, right = [], []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p >= 0 and q >= 0:
                left.append(min(p, q))
                right.append(max(p, q))
        rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(g: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Jacobi on the rows of ``g`` (i.e. the columns of the matrix).

    Returns the rotated rows and the accumulated rotation V (as rows, so the
    original matrix equals ``rot.T @ v``).
    """
    g = g.copy()
    q = g.shape[0]
    v = np.eye(q)
    if q < 2:
        return g, v
    rounds = _round_robin(q)
    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for left, right in rounds:
            gl, gr = g[left], g[right]
            alpha = np.einsum("ij,ij->i", gl, gl)
            beta = np.einsum("ij,ij->i", gr, gr)
            gamma = np.einsum("ij,ij->i", gl, gr)
            scale = np.sqrt(alpha * beta)
            active = (scale > 0) & (np.abs(gamma) > tol * scale)
            if not active.any():
                continue
            rotated = True
            li, ri = left[active], right[active]
            a, b, c = alpha[active], beta[active], gamma[active]
            zeta = (b - a) / (2.0 * c)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = cs * t
            cs, sn = cs[:, None], sn[:, None]
            x, y = g[li], g[ri]
            g[li] = cs * x - sn * y
            g[ri] = sn * x + cs * y
            x, y = v[li], v[ri]
            v[li] = cs * x - sn * y
            v[ri] = sn * x + cs * y
        if not rotated:
            return g, v
    raise NoConvergence(f"one-sided Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps")


def _complete_basis(basis: np.ndarray, dim: int) -> np.ndarray:
    """Extend orthonormal columns ``basis`` (dim x k) to a full orthogonal matrix."""
    cols = [basis[:, j] for j in range(basis.shape[1])]
    while len(cols) < dim:
        b = np.array(cols).T if cols else np.zeros((dim, 0))
        resid = np.eye(dim) - b @ b.T
        resid -= b @ (b.T @ resid)
        pick = int(np.argmax(np.einsum("ij,ij->j", resid, resid)))
        vec = resid[:, pick]
        for _ in range(2):
            vec = vec - b @ (b.T @ vec)
        cols.append(vec / np.linalg.norm(vec))
    return np.array(cols).T


def _fix_sign(col: np.ndarray) -> float:
    idx = int(np.argmax(np.abs(col)))
    return -1.0 if col[idx] < 0 else 1.0


def _svd_tall(w: np.ndarray, full_matrices: bool):
    # w is p x q with p >= q.
    p, q = w.shape
    if p > q:
        q0, r = np.linalg.qr(w, mode="complete" if full_matrices else "reduced")
        r = r[:q]
    else:
        q0, r = None, w
    tol = max(JACOBI_TOL, 4.0 * np.finfo(float).eps * np.sqrt(q))
    rot, vrows = _jacobi_columns(np.ascontiguousarray(r.T), tol)
    sig = np.sqrt(np.einsum("ij,ij->i", rot, rot))
    order = np.argsort(-sig, kind="stable")
    sig, rot, vrows = sig[order], rot[order], vrows[order]
    cutoff = (sig[0] if q else 0.0) * q * np.finfo(float).eps
    live = sig > cutoff
    ur = np.zeros((q, q))
    ur[:, live] = (rot[live] / sig[live, None]).T
    if not live.all():
        # sig is sorted, so live columns form a prefix and completions fill the tail
        ur = _complete_basis(ur[:, live], q)
    if q0 is None:
        u = ur
    elif full_matrices:
        u = np.hstack([q0[:, :q] @ ur, q0[:, q:]])
    else:
        u = q0 @ ur
    return u, sig, vrows


def svd_dense(a, full_matrices: bool = True) -> SvdResult:
    """Singular value decomposition via one-sided Jacobi rotations.

    Tall inputs are first reduced to a square triangle with a Householder QR,
    wide inputs are handled through their transpose. Singular values come out
    descending and each singular pair is signed so that the largest-magnitude
    entry of the left vector is positive.
    """
    a = as_matrix(a, "svd input")
    m, n = a.shape
    if min(m, n) < 1:
        raise DimensionMismatch("svd_dense needs min(m, n) >= 1")
    if m >= n:
        u, sig, vt = _svd_tall(a, full_matrices)
    else:
        vfull, sig, ut = _svd_tall(np.ascontiguousarray(a.T), full_matrices)
        u, vt = ut.T.copy(), np.ascontiguousarray(vfull.T)
    k = sig.shape[0]
    u = np.ascontiguousarray(u)
    vt = np.ascontiguousarray(vt)
    for j in range(k):
        if _fix_sign(u[:, j]) < 0:
            u[:, j] *= -1.0
            vt[j] *= -1.0
    for j in range(k, u.shape[1]):
        u[:, j] *= _fix_sign(u[:, j])
    for j in range(k, vt.shape[0]):
        vt[j] *= _fix_sign(vt[j])
    return SvdResult(u, sig, vt)


def blockdiag_mul_left(p: BlockDiagMatrix, x) -> np.ndarray:
    """``dense(p) @ x`` without materialising ``p``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != p.dim:
        raise DimensionMismatch(f"left block product: dim {p.dim} vs rows {x.shape}")
    out = np.empty_like(x, order="C")
    for off, blk in p.blocks:
        s = blk.shape[0]
        if not blk.any():
            out[off:off + s] = 0.0
        else:
            out[off:off + s] = blk @ x[off:off + s]
    return out


def blockdiag_mul_right(x, q: BlockDiagMatrix) -> np.ndarray:
    """``x @ dense(q)`` without materialising ``q``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != q.dim:
        raise DimensionMismatch(f"right block product: cols {x.shape} vs dim {q.dim}")
    out = np.empty_like(x, order="C")
    for off, blk in q.blocks:
        s = blk.shape[0]
        if not blk.any():
            out[:, off:off + s] = 0.0
        else:
            out[:, off:off + s] = x[:, off:off + s] @ blk
    return out


def pinv_apply(svd: SvdResult, y, rcond: float) -> np.ndarray:
    """Minimum-norm least-squares solution ``V diag(1/sigma) U^T y``.

    Singular values at or below ``rcond * sigma_1`` are treated as zero.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != svd.U.shape[0]:
        raise DimensionMismatch(f"y has shape {y.shape}, expected ({svd.U.shape[0]},)")
    if not 0.0 < rcond < 1.0:
        raise ValueError("rcond must lie in (0, 1)")
    k = svd.sigma.shape[0]
    sig = svd.sigma
    keep = sig > rcond * sig[0] if k else np.zeros(0, dtype=bool)
    inv = np.zeros(k)
    inv[keep] = 1.0 / sig[keep]
    return svd.Vt[:k].T @ (inv * (svd.U[:, :k].T @ y))
