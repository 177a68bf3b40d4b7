"""ICA recovery attacks against masked data and their Pearson scoring.

Rows of the input are treated as observed mixtures and columns as samples.
Running on ``X'`` attacks the P side, running on ``X'^T`` attacks the Q side.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .masks import efficient_orthogonal
from .linalg import blockdiag_mul_left, blockdiag_mul_right
from .prng import SeededGaussianStream, derive_seed


@dataclass
class IcaResult:
    sources: np.ndarray  # n_components x samples
    unmixing: np.ndarray
    converged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    n_iter: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _whiten(x: np.ndarray, n_components: int) -> tuple[np.ndarray, np.ndarray]:
    xc = x - x.mean(axis=1, keepdims=True)
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    tol = s[0] * max(x.shape) * np.finfo(float).eps if s.size else 0.0
    k = min(n_components, int(np.sum(s > tol)))
    samples = x.shape[1]
    k_mat = (u[:, :k] / s[:k]).T * np.sqrt(samples)
    return k_mat @ xc, k_mat


def fastica(x, n_components: int, seed: int = 0, max_iter: int = 500, tol: float = 1e-6) -> IcaResult:
    """Deflation FastICA with the log-cosh contrast (g = tanh).

    Components that hit ``max_iter`` are kept and flagged as not converged.
    Near-constant directions are dropped during whitening, so fewer than
    ``n_components`` sources can come back.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= n_components <= min(x.shape):
        raise ValueError(f"n_components={n_components} must lie in [1, {min(x.shape)}]")
    z, k_mat = _whiten(x, n_components)
    k, samples = z.shape
    rng = np.random.default_rng(seed)
    w_all = np.zeros((k, k))
    converged = np.zeros(k, dtype=bool)
    iters = np.zeros(k, dtype=int)
    for p in range(k):
        w = rng.standard_normal(k)
        w -= w_all[:p].T @ (w_all[:p] @ w)
        w /= np.linalg.norm(w)
        for it in range(1, max_iter + 1):
            g = np.tanh(w @ z)
            w_new = z @ g / samples - np.mean(1.0 - g * g) * w
            w_new -= w_all[:p].T @ (w_all[:p] @ w_new)
            w_new /= np.linalg.norm(w_new)
            gap = abs(abs(float(w_new @ w)) - 1.0)
            w = w_new
            if gap < tol:
                converged[p] = True
                break
        iters[p] = it
        w_all[p] = w
    return IcaResult(w_all @ z, w_all @ k_mat, converged, iters)


def ica_blockwise(x, b_assumed: int, seed: int = 0, max_iter: int = 500, tol: float = 1e-6,
                  n_components: int | None = None) -> IcaResult:
    """ICA run separately on every ``b_assumed``-row block, exploiting a block-diagonal mask.

    ``n_components`` caps the sources unmixed per block (default: the full
    block). With ``b_assumed`` at least the row count and the same cap this is
    exactly :func:`fastica`.
    """
    x = np.asarray(x, dtype=np.float64)
    rows = x.shape[0]
    if b_assumed < 1:
        raise ValueError("b_assumed must be >= 1")
    sources, flags, iters = [], [], []
    for j, lo in enumerate(range(0, rows, b_assumed)):
        block = x[lo:lo + b_assumed]
        if np.ptp(block, axis=1).max() == 0.0:
            continue
        k = min(block.shape) if n_components is None else min(n_components, *block.shape)
        res = fastica(block, k, seed if j == 0 else derive_seed(seed, j),
                      max_iter, tol)
        sources.append(res.sources)
        flags.append(res.converged)
        iters.append(res.n_iter)
    if not sources:
        return IcaResult(np.zeros((0, x.shape[1])), np.zeros((0, rows)))
    return IcaResult(np.vstack(sources), np.zeros((0, rows)), np.concatenate(flags), np.concatenate(iters))


def _standardize(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=1, keepdims=True)
    nrm = np.linalg.norm(xc, axis=1)
    keep = nrm > 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0)))
    return xc[keep] / nrm[keep, None]


def correlation_matrix(recovered, truth) -> np.ndarray:
    """|Pearson| between every (recovered row, truth row); zero-variance rows are dropped."""
    a = _standardize(np.asarray(recovered, dtype=np.float64))
    t = _standardize(np.asarray(truth, dtype=np.float64))
    if a.shape[1] != t.shape[1]:
        raise ValueError(f"row lengths differ: {a.shape[1]} vs {t.shape[1]}")
    return np.abs(a @ t.T)


def pearson_score(recovered, truth) -> float:
    """Maximum |Pearson| over all (recovered, truth) row pairs."""
    c = correlation_matrix(recovered, truth)
    return float(c.max()) if c.size else 0.0


def assignment_score(recovered, truth) -> float:
    """Mean |Pearson| under the best one-to-one row matching."""
    c = correlation_matrix(recovered, truth)
    if not c.size:
        return 0.0
    r, t = linear_sum_assignment(-c)
    return float(c[r, t].mean())


def random_baseline(truth, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    return pearson_score(rng.standard_normal(np.shape(truth)), truth)


@dataclass
class AttackReport:
    method: str  # random | ica | ica_b
    b: int | None
    side: str  # rows | cols
    seed: int
    max_abs_pearson: float
    assignment_pearson: float


def mask_for_attack(x: np.ndarray, b: int, seed: int, identity: bool = False) -> np.ndarray:
    """``P X Q`` with block size b, as the CSP would see it."""
    if identity:
        return x.copy()
    m, n = x.shape
    p = efficient_orthogonal(m, b, SeededGaussianStream(derive_seed(seed, 0x50)))
    q = efficient_orthogonal(n, b, SeededGaussianStream(derive_seed(seed, 0x51)))
    return blockdiag_mul_right(blockdiag_mul_left(p, x), q)


def attack_suite(x, b_values, seeds, n_components: int = 32, sides=("rows", "cols"),
                 methods=("random", "ica", "ica_b"), identity_masks: bool = False,
                 max_iter: int = 200) -> list[AttackReport]:
    """Random baseline, plain ICA and block-aware ICA on both sides of the masked data."""
    x = np.asarray(x, dtype=np.float64)
    reports = []
    for seed in seeds:
        if "random" in methods:
            for side in sides:
                truth = x if side == "rows" else x.T
                rnd = np.random.default_rng(seed).standard_normal(truth.shape)
                reports.append(AttackReport("random", None, side, seed, pearson_score(rnd, truth),
                                            assignment_score(rnd, truth)))
        for b in b_values:
            masked = mask_for_attack(x, b, seed, identity_masks)
            for side in sides:
                obs, truth = (masked, x) if side == "rows" else (masked.T, x.T)
                if "ica" in methods:
                    rec = fastica(obs, min(n_components, *obs.shape), seed, max_iter=max_iter).sources
                    reports.append(AttackReport("ica", b, side, seed, pearson_score(rec, truth),
                                                assignment_score(rec, truth)))
                if "ica_b" in methods:
                    rec = ica_blockwise(obs, b, seed, max_iter=max_iter,
                                        n_components=n_components).sources
                    reports.append(AttackReport("ica_b", b, side, seed, pearson_score(rec, truth),
                                                assignment_score(rec, truth)))
    return reports


def summarize(reports: list[AttackReport]) -> dict[tuple[str, int | None], float]:
    """Mean over seeds of the best side's score, per (method, b)."""
    best: dict[tuple[str, int | None, int], float] = {}
    for r in reports:
        key = (r.method, r.b, r.seed)
        best[key] = max(best.get(key, 0.0), r.max_abs_pearson)
    grouped: dict[tuple[str, int | None], list[float]] = {}
    for (method, b, _), v in best.items():
        grouped.setdefault((method, b), []).append(v)
    return {k: float(np.mean(v)) for k, v in grouped.items()}


def write_report_csv(path, reports: list[AttackReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "b", "side", "seed", "score", "assignment_score"])
        for r in reports:
            w.writerow([r.method, "NA" if r.b is None else r.b, r.side, r.seed,
                        f"{r.max_abs_pearson:.5f}", f"{r.assignment_pearson:.5f}"])
