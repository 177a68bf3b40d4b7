"""Dataset generation and ingestion.

The real Wine, MNIST and MovieLens files are not bundled; seeded look-alike
fixtures with the same shapes and value characteristics stand in for them in
tests, and :func:`ingest_csv` / :func:`ingest_ratings` load the real files
when an operator supplies them.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ParseError, RaggedRows
from .prng import SeededGaussianStream


def _orthonormal_columns(rows: int, cols: int, stream: SeededGaussianStream) -> np.ndarray:
    q, r = np.linalg.qr(stream.normal_matrix(rows, cols))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def synth_powerlaw(m: int, n: int, alpha: float = 0.01, seed: int = 0) -> np.ndarray:
    """``Y = U diag(i^-alpha) V^T`` with Haar-like orthonormal factors from seeded Gaussians."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    k = min(m, n)
    stream = SeededGaussianStream(seed)
    u = _orthonormal_columns(m, k, stream)
    v = _orthonormal_columns(n, k, stream)
    sigma = np.arange(1, k + 1, dtype=np.float64) ** (-alpha)
    return (u * sigma) @ v.T


def ingest_csv(path, has_header: bool = False, delimiter: str = ",") -> np.ndarray:
    """Rectangular numeric CSV to a float matrix; errors carry 1-based row/column."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f, delimiter=delimiter)
        for lineno, row in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: non-numeric cell {cell!r} at row {lineno}, column {col}") from None
            if rows and len(vals) != len(rows[0]):
                raise RaggedRows(f"{path}: row {lineno} has {len(vals)} cells, expected {len(rows[0])}")
            rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1 if rows else 0)


def ingest_ratings(path, n_items: int | None = None, n_users: int | None = None,
                   delimiter: str | None = None) -> np.ndarray:
    """MovieLens ``user item rating [timestamp]`` triples to a dense items x users matrix.

    Missing ratings are zero. Ids are 1-based as in the MovieLens files.
    """
    triples = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split(delimiter)
            try:
                user, item, rating = int(parts[0]), int(parts[1]), float(parts[2])
            except (ValueError, IndexError):
                raise ParseError(f"{path}: bad rating triple at line {lineno}") from None
            triples.append((item, user, rating))
    items = n_items or max(t[0] for t in triples)
    users = n_users or max(t[1] for t in triples)
    out = np.zeros((items, users))
    for item, user, rating in triples:
        out[item - 1, user - 1] = rating
    return out


# -- look-alike fixtures ---------------------------------------------------

# (mean, std) of the 12 physico-chemical columns of the combined red+white wine table
_WINE_STATS = [
    (7.215, 1.296), (0.340, 0.165), (0.319, 0.145), (5.443, 4.758), (0.056, 0.035),
    (30.525, 17.749), (115.745, 56.522), (0.9947, 0.0030), (3.219, 0.161), (0.531, 0.149),
    (10.492, 1.193), (5.818, 0.873),
]


def wine_like(n_samples: int = 6497, seed: int = 0) -> np.ndarray:
    """12 x n_samples matrix with Wine-quality-like scales (features as rows)."""
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((3, n_samples))
    mix = rng.standard_normal((12, 3)) * 0.5
    out = np.empty((12, n_samples))
    for j, (mu, sd) in enumerate(_WINE_STATS):
        z = mix[j] @ latent + rng.standard_normal(n_samples)
        z /= z.std()
        # log-normal keeps the columns positive and right-skewed
        s2 = np.log1p((sd / mu) ** 2)
        out[j] = mu * np.exp(np.sqrt(s2) * z - s2 / 2)
    out[11] = np.clip(np.round(out[11]), 3, 9)
    return out


def mnist_like(n_samples: int = 2000, seed: int = 0) -> np.ndarray:
    """784 x n_samples matrix of 28x28 digit images (pixels as rows).

    Built from the 8x8 scikit-learn digits upsampled into a 20x20 box centred
    in a 28x28 frame, the MNIST layout; extra samples are 1-pixel shifts.
    """
    from scipy.ndimage import shift, zoom
    from sklearn.datasets import load_digits

    digits = load_digits().images
    rng = np.random.default_rng(seed)
    idx = rng.permutation(np.resize(np.arange(len(digits)), n_samples))
    out = np.empty((784, n_samples))
    for col, i in enumerate(idx):
        img = np.clip(zoom(digits[i], 2.5, order=1), 0, 16) * (255.0 / 16.0)
        img[img < 48.0] = 0.0  # keep the background exactly zero, as in MNIST
        frame = np.zeros((28, 28))
        frame[4:24, 4:24] = img
        if col >= len(digits):
            dy, dx = rng.integers(-1, 2, size=2)
            frame = shift(frame, (dy, dx), order=0)
        out[:, col] = frame.reshape(-1)
    return out


def movielens_like(n_items: int = 1682, n_users: int = 943, density: float = 0.063,
                   seed: int = 0) -> np.ndarray:
    """Sparse 1-5 ratings from a low-rank taste model, zeros for unrated."""
    rng = np.random.default_rng(seed)
    taste = rng.standard_normal((n_items, 8)) @ rng.standard_normal((8, n_users)) / np.sqrt(8)
    popularity = rng.pareto(1.5, n_items)[:, None] + 0.2
    activity = rng.pareto(1.5, n_users)[None, :] + 0.2
    p = popularity * activity
    p *= density / p.mean()
    mask = rng.random((n_items, n_users)) < np.clip(p, 0, 1)
    ratings = np.clip(np.round(3.5 + taste + 0.5 * rng.standard_normal(taste.shape)), 1, 5)
    return np.where(mask, ratings, 0.0)


def load_matrix(path) -> np.ndarray:
    from .storage import read_matrix

    path = Path(path)
    if path.suffix.lower() in (".csv", ".txt"):
        return ingest_csv(path)
    return read_matrix(path)
