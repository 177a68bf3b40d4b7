"""Accuracy metrics comparing a federated result against a centralized oracle."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionMismatch


def align_signs(est: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Flip each column of ``est`` to minimise its distance to ``ref``."""
    if est.shape != ref.shape:
        raise DimensionMismatch(f"{est.shape} vs {ref.shape}")
    signs = np.where(np.einsum("ij,ij->j", est, ref) < 0, -1.0, 1.0)
    return est * signs


def singular_vector_rmse(est: np.ndarray, ref: np.ndarray) -> float:
    """RMSE between column sets of singular vectors after per-column sign alignment."""
    diff = align_signs(est, ref) - ref
    return float(np.sqrt(np.mean(diff * diff))) if diff.size else 0.0


def projection_distance(u: np.ndarray, u_hat: np.ndarray, iters: int = 1000, seed: int = 0) -> float:
    """``||U U^T - Û Û^T||_2`` by power iteration on the squared difference operator."""
    if u.shape[0] != u_hat.shape[0]:
        raise DimensionMismatch(f"{u.shape} vs {u_hat.shape}")

    def apply(v):
        return u @ (u.T @ v) - u_hat @ (u_hat.T @ v)

    v = np.random.default_rng(seed).standard_normal(u.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = apply(apply(v))
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        if abs(nrm - lam) <= 1e-12 * nrm:
            lam = nrm
            break
        lam = nrm
    return float(np.sqrt(lam))


def reconstruction_mape(x: np.ndarray, u: np.ndarray, sigma: np.ndarray, vt: np.ndarray) -> float:
    """``mean|X - U diag(sigma) V^T| / mean|X|`` as a fraction (multiply by 100 for percent)."""
    k = sigma.shape[0]
    approx = (u[:, :k] * sigma) @ vt[:k]
    denom = float(np.mean(np.abs(x)))
    return float(np.mean(np.abs(x - approx))) / denom if denom else 0.0


def lr_mse(x: np.ndarray, w: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((x @ w - y) ** 2))


@dataclass
class MetricRecord:
    rmse_u: float
    rmse_v: float
    projection_distance: float
    mape: float
    lr_mse: float | None = None
    sign_alignment: str = "per-column sign chosen to minimise distance"

    @property
    def rmse(self) -> float:
        return max(self.rmse_u, self.rmse_v)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["rmse"] = self.rmse
        d["mape_percent"] = 100.0 * self.mape
        return d


def metric_suite(x: np.ndarray, u: np.ndarray, sigma: np.ndarray, vt: np.ndarray,
                 oracle_u: np.ndarray, oracle_vt: np.ndarray, rank: int | None = None,
                 lr: tuple[np.ndarray, np.ndarray] | None = None) -> MetricRecord:
    """Compare a (federated) factorization of ``x`` with the centralized oracle factors.

    Only the leading ``rank`` singular vectors are compared; by default
    ``len(sigma)`` (the rest are not unique).
    """
    k = rank if rank is not None else sigma.shape[0]
    rec = MetricRecord(
        rmse_u=singular_vector_rmse(u[:, :k], oracle_u[:, :k]),
        rmse_v=singular_vector_rmse(vt[:k].T, oracle_vt[:k].T),
        projection_distance=projection_distance(u[:, :k], oracle_u[:, :k]),
        mape=reconstruction_mape(x, u, sigma, vt),
    )
    if lr is not None:
        w, y = lr
        rec.lr_mse = lr_mse(x, w, y)
    return rec
