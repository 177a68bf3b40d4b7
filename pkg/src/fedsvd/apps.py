"""Applications built on a FedSVD session: horizontal PCA, vertical linear
regression and latent semantic analysis."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .prng import SeededGaussianStream, derive_seed
from .protocol import SessionConfig, SessionOutcome, run_fedsvd
from .secagg import FixedPointCodec, PairwiseMaskPlan, aggregate_batches, mask_batch

log = logging.getLogger(__name__)


@dataclass
class PcaResult:
    owner: int
    U_r: np.ndarray
    projection: np.ndarray  # r x n_i


@dataclass
class LrResult:
    owner: int
    weights: np.ndarray
    mse: float


@dataclass
class LsaResult:
    owner: int
    U_r: np.ndarray
    sigma_r: np.ndarray
    Vt_r: np.ndarray  # r x n_i


def _session(blocks, **kw) -> SessionConfig:
    m = blocks[0].shape[0]
    widths = tuple(b.shape[1] for b in blocks)
    return SessionConfig(m=m, n=sum(widths), widths=widths, **kw)


def secure_sum(vectors, seed: int, codec=None) -> np.ndarray:
    """Sum of one vector per party through pairwise-masked aggregation."""
    codec = codec or FixedPointCodec()
    plan = PairwiseMaskPlan.from_stream(len(vectors), SeededGaussianStream(seed))
    masked = [mask_batch(plan, i, 0, np.asarray(v, dtype=np.float64)[None, :], codec)
              for i, v in enumerate(vectors)]
    return aggregate_batches(masked, codec)[0]


def secure_feature_mean(blocks, seed: int = 0) -> np.ndarray:
    """Per-row mean over all parties' columns; parties reveal only masked sums and counts."""
    vecs = [np.append(b.sum(axis=1), b.shape[1]) for b in blocks]
    total = secure_sum(vecs, derive_seed(seed, 0x4D45414E))
    return total[:-1] / total[-1]


def fed_pca(blocks, r: int, *, b: int = 32, master_seed: int = 0, transport: str = "mem",
            **kw) -> tuple[list[PcaResult], SessionOutcome]:
    """Horizontal PCA: rows are the shared features, every party holds its own samples.

    The data is expected to be centred already (see :func:`secure_feature_mean`).
    """
    blocks = [np.asarray(x, dtype=np.float64) for x in blocks]
    cfg = _session(blocks, b=b, master_seed=master_seed, r=r, recover_V=False, app="pca", **kw)
    out = run_fedsvd(cfg, blocks, transport=transport)
    res = [PcaResult(i, o.U, o.U.T @ blocks[i]) for i, o in enumerate(out.results)]
    return res, out


def fed_lsa(blocks, r: int, *, b: int = 32, master_seed: int = 0, transport: str = "mem",
            **kw) -> tuple[list[LsaResult], SessionOutcome]:
    blocks = [np.asarray(x, dtype=np.float64) for x in blocks]
    cfg = _session(blocks, b=b, master_seed=master_seed, r=r, app="lsa", **kw)
    out = run_fedsvd(cfg, blocks, transport=transport)
    res = [LsaResult(i, o.U, o.sigma, o.Vt_local) for i, o in enumerate(out.results)]
    return res, out


def fed_lr(blocks, y, *, label_holder: int = 0, add_bias: bool = True, b: int = 32,
           master_seed: int = 0, transport: str = "mem", **kw) -> tuple[list[LrResult], SessionOutcome]:
    """Vertical linear regression solved in one shot through the masked SVD.

    The label holder appends the bias column. Returned weights follow each
    party's columns (the label holder's last weight is the bias when
    ``add_bias``). The training MSE is computed from securely aggregated
    partial predictions.
    """
    blocks = [np.asarray(x, dtype=np.float64) for x in blocks]
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (blocks[0].shape[0],):
        raise ConfigError(f"labels have shape {y.shape}, expected ({blocks[0].shape[0]},)")
    if add_bias:
        blocks[label_holder] = np.hstack([blocks[label_holder], np.ones((y.shape[0], 1))])
    cfg = _session(blocks, b=b, master_seed=master_seed, app="lr", label_holder=label_holder,
                   recover_V=False, recover_U=False, **kw)
    out = run_fedsvd(cfg, blocks, transport=transport, labels=y)
    partial = [x @ o.weights for x, o in zip(blocks, out.results)]
    pred = secure_sum(partial, derive_seed(master_seed, 0x50524544))
    mse = float(np.mean((pred - y) ** 2))
    sigma = out.csp.svd.sigma
    if sigma.size and sigma[-1] <= 1e-12 * sigma[0]:
        log.warning("design matrix is rank deficient; returning the truncated minimum-norm solution")
    return [LrResult(i, o.weights, mse) for i, o in enumerate(out.results)], out
