"""Lossless federated SVD with removable random orthogonal masks."""
from .apps import fed_lr, fed_lsa, fed_pca, secure_feature_mean
from .errors import FedSvdError
from .linalg import BlockDiagMatrix, SvdResult, gram_schmidt_qr, svd_dense
from .masks import efficient_orthogonal, generate_P, random_orthogonal, split_Q
from .prng import SeededGaussianStream
from .protocol import FedSvdResult, SessionConfig, run_fedsvd

__version__ = "0.1.0"

__all__ = [
    "BlockDiagMatrix",
    "FedSvdError",
    "FedSvdResult",
    "SeededGaussianStream",
    "SessionConfig",
    "SvdResult",
    "efficient_orthogonal",
    "fed_lr",
    "fed_lsa",
    "fed_pca",
    "generate_P",
    "gram_schmidt_qr",
    "random_orthogonal",
    "run_fedsvd",
    "secure_feature_mean",
    "split_Q",
    "svd_dense",
]
