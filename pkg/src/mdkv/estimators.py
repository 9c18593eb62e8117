"""scikit-learn style front end: fit on a prompt cache, predict attention outputs."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ContractViolation
from .pca import DEFAULT_RATIOS
from .pipeline import MODES, compress, evaluate_error


def check_heads(X, name):
    """Validate a (heads, tokens, dim) float array."""
    X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64], ensure_2d=False)
    if X.ndim != 3:
        raise ContractViolation(f"{name} must have shape (heads, tokens, dim), got {X.shape}")
    return X.astype(np.float32, copy=False)


class KVCacheCompressor(BaseEstimator):
    """Compress one attention layer's prompt cache under an equivalent KV size.

    Parameters
    ----------
    kv_size : int
        Equivalent KV size ``T``; the layer may hold ``H * T * D`` key entries.
    ratios : tuple of float
        Candidate compression ratios, must include 0 and 1.
    alpha : int
        Local window length; the last ``alpha`` tokens stay uncompressed and
        their queries drive scoring.
    mode : {"mixeddim", "mixeddim-h", "snapkv", "jointhead"}
    head_budgets : HeadBudgets or None
        Per-head quotas, only read by ``mode="mixeddim-h"``.
    convention : {"k_entries", "kv_pairs"}

    Attributes
    ----------
    cache_ : CompressedCache or JointCompressedCache
    report_ : CompressionReport
    """

    def __init__(self, kv_size=128, ratios=DEFAULT_RATIOS, alpha=32, mode="mixeddim",
                 head_budgets=None, convention="k_entries"):
        self.kv_size = kv_size
        self.ratios = ratios
        self.alpha = alpha
        self.mode = mode
        self.head_budgets = head_budgets
        self.convention = convention

    def fit(self, K, V, Q):
        """``K``, ``V``: (H_kv, L, D) prompt cache; ``Q``: (H, alpha, D) window queries."""
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}")
        K, V, Q = check_heads(K, "K"), check_heads(V, "V"), check_heads(Q, "Q")
        self.cache_, self.report_ = compress(
            K, V, Q, self.kv_size, mode=self.mode, ratios=tuple(self.ratios), alpha=self.alpha,
            head_budgets=self.head_budgets, convention=self.convention,
        )
        self.n_kv_heads_, _, self.head_dim_ = K.shape
        return self

    def predict(self, Q):
        """Attention outputs (H, M, D) of queries against the compressed cache."""
        check_is_fitted(self)
        Q = check_heads(Q, "Q")
        if Q.shape[2] != self.head_dim_:
            raise ContractViolation(f"queries have width {Q.shape[2]}, cache expects {self.head_dim_}")
        return self.cache_.attend(Q)

    def score(self, K, V, Q):
        """Negative mean attention-output error against the uncompressed cache."""
        check_is_fitted(self)
        return -evaluate_error(self.cache_, check_heads(K, "K"), check_heads(V, "V"), check_heads(Q, "Q"))
