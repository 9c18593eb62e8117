"""Mixed-dimension KV cache compression with per-token PCA ranks."""
__version__ = "0.1.0"

from .allocation import Allocation, bisect_allocate, exhaustive_oracle, gap_report, greedy_topup, inner_argmin
from .attention import GqaConfig, full_attention, mixed_rank_attention
from .cache import CompressedCache, HeadCache, TokenGroup, build_cache, deserialize, load, memory_footprint, save, serialize
from .estimators import KVCacheCompressor
from .exceptions import (
    ConfigurationError,
    ContractViolation,
    DataIntegrityError,
    FormatError,
    InstanceTooLarge,
    MDKVError,
    NumericalError,
)
from .linalg import sym_eig
from .pca import DEFAULT_RATIOS, HeadPCA, ProjectionBasis, RatioSet, fit_basis
from .pipeline import BudgetSpec, HeadBudgets, compress
from .scoring import LossTable, build_loss_table, loss_scores, prune_hull, snapkv_scores
from .synthetic import SyntheticSpec, make_workload

__all__ = [
    "Allocation", "BudgetSpec", "CompressedCache", "ConfigurationError", "ContractViolation",
    "DataIntegrityError", "DEFAULT_RATIOS", "FormatError", "GqaConfig", "HeadBudgets", "HeadCache",
    "HeadPCA", "InstanceTooLarge", "KVCacheCompressor", "LossTable", "MDKVError", "NumericalError",
    "ProjectionBasis", "RatioSet", "SyntheticSpec", "TokenGroup", "bisect_allocate", "build_cache",
    "build_loss_table", "compress", "deserialize", "exhaustive_oracle", "fit_basis", "full_attention",
    "gap_report", "greedy_topup", "inner_argmin", "load", "loss_scores", "make_workload",
    "memory_footprint", "mixed_rank_attention", "prune_hull", "save", "serialize", "snapkv_scores",
    "sym_eig",
]
