"""False-negative-aware negative sampling for cross-modal metric learning."""

from fne.embedding import average_pool, cosine_similarity, similarity_matrix
from fne.memory import MemoryBank, momentum_update
from fne.sampler import FneConfig, combined_weights, posterior
from fne.stats import DistributionTracker, GaussianStats

__version__ = "0.1.0"

__all__ = [
    "DistributionTracker",
    "FneConfig",
    "GaussianStats",
    "MemoryBank",
    "average_pool",
    "combined_weights",
    "cosine_similarity",
    "momentum_update",
    "posterior",
    "similarity_matrix",
]
