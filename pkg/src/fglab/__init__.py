"""fglab: federated learning with static similarity-based client groups.

Modules
-------
numkit      cosine helpers, truncated SVD, seeded random streams
models      softmax regression and one-hidden-layer MLP on flat parameters
datagen     Synthetic(alpha, beta), label-limited partitions, digits, IDX files
flcore      FedAvg / FedProx local solver, sampling, aggregation, metrics
clustering  EDC / MADC measures, K-Means++ and complete-linkage clustering
fedgroup    FedGroup / FedGrouProx, cold starts, FeSEM and IFCA baselines
bounds      numerical audit of the group-model divergence bounds
cli         experiment runner (``fglab run``, ``fglab plot``)
"""

from . import bounds, clustering, datagen, fedgroup, flcore, models, numkit

__version__ = "0.1.0"

__all__ = ["bounds", "clustering", "datagen", "fedgroup", "flcore", "models", "numkit"]
