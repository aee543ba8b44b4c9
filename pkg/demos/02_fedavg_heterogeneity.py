"""
How label skew shows up in FedAvg
=================================

Partition the 8x8 digits pool so that every client sees 1, 5 or all 10
classes, run FedAvg and look at the client discrepancy: the mean distance
between the local models and the model they started from.
"""

import numpy as np

from fglab import datagen, flcore, models
from fglab.numkit import rng_stream

X, y = datagen.make_digits(300, rng_stream(0, "digits"))
spec = models.ModelSpec(models.MCLR, X.shape[1], 10)
train = flcore.TrainParams(E=10, B=10, eta=0.03)

for cpc in (1, 5, 10):
    ds = datagen.partition_noniid(X, y, 50, cpc, rng_stream(0, "part"))
    w0 = models.init_params(spec, rng_stream(0, "init"))
    rows = flcore.run_fedavg(spec, ds, w0, train, T=20, K=10, seed=0)
    disc = np.array([r.discrepancy for r in rows])
    best = max(r.weighted_accuracy for r in rows)
    print(f"classes/client={cpc:2d}  max acc={best:.3f}  "
          f"discrepancy mean={disc.mean():.3f} var={disc.var():.4f}")

# one metrics file, in the same schema the CLI writes
print(flcore.metrics_csv(rows[:3], "fedavg"))
