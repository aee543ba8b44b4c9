"""
EDC against MADC
================

MADC compares full cosine-similarity profiles (O(n^2 d) plus an O(n^3)
pass); EDC projects each update onto the top-m singular directions first.
On pre-trained updates the two pairwise distances line up closely.
"""

import numpy as np

from fglab import clustering, datagen, flcore, models
from fglab.numkit import rng_stream

X, y = datagen.make_digits(300, rng_stream(0, "digits"))
ds = datagen.partition_noniid(X, y, 30, 10, rng_stream(0, "part"))
ds, _ = datagen.plant_populations(ds, 3, rng_stream(0, "pop"))
spec = models.ModelSpec(models.MCLR, ds.input_dim, ds.num_classes)
w0 = models.init_params(spec, rng_stream(0, "init"))
train = flcore.TrainParams(E=20, B=10, eta=0.03)

W = np.array(flcore.local_updates(spec, ds, range(len(ds)), w0, train, seed=0, round_=0))
_, E = clustering.edc(W, 3)
P = clustering.madc_matrix(clustering.similarity_matrix(W))
iu = np.triu_indices(len(W), 1)
r = np.corrcoef(E[iu], P[iu])[0, 1]
print(f"{len(iu[0])} pairs, Pearson r(EDC, MADC) = {r:.3f}")

labels = clustering.kmeans_pp(clustering.edc_features(W, 3)[0], 3, rng_stream(0, "kmeans")).labels
print("k-means++ on EDC features:", labels)
print("complete linkage on MADC: ", clustering.hierarchical_complete(P, 3).labels)
