"""
Checking the model gradients
============================

Both models (multinomial logistic regression and a one-hidden-layer MLP)
expose an analytic gradient. Compare it with central differences.
"""

import numpy as np

from fglab import models

rng = np.random.default_rng(0)
X = rng.normal(size=(8, 5))
y = rng.integers(0, 3, size=8)
batch = models.Batch(X, y)

for kind, hidden in [(models.MCLR, 0), (models.MLP, 4)]:
    spec = models.ModelSpec(kind, 5, 3, hidden)
    w = rng.normal(scale=0.3, size=spec.num_params)
    g = models.gradient(spec, w, batch)

    h = 1e-5
    fd = np.array([(models.loss(spec, w + h * e, batch) - models.loss(spec, w - h * e, batch)) / (2 * h)
                   for e in np.eye(w.size)])
    print(f"{kind:5s} params={spec.num_params:3d} "
          f"rel err={np.linalg.norm(g - fd) / np.linalg.norm(fd):.2e}")
