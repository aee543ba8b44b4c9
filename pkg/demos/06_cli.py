"""
Driving the experiment runner
=============================

The same thing as ``fglab run --config synthetic-bench --set T=5``, then
``fglab plot --input``.
"""

import json
import tempfile
from pathlib import Path

from fglab import cli

out = Path(tempfile.mkdtemp()) / "bench"
code = cli.main(["run", "--config", "synthetic-bench", "--output-dir", str(out),
                 "--set", "T=5", "--set", "n_clients=40", "--set", "alpha=4"])
print("exit code", code)
print(json.dumps(json.loads((out / "summary.json").read_text()), indent=1))
cli.main(["plot", "--input", str(out)])
print((out / "plot_series.csv").read_text().splitlines()[:4])
