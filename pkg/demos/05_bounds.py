"""
Measuring the divergence bounds
===============================

For convex MCLR with full-gradient local steps, compare each client's
distance to the virtual (centralised) group trajectory against the bound
delta * ((eta*L + 1)^e - 1) / L, epoch by epoch.
"""

from fglab import bounds

report = bounds.verify_bounds(bounds.BoundConfig(rounds=3, E=20))
c = report.constants
print(f"L_hat={c.L_hat:.3f} eta={c.eta:.4f} delta={c.delta:.4f} M_hat={c.M_hat:.3f}")
print(f"{len(report.rows)} checks, {report.violations} violations")

for row in report.by_kind("client")[:21:5]:
    print(f"round {row['t']} group {row['group']} e={row['e']:2d} "
          f"measured={row['measured']:.4f} bound={row['bound']:.4f}")

for gap in report.loss_gap[:3]:
    print(f"round {gap['t']} group {gap['group']} loss gap={gap['gap']:.4f} "
          f"bound={gap['bound']:.4f}")
