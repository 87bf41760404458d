"""Monte Carlo check that nudging the optimal fraction costs something.

Every policy runs on the same Brownian increments, so the cost differences
are resolved far below the spread of the costs themselves. The gap grows
like (theta+1) S eps^2 / 2.
"""

from risksens import baseline_config
from risksens.portfolio import build_coefficients, optimality_table, value_coefficients, value_fn

cfg = baseline_config(n_paths=20_000)
c = build_coefficients(cfg)
rows = optimality_table(cfg, c)
p = cfg.params

print(f"analytic V(0, x0) = {value_fn(0.0, cfg.x0, value_coefficients(c)):+.6f}")
print("\npolicy          J           SE        J - J(u_bar)   paired SE   (th+1)S eps^2/2")
for r in rows:
    quad = 0.5 * (p.theta + 1) * p.S * r.epsilon ** 2 if r.label != "zero" else float("nan")
    print(f"{r.label:12s} {r.estimate.value:+.6f}  {r.estimate.std_error:.1e}  "
          f"{r.delta:+.3e}   {r.delta_se:.1e}    {quad:.3e}")
