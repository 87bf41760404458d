"""The maximum-principle feedback and the dynamic-programming feedback agree.

The first is built from the adjoint p = gamma x + phi, the second by
completing the square in G at p = V_x. We also minimise G numerically,
with no formula at all, and land on the same control.
"""

from risksens import baseline_config, factor_problem, feedback_dpp, feedback_mp, minimize_G
from risksens.portfolio import build_coefficients, value_coefficients, value_fn_t, value_fn_x, value_fn_xx

cfg = baseline_config()
c = build_coefficients(cfg)
vc = value_coefficients(c)
prob = factor_problem(cfg.params)

print("    t     x     u (MP)     u (DPP)   u (search)   V_t + min G")
for t, x in [(0.0, 1.0), (0.25, -2.0), (0.5, 0.0), (0.75, 2.5), (0.99, -0.5)]:
    u_mp = feedback_mp(t, x, c, cfg.params)
    u_dpp = feedback_dpp(t, x, vc, cfg.params)
    u_num, g_min = minimize_G(t, x, value_fn_x(t, x, vc), value_fn_xx(t, x, vc), prob)
    resid = value_fn_t(t, x, vc) + g_min
    print(f"{t:5.2f} {x:5.2f}  {u_mp:9.6f}  {u_dpp:9.6f}  {u_num[0]:9.6f}   {resid:+.2e}")
